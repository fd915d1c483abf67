#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string_view>

#include <torch/torch.h>
#include <json.hpp>

#include "syncast/checkpoint.hpp"
#include "syncast/diffusion.hpp"
#include "syncast/model.hpp"
#include "syncast/preference.hpp"

namespace syncast::alignment {

enum class OmegaMode { constant_one };

struct AlignmentConfig {
  // Effective sigma-argument coefficient beta * T_d.
  double beta_td = 1000.0;
  double alpha_far = 1.0;
  OmegaMode omega = OmegaMode::constant_one;
  int64_t batch_size = 4;
  double lr = 1e-5;
  int64_t steps = 200;  // optimizer steps
  double grad_clip = 1.0;  // 0 disables
  uint64_t seed = 0;

  void validate() const;  // ParameterError on beta_td <= 0, alpha_far < 0, ...
  nlohmann::json to_json() const;
  static AlignmentConfig from_json(const nlohmann::json& doc);
};

/// A stack of preference pairs in diffusion space.
struct PairBatch {
  torch::Tensor condition;  // [B, T', H, W]
  torch::Tensor y_win;      // [B, K, H, W], in [-1, 1]
  torch::Tensor y_lose;
  preference::Metric metric = preference::Metric::csi;

  int64_t size() const { return condition.size(0); }
};

PairBatch make_batch(std::span<const preference::PreferencePair> pairs, torch::Dtype dtype = torch::kFloat32);

// One shared step per pair, independent noise per branch.
struct NoiseDraws {
  torch::Tensor t;  // [B] int64 in [0, steps)
  torch::Tensor eps_w;
  torch::Tensor eps_l;
};

NoiseDraws draw_noise(const PairBatch& batch, const diffusion::DiffusionSchedule& sched, torch::Generator& gen);

struct LossBreakdown {
  torch::Tensor total;  // scalar, differentiable wrt the trainable policy
  torch::Tensor argument;  // [B] sigma-argument per pair (detached)
  double csi_term = 0.0;  // mean preference term, beta_td * A (or the DPO bracket)
  double far_preservation_term = 0.0;  // mean alpha * beta_td * B; 0 for DPO
  double implicit_accuracy = 0.0;  // fraction of positive arguments, ties count half
  double lambda_mean = 0.0;  // alpha_bar / (1 - alpha_bar) at the drawn steps
  double lambda_min = 0.0;
  double lambda_max = 0.0;
};

// Per-row mean squared denoising error of `model` on one branch. Epsilon models use
// the forward process; velocity models use the flow interpolant at s = t / steps.
torch::Tensor branch_error(DenoiserModule& model, const torch::Tensor& y0, const torch::Tensor& condition,
                           const diffusion::DiffusionSchedule& sched, const torch::Tensor& t, const torch::Tensor& eps);

LossBreakdown dpo_loss_at(DenoiserModule& theta, DenoiserModule& ref, const PairBatch& batch,
                          const diffusion::DiffusionSchedule& sched, const AlignmentConfig& cfg,
                          const NoiseDraws& draws);
LossBreakdown dpo_loss(DenoiserModule& theta, DenoiserModule& ref, const PairBatch& batch,
                       const diffusion::DiffusionSchedule& sched, const AlignmentConfig& cfg, torch::Generator& gen);

// Throws ConfigError unless batch.metric is CSI.
LossBreakdown spo_loss_at(DenoiserModule& pi_beta, DenoiserModule& pi_alpha, DenoiserModule& pi0,
                          const PairBatch& batch, const diffusion::DiffusionSchedule& sched, const AlignmentConfig& cfg,
                          const NoiseDraws& draws);
LossBreakdown spo_loss(DenoiserModule& pi_beta, DenoiserModule& pi_alpha, DenoiserModule& pi0, const PairBatch& batch,
                       const diffusion::DiffusionSchedule& sched, const AlignmentConfig& cfg, torch::Generator& gen);

// Checkpoint-level variant: also checks role markers (ConfigError on mismatch).
LossBreakdown spo_loss(PolicyCheckpoint& pi_beta, const PolicyCheckpoint& pi_alpha, const PolicyCheckpoint& pi0,
                       const PairBatch& batch, const diffusion::DiffusionSchedule& sched, const AlignmentConfig& cfg,
                       torch::Generator& gen);

enum class Stage { far_align, csi_align };
std::string_view to_string(Stage stage);
Stage parse_stage(std::string_view name);

struct PolicyTriple {
  PolicyCheckpoint pi0;
  std::optional<PolicyCheckpoint> pi_alpha;
  std::optional<PolicyCheckpoint> pi_beta;  // initial pi_beta; defaults to a copy of pi_alpha
};

/// far_align trains a copy of pi0 on FAR pairs with dpo_loss(ref = pi0).
/// csi_align trains pi_beta (initialized from pi_alpha) on CSI pairs with spo_loss.
/// Frozen policies are never modified. When `log_path` is set, one JSON line per
/// step is appended with the loss breakdown.
PolicyCheckpoint run_stage(Stage stage, const PolicyTriple& triple, const preference::PairArchive& archive,
                           const AlignmentConfig& cfg, const diffusion::DiffusionSchedule& sched,
                           const std::optional<std::filesystem::path>& log_path = std::nullopt);

}  // namespace syncast::alignment
