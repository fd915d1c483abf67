#pragma once

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include <torch/torch.h>

#include "syncast/model.hpp"

namespace syncast::diffusion {

enum class ScheduleKind { linear, cosine };
ScheduleKind parse_schedule_kind(std::string_view name);
std::string_view to_string(ScheduleKind kind);

/// Noise-schedule constants indexed by zero-based step t in [0, steps).
/// alpha_bar[t] = prod_{s <= t} (1 - beta[s]); sigma[t] = sqrt(beta[t]).
struct DiffusionSchedule {
  int64_t steps = 0;
  std::vector<double> beta;
  std::vector<double> alpha_bar;
  std::vector<double> sigma;

  // Signal-to-noise ratio alpha_bar / (1 - alpha_bar).
  double snr(int64_t t) const { return alpha_bar.at(t) / (1.0 - alpha_bar.at(t)); }
};

DiffusionSchedule make_schedule(int64_t steps, ScheduleKind kind = ScheduleKind::linear, double beta_min = 1e-4,
                                double beta_max = 2e-2);

struct NoisySample {
  torch::Tensor y_t;
  torch::Tensor t;  // [B] int64
  torch::Tensor eps;
};

// y_t = sqrt(alpha_bar_t) * y0 + sqrt(1 - alpha_bar_t) * eps, per batch row.
NoisySample forward_noise(const torch::Tensor& y0, const torch::Tensor& t, const torch::Tensor& eps,
                          const DiffusionSchedule& sched);
NoisySample forward_noise(const torch::Tensor& y0, int64_t t, const torch::Tensor& eps, const DiffusionSchedule& sched);

// Normalized intensities [0, 1] <-> diffusion space [-1, 1].
torch::Tensor to_model_space(const torch::Tensor& y);
torch::Tensor from_model_space(const torch::Tensor& x);

// Draws t ~ U{0..steps-1} per row.
torch::Tensor sample_steps(int64_t batch, const DiffusionSchedule& sched, torch::Generator& gen);

// ||eps - eps_theta(y_t, t, context)||^2, mean over elements, for explicit (t, eps).
torch::Tensor ddpm_loss_at(DenoiserModule& model, const torch::Tensor& y0, const torch::Tensor& context,
                           const DiffusionSchedule& sched, const torch::Tensor& t, const torch::Tensor& eps);
// Same with t uniform over steps and eps ~ N(0, I) drawn from `gen`.
torch::Tensor ddpm_loss(DenoiserModule& model, const torch::Tensor& y0, const torch::Tensor& context,
                        const DiffusionSchedule& sched, torch::Generator& gen);

// Flow matching on x_t = (1 - t) eps + t y0 with target velocity y0 - eps.
torch::Tensor flow_match_loss_at(DenoiserModule& model, const torch::Tensor& y0, const torch::Tensor& context,
                                 const torch::Tensor& t, const torch::Tensor& eps);
torch::Tensor flow_match_loss(DenoiserModule& model, const torch::Tensor& y0, const torch::Tensor& context,
                              torch::Generator& gen);

enum class Sampler { ddpm, ddim, euler_flow };
Sampler parse_sampler(std::string_view name);
std::string_view to_string(Sampler sampler);

struct TrajectoryConfig {
  Sampler sampler = Sampler::ddim;
  int64_t n_steps = 20;  // ignored by ddpm, which walks the full chain
  double eta = 0.0;      // ddim stochasticity; 1 matches the ddpm posterior variance
  uint64_t seed = 0;
  bool clip_denoised = true;  // ddim: clamp the predicted clean sample to [-1, 1]
};

/// Every sampler starts from y ~ N(0, I) of shape [B, target_frames, H, W] and
/// returns the final state in diffusion space. Row b draws all of its noise from
/// a generator seeded with row_seeds[b] (default mix_seed(config.seed, b)), so a
/// row's trajectory does not depend on the other rows.
torch::Tensor ddpm_sample(DenoiserModule& model, const torch::Tensor& context, int64_t target_frames,
                          const DiffusionSchedule& sched, const TrajectoryConfig& config,
                          std::span<const uint64_t> row_seeds = {});
torch::Tensor ddim_sample(DenoiserModule& model, const torch::Tensor& context, int64_t target_frames,
                          const DiffusionSchedule& sched, const TrajectoryConfig& config,
                          std::span<const uint64_t> row_seeds = {});
torch::Tensor euler_flow_sample(DenoiserModule& model, const torch::Tensor& context, int64_t target_frames,
                                int64_t n_steps, uint64_t seed, std::span<const uint64_t> row_seeds = {});

// Dispatches on config.sampler.
torch::Tensor sample(DenoiserModule& model, const torch::Tensor& context, int64_t target_frames,
                     const DiffusionSchedule& sched, const TrajectoryConfig& config,
                     std::span<const uint64_t> row_seeds = {});

// The evenly strided sub-schedule used by ddim, ascending.
std::vector<int64_t> ddim_timesteps(int64_t total_steps, int64_t n_steps);

}  // namespace syncast::diffusion
