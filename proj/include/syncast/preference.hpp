#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include <torch/torch.h>
#include <json.hpp>

#include "syncast/data.hpp"
#include "syncast/diffusion.hpp"
#include "syncast/metrics.hpp"
#include "syncast/model.hpp"

namespace syncast::preference {

enum class Metric { far, csi };
enum class Strategy { frame_level, whole_sample, dual_metric };

std::string_view to_string(Metric metric);
std::string_view to_string(Strategy strategy);
Metric parse_metric(std::string_view name);
Strategy parse_strategy(std::string_view name);

/// N sampled forecasts plus their element-wise mean as candidate N.
/// Tensors are [K, H, W] in normalized intensity units.
struct CandidateSet {
  torch::Tensor condition;  // [T', H, W]
  std::vector<torch::Tensor> candidates;
  std::vector<uint64_t> seeds;

  std::size_t n_sampled() const noexcept { return seeds.size(); }
};

// Candidate i is sampled with row seed seeds[i]; default seeds are mix_seed(config.seed, i).
CandidateSet generate_candidates(DenoiserModule& model, const diffusion::DiffusionSchedule& sched,
                                 const torch::Tensor& condition, int64_t target_frames, int64_t n,
                                 const diffusion::TrajectoryConfig& config, std::span<const uint64_t> seeds = {});

// Several conditions at once ([E, T', H, W]); seeds[e] holds the N seeds of event e.
std::vector<CandidateSet> generate_candidates_batched(DenoiserModule& model, const diffusion::DiffusionSchedule& sched,
                                                      const torch::Tensor& conditions, int64_t target_frames,
                                                      const std::vector<std::vector<uint64_t>>& seeds,
                                                      const diffusion::TrajectoryConfig& config);

// scores[i][k]: CSI-M / FAR-M of candidate i at lead time k.
struct FrameScoreTable {
  std::vector<std::vector<metrics::LeadTimeScores>> scores;

  std::size_t n_candidates() const noexcept { return scores.size(); }
  std::size_t n_frames() const noexcept { return scores.empty() ? 0 : scores.front().size(); }
  std::optional<double> value(std::size_t candidate, std::size_t frame, Metric metric) const;
};

FrameScoreTable score_frames(const CandidateSet& cands, const torch::Tensor& target,
                             const metrics::ThresholdSet& thresholds);

struct PreferencePair {
  std::string event_id;
  torch::Tensor condition;  // [T', H, W]
  torch::Tensor y_win;      // [K, H, W]
  torch::Tensor y_lose;
  Metric metric = Metric::csi;
  Strategy strategy = Strategy::frame_level;
  std::vector<int64_t> win_index;   // per frame: candidate the win frame came from
  std::vector<int64_t> lose_index;  // per frame: candidate the lose frame came from
  std::vector<bool> neutral;        // per frame: no candidate had a defined score
  std::vector<uint64_t> seeds;
};

// Lead-time-wise best/worst frames. Ties go to the lowest candidate index.
// nullopt when win and lose coincide on every frame.
std::optional<PreferencePair> assemble_frame_level(const CandidateSet& cands, const FrameScoreTable& table,
                                                   Metric metric);

// Sequence-level (counts aggregated over frames) CSI-M / FAR-M of each candidate.
std::vector<metrics::LeadTimeScores> score_sequences_per_candidate(const CandidateSet& cands,
                                                                   const torch::Tensor& target,
                                                                   const metrics::ThresholdSet& thresholds);

std::optional<PreferencePair> assemble_whole_sample(const CandidateSet& cands, const torch::Tensor& target,
                                                    const metrics::ThresholdSet& thresholds, Metric metric);

// Win: in the top two of both the CSI and the FAR ranking; lose: in the bottom two of both.
std::optional<PreferencePair> assemble_dual_metric(const CandidateSet& cands, const torch::Tensor& target,
                                                   const metrics::ThresholdSet& thresholds);

// Ranking of candidates best-first under `metric`; undefined scores rank last, ties by index.
std::vector<std::size_t> rank_candidates(std::span<const metrics::LeadTimeScores> scores, Metric metric);

// --- pair archive -------------------------------------------------------------
//
//   <root>/pairs.json                      index: strategy, seeds, shapes, events
//   <root>/<event_id>/condition.bin        float32 LE [T', H, W]
//   <root>/<event_id>/pair_far/{win.bin, lose.bin, pair_meta.json}
//   <root>/<event_id>/pair_csi/{win.bin, lose.bin, pair_meta.json}

struct BuildOptions {
  int64_t n_candidates = 4;
  Strategy strategy = Strategy::frame_level;
  diffusion::TrajectoryConfig sampler{};
  int64_t events_per_batch = 8;
  int64_t max_events = 0;  // 0: all
};

struct BuildSummary {
  int64_t n_events = 0;
  int64_t n_far_pairs = 0;
  int64_t n_csi_pairs = 0;
  int64_t n_skipped = 0;
  double mean_csi_gap = 0.0;  // mean CSI-M(win) - CSI-M(lose) over CSI pairs (sequence level)
  double mean_far_gap = 0.0;  // mean FAR-M(lose) - FAR-M(win) over FAR pairs
};

BuildSummary build_preference_dataset(DenoiserModule& model, const diffusion::DiffusionSchedule& sched,
                                      std::span<const data::EventRecord> events, int64_t context_len,
                                      const metrics::ThresholdSet& thresholds, const BuildOptions& options,
                                      const std::filesystem::path& out_dir);

struct PairArchive {
  nlohmann::json index;
  std::vector<PreferencePair> far_pairs;
  std::vector<PreferencePair> csi_pairs;
};

PairArchive load_pair_archive(const std::filesystem::path& root);

}  // namespace syncast::preference
