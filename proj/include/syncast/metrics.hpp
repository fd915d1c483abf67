#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include <torch/torch.h>
#include <json.hpp>

namespace syncast::metrics {

struct ContingencyCounts {
  int64_t hits = 0;
  int64_t misses = 0;
  int64_t false_alarms = 0;
  int64_t correct_negatives = 0;

  int64_t total() const noexcept { return hits + misses + false_alarms + correct_negatives; }
  ContingencyCounts& operator+=(const ContingencyCounts& o) noexcept {
    hits += o.hits;
    misses += o.misses;
    false_alarms += o.false_alarms;
    correct_negatives += o.correct_negatives;
    return *this;
  }
  bool operator==(const ContingencyCounts&) const = default;
};

// Strictly ascending thresholds in (0, 1), in normalized intensity units.
class ThresholdSet {
 public:
  explicit ThresholdSet(std::vector<double> thresholds);

  const std::vector<double>& values() const noexcept { return values_; }
  std::size_t size() const noexcept { return values_.size(); }

  // VIL levels {16, 74, 133, 160, 181, 219} on the 0-255 scale, divided by 255.
  static ThresholdSet sevir();
  // {0.2, 0.4, 0.6}, sized to the synthetic generator's intensity range.
  static ThresholdSet synthetic();

 private:
  std::vector<double> values_;
};

// Elementwise field >= threshold, compared in double precision.
torch::Tensor binarize(const torch::Tensor& field, double threshold);
ContingencyCounts contingency(const torch::Tensor& pred, const torch::Tensor& obs);
// Thresholds `pred` and `obs` directly, without materializing the boolean grids.
ContingencyCounts contingency(const torch::Tensor& pred, const torch::Tensor& obs, double threshold);

// Undefined (nullopt) when the denominator vanishes.
std::optional<double> csi(const ContingencyCounts& c);
std::optional<double> far(const ContingencyCounts& c);
std::optional<double> hss(const ContingencyCounts& c);

// Mean over the defined entries; nullopt if none is defined.
std::optional<double> mean_defined(std::span<const std::optional<double>> values);

// Non-overlapping k x k mean pooling over the two trailing dims. Grids not
// divisible by k are reflect-padded (edge not repeated) up to the next multiple.
torch::Tensor pool(const torch::Tensor& field, int64_t k);

enum class CrpsDivisor {
  m_squared,        // plain empirical-CDF form
  m_times_m_minus1  // "fair" ensemble form
};

// Ensemble CRPS averaged over every element of `obs`.
double crps(std::span<const torch::Tensor> ensemble, const torch::Tensor& obs,
            CrpsDivisor divisor = CrpsDivisor::m_squared);

struct CategoricalScores {
  std::optional<double> csi;
  std::optional<double> far;
  std::optional<double> hss;
};

struct LeadTimeScores {
  std::optional<double> csi_m;
  std::optional<double> far_m;
  std::optional<double> hss;
};

struct ScoreReport {
  std::vector<double> thresholds;
  // pool size -> scores per threshold (same order as `thresholds`); pool 1 is the native grid.
  std::map<int64_t, std::vector<CategoricalScores>> pooled;
  std::map<int64_t, std::optional<double>> csi_m_pooled;
  std::optional<double> csi_m;
  std::optional<double> far_m;
  std::optional<double> hss;
  std::optional<double> crps;
  std::vector<LeadTimeScores> per_lead_time;
  int64_t n_events = 0;

  const std::vector<CategoricalScores>& per_threshold() const { return pooled.at(1); }

  nlohmann::json to_json() const;
  static ScoreReport from_json(const nlohmann::json& doc);
};

/// Micro-averaging score accumulator: contingency counts are summed over all
/// frames and events, ratios are taken at the end. Categorical scores use the
/// first ensemble member; CRPS uses all of them.
class ScoreAccumulator {
 public:
  explicit ScoreAccumulator(ThresholdSet thresholds, std::vector<int64_t> pool_sizes = {1, 4, 16});

  // members: >= 1 forecasts shaped like obs, [T, H, W] or [T, 1, H, W].
  void add(std::span<const torch::Tensor> members, const torch::Tensor& obs);
  ScoreReport report() const;

  // counts[pool index][threshold index]
  const std::vector<std::vector<ContingencyCounts>>& counts() const noexcept { return counts_; }

 private:
  ThresholdSet thresholds_;
  std::vector<int64_t> pool_sizes_;
  std::vector<std::vector<ContingencyCounts>> counts_;
  std::vector<std::vector<ContingencyCounts>> lead_counts_;  // native grid, [lead][threshold]
  double crps_sum_ = 0.0;
  int64_t crps_events_ = 0;
  int64_t n_events_ = 0;
};

struct EventForecast {
  std::vector<torch::Tensor> members;
  torch::Tensor obs;
};

ScoreReport score_sequences(std::span<const EventForecast> events, const ThresholdSet& thresholds,
                            std::vector<int64_t> pool_sizes = {1, 4, 16});

// CSI-M / FAR-M / HSS-M of a single frame pair at the native resolution.
LeadTimeScores score_frame(const torch::Tensor& pred, const torch::Tensor& obs, const ThresholdSet& thresholds);

}  // namespace syncast::metrics
