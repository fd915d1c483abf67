#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "syncast/alignment.hpp"
#include "syncast/checkpoint.hpp"
#include "syncast/data.hpp"
#include "syncast/denoiser.hpp"
#include "syncast/diffusion.hpp"
#include "syncast/metrics.hpp"
#include "syncast/preference.hpp"

namespace syncast::harness {

namespace fs = std::filesystem;

struct TrainConfig {
  int64_t steps = 2000;
  int64_t batch_size = 8;
  double lr = 1e-4;
  double ema_decay = 0.0;  // 0 disables the EMA copy
  int64_t log_every = 50;
  int64_t checkpoint_every = 500;
  int64_t val_every = 500;  // 0 disables validation
  int64_t val_events = 20;
  int64_t val_members = 2;
  bool use_best = false;  // hand the best-validation checkpoint to later stages
};

struct EvalConfig {
  int64_t ensemble = 4;
  uint64_t seed = 20240917;
  int64_t max_events = 0;  // 0: the whole split
  int64_t events_per_batch = 8;
  std::vector<int64_t> pools{1, 4, 16};
  data::Split split = data::Split::test;
};

/// The run configuration: one JSON document with sections
/// data, model, schedule, train, sampler, preference, alignment, evaluation,
/// plus the top-level seed and output_dir. Missing keys take defaults.
class RunConfig {
 public:
  RunConfig();  // all defaults
  static RunConfig from_json(const nlohmann::json& doc);
  static RunConfig load(const fs::path& path);

  const nlohmann::json& doc() const noexcept { return doc_; }

  // Overrides one leaf by its dotted name ("train.steps"); `value` is parsed as
  // JSON when possible, otherwise taken as a string. Unknown keys raise ConfigError.
  void set(const std::string& dotted, const std::string& value);
  // Every leaf of the default document, in dotted form.
  static std::vector<std::string> dotted_keys();

  // Builds every typed view; ConfigError on the first invalid field.
  void validate() const;

  uint64_t seed() const;
  fs::path output_dir() const;
  // Existing archive to use instead of generating one; empty when synthetic.
  fs::path data_archive() const;

  data::SyntheticDatasetConfig data() const;
  metrics::ThresholdSet thresholds() const;
  denoiser::DenoiserConfig model() const;
  diffusion::DiffusionSchedule schedule() const;
  TrainConfig train() const;
  diffusion::TrajectoryConfig sampler() const;
  preference::BuildOptions preference() const;
  alignment::AlignmentConfig alignment(alignment::Stage stage) const;
  EvalConfig evaluation() const;

  // Stream seeds derived from the top-level seed.
  uint64_t init_seed() const;
  uint64_t train_seed() const;

 private:
  nlohmann::json doc_;
};

nlohmann::json default_config();

// Fixed file names inside an output directory.
struct RunLayout {
  fs::path root;

  fs::path data() const { return root / "data"; }
  fs::path base_dir() const { return root / "base"; }
  fs::path pi0() const { return root / "pi0.ckpt"; }
  fs::path prefs() const { return root / "prefs"; }
  fs::path pi_alpha() const { return root / "pi_alpha.ckpt"; }
  fs::path pi_beta() const { return root / "pi_beta.ckpt"; }
  fs::path logs() const { return root / "logs"; }
  fs::path report(PolicyRole role) const { return root / ("report_" + std::string(to_string(role)) + ".json"); }
  fs::path summary() const { return root / "summary.json"; }
};

// Generates the synthetic archive described by cfg under `root` (or returns the configured archive).
data::Archive prepare_data(const RunConfig& cfg, const fs::path& root);

struct TrainResult {
  PolicyCheckpoint checkpoint;
  std::vector<double> losses;  // one per step run in this call
  std::optional<double> best_val_crps;
  int64_t start_step = 0;
};

/// Base-model training. `state_dir` holds model.ckpt, optimizer.pt, state.json
/// (and ema.ckpt, best.ckpt); when it already contains a state, training resumes
/// from it. Step s draws its batch and noise from a generator seeded by
/// mix_seed(train_seed, s), so a resumed run repeats the uninterrupted one.
/// A non-finite loss raises NumericError; model.ckpt then still holds the last
/// good checkpoint.
TrainResult train_base(const RunConfig& cfg, const data::Archive& archive, const fs::path& state_dir);

// Sampler suited to the model's prediction type (euler_flow for velocity models).
diffusion::TrajectoryConfig resolve_sampler(const DenoiserModule& model, diffusion::TrajectoryConfig config);

/// Scores a policy on `events`: E members per event, member m of event i sampled
/// with seed mix_seed(mix_seed(eval.seed, i), m). CSI/FAR/HSS use member 0.
metrics::ScoreReport evaluate(DenoiserModule& model, std::span<const data::EventRecord> events, int64_t context_len,
                              const diffusion::DiffusionSchedule& sched, const diffusion::TrajectoryConfig& sampler,
                              const metrics::ThresholdSet& thresholds, const EvalConfig& eval);

preference::BuildSummary build_prefs(const RunConfig& cfg, const PolicyCheckpoint& pi0, const data::Archive& archive,
                                     const fs::path& out_dir);

struct PipelineSummary {
  nlohmann::json doc;  // also written to summary.json
  std::vector<fs::path> artifacts;
};

/// gen-data, train-base, build-prefs, align-far, align-csi, evaluate. Holds the
/// output directory lock throughout. A failing stage raises StageError.
PipelineSummary run_pipeline(const RunConfig& cfg);

// Three-row comparison table from per-policy reports.
nlohmann::json summary_rows(const std::vector<std::pair<PolicyRole, metrics::ScoreReport>>& reports);

}  // namespace syncast::harness
