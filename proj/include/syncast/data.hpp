#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <torch/torch.h>

namespace syncast::data {

namespace fs = std::filesystem;

/// A [T, 1, H, W] float32 stack of echo intensities normalized to [0, 1].
///
/// Invariants are checked on construction: finite values within [0, 1],
/// one channel, at least two frames.
class RadarSequence {
 public:
  explicit RadarSequence(torch::Tensor frames, int interval_minutes = 10,
                         std::optional<std::string> origin_time = std::nullopt);

  const torch::Tensor& frames() const noexcept { return frames_; }
  int64_t length() const noexcept { return frames_.size(0); }
  int64_t height() const noexcept { return frames_.size(2); }
  int64_t width() const noexcept { return frames_.size(3); }
  int interval_minutes() const noexcept { return interval_minutes_; }
  const std::optional<std::string>& origin_time() const noexcept { return origin_time_; }

  // Frames [begin, end) as a new sequence; needs at least one frame (the T >= 2
  // invariant is not applied to slices used as context or target).
  RadarSequence slice(int64_t begin, int64_t end) const;

 private:
  struct Unchecked {};
  RadarSequence(Unchecked, torch::Tensor frames, int interval_minutes, std::optional<std::string> origin_time);

  torch::Tensor frames_;
  int interval_minutes_;
  std::optional<std::string> origin_time_;
};

RadarSequence concatenate(const RadarSequence& head, const RadarSequence& tail);

// Context is the first `context_len` frames, target the rest.
std::pair<RadarSequence, RadarSequence> split_context_target(const RadarSequence& seq, int64_t context_len);

enum class Split { train, val, test };
std::string_view to_string(Split split);
Split parse_split(std::string_view name);

struct EventRecord {
  RadarSequence sequence;
  std::string event_id;
  Split split;
};

struct EventRef {
  std::string event_id;
  Split split;
  fs::path dir;  // relative to the archive root
};

struct DatasetManifest {
  std::vector<EventRef> events;
  int64_t context_len = 4;
  int64_t horizon = 8;
  double value_scale = 1.0;  // physical units per unit of normalized intensity

  // Throws ParameterError when context_len + horizon exceeds min_event_length or value_scale <= 0.
  void validate(int64_t min_event_length) const;
};

// --- synthetic advection events -------------------------------------------

struct GridSize {
  int64_t height = 32;
  int64_t width = 32;
};

struct AdvectionConfig {
  double min_speed = 0.6;  // pixels per frame
  double max_speed = 1.6;
  double min_radius = 0.08;  // fraction of min(H, W)
  double max_radius = 0.16;
  double min_peak = 0.55;
  double max_peak = 1.0;
  double growth_sd = 0.05;        // per-frame log growth rate spread
  double velocity_jitter = 0.12;  // random-walk step on velocity, pixels per frame
  double intensity_noise = 0.06;  // per-frame log amplitude noise
  double floor = 0.02;            // values below are set to zero
};

RadarSequence generate_synthetic_event(uint64_t seed, GridSize grid, int64_t n_frames, int64_t n_cells,
                                       const AdvectionConfig& params = {});

struct SyntheticDatasetConfig {
  uint64_t seed = 0;
  int64_t n_train = 400;
  int64_t n_val = 20;
  int64_t n_test = 100;
  GridSize grid{};
  int64_t context_len = 4;
  int64_t horizon = 8;
  int64_t min_cells = 1;
  int64_t max_cells = 3;
  int interval_minutes = 10;
  double value_scale = 1.0;
  AdvectionConfig advection{};
};

// Events in generation order: train, then val, then test. Event i is generated from mix_seed(seed, i).
std::vector<EventRecord> generate_synthetic_dataset(const SyntheticDatasetConfig& cfg);

// --- archive layout -----------------------------------------------------------
//
//   <root>/manifest.json
//   <root>/events/<event_id>/frames.bin   float32 LE, [T, C, H, W]
//   <root>/events/<event_id>/meta.json    shape, interval_minutes, event_id, value_scale

struct CropWindow {
  int64_t top = 0;
  int64_t left = 0;
  int64_t height = 0;
  int64_t width = 0;
};

struct ArchiveOptions {
  std::optional<CropWindow> crop;  // applied before downscaling; identity when absent
  int64_t downscale = 1;           // area-average pooling factor
};

// Writes events (values multiplied by value_scale) plus the manifest. Returns the manifest written.
DatasetManifest write_archive(const fs::path& root, const std::vector<EventRecord>& events, int64_t context_len,
                              int64_t horizon, double value_scale);

/// Read-only handle over an archive. Metadata is validated on open; frames are
/// read on demand, so concurrent `load` calls from several threads are safe.
class Archive {
 public:
  Archive(fs::path root, DatasetManifest manifest, ArchiveOptions options = {});

  const fs::path& root() const noexcept { return root_; }
  const DatasetManifest& manifest() const noexcept { return manifest_; }
  std::size_t size() const noexcept { return manifest_.events.size(); }
  std::vector<EventRef> events(Split split) const;

  EventRecord load(const EventRef& ref) const;
  // Loads a whole split with up to SYNCAST_NUM_WORKERS threads (default 1); order is preserved.
  std::vector<EventRecord> load_split(Split split) const;

 private:
  fs::path root_;
  DatasetManifest manifest_;
  ArchiveOptions options_;
};

DatasetManifest read_manifest(const fs::path& root);
Archive ingest_archive(const fs::path& root, const ArchiveOptions& options = {});
Archive ingest_archive(const fs::path& root, DatasetManifest manifest, const ArchiveOptions& options = {});

// Non-overlapping k x k area averaging of the two trailing dims; requires divisibility.
torch::Tensor area_downscale(const torch::Tensor& frames, int64_t factor);

int num_workers_from_env();

}  // namespace syncast::data
