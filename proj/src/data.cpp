#include "syncast/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <future>
#include <numbers>
#include <random>
#include <set>

#include "syncast/errors.hpp"
#include "syncast/io.hpp"
#include "syncast/rng.hpp"

namespace syncast::data {

namespace {

void check_frames(const torch::Tensor& frames, int64_t min_frames) {
  if (!frames.defined() || frames.dim() != 4) throw ParameterError("radar frames must be a [T, C, H, W] tensor");
  if (frames.size(1) != 1) throw ParameterError("radar frames must have exactly one channel");
  if (frames.size(0) < min_frames) {
    throw ParameterError("radar sequence needs at least " + std::to_string(min_frames) + " frames, got " +
                         std::to_string(frames.size(0)));
  }
  if (!torch::isfinite(frames).all().item<bool>()) throw DataError("radar frames contain non-finite values");
  if (frames.numel() > 0 && (frames.min().item<float>() < 0.0F || frames.max().item<float>() > 1.0F)) {
    throw DataError("radar frames must lie within [0, 1]");
  }
}

}  // namespace

RadarSequence::RadarSequence(torch::Tensor frames, int interval_minutes, std::optional<std::string> origin_time)
    : frames_(frames.to(torch::kFloat32).contiguous()),
      interval_minutes_(interval_minutes),
      origin_time_(std::move(origin_time)) {
  check_frames(frames_, 2);
  if (interval_minutes_ <= 0) throw ParameterError("interval_minutes must be positive");
}

RadarSequence::RadarSequence(Unchecked, torch::Tensor frames, int interval_minutes,
                             std::optional<std::string> origin_time)
    : frames_(std::move(frames)), interval_minutes_(interval_minutes), origin_time_(std::move(origin_time)) {}

RadarSequence RadarSequence::slice(int64_t begin, int64_t end) const {
  if (begin < 0 || end > length() || begin >= end) throw ParameterError("invalid frame slice");
  return RadarSequence(Unchecked{}, frames_.slice(0, begin, end).contiguous(), interval_minutes_, origin_time_);
}

RadarSequence concatenate(const RadarSequence& head, const RadarSequence& tail) {
  if (head.height() != tail.height() || head.width() != tail.width()) {
    throw ParameterError("cannot concatenate sequences with different grids");
  }
  return RadarSequence(torch::cat({head.frames(), tail.frames()}, 0), head.interval_minutes(), head.origin_time());
}

std::pair<RadarSequence, RadarSequence> split_context_target(const RadarSequence& seq, int64_t context_len) {
  if (context_len <= 0 || context_len >= seq.length()) {
    throw ParameterError("context_len must be in (0, " + std::to_string(seq.length()) + "), got " +
                         std::to_string(context_len));
  }
  return {seq.slice(0, context_len), seq.slice(context_len, seq.length())};
}

std::string_view to_string(Split split) {
  switch (split) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "train";
}

Split parse_split(std::string_view name) {
  if (name == "train") return Split::train;
  if (name == "val") return Split::val;
  if (name == "test") return Split::test;
  throw FormatError("unknown split '" + std::string(name) + "'");
}

void DatasetManifest::validate(int64_t min_event_length) const {
  if (context_len <= 0 || horizon <= 0) throw ParameterError("context_len and horizon must be positive");
  if (context_len + horizon > min_event_length) {
    throw ParameterError("context_len + horizon (" + std::to_string(context_len + horizon) +
                         ") exceeds the shortest event (" + std::to_string(min_event_length) + ")");
  }
  if (!(value_scale > 0.0)) throw ParameterError("value_scale must be positive");
}

// --- synthetic generator ------------------------------------------------------

RadarSequence generate_synthetic_event(uint64_t seed, GridSize grid, int64_t n_frames, int64_t n_cells,
                                       const AdvectionConfig& params) {
  if (grid.height < 16 || grid.width < 16) throw ParameterError("synthetic grid must be at least 16x16");
  if (n_frames < 4) throw ParameterError("synthetic events need at least 4 frames");
  if (n_cells < 1) throw ParameterError("synthetic events need at least one cell");

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };

  struct Cell {
    double cy, cx, vy, vx, ry, rx, peak, growth;
  };
  const double size = static_cast<double>(std::min(grid.height, grid.width));
  std::vector<Cell> cells;
  cells.reserve(static_cast<std::size_t>(n_cells));
  for (int64_t c = 0; c < n_cells; ++c) {
    Cell cell{};
    cell.cy = uniform(0.25, 0.75) * static_cast<double>(grid.height);
    cell.cx = uniform(0.25, 0.75) * static_cast<double>(grid.width);
    const double speed = uniform(params.min_speed, params.max_speed);
    const double heading = uniform(0.0, 2.0 * std::numbers::pi);
    cell.vy = speed * std::sin(heading);
    cell.vx = speed * std::cos(heading);
    const double radius = uniform(params.min_radius, params.max_radius) * size;
    const double aspect = uniform(0.7, 1.4);
    cell.ry = radius * std::sqrt(aspect);
    cell.rx = radius / std::sqrt(aspect);
    cell.peak = uniform(params.min_peak, params.max_peak);
    cell.growth = params.growth_sd * normal(rng);
    cells.push_back(cell);
  }

  auto frames = torch::zeros({n_frames, 1, grid.height, grid.width}, torch::kFloat32);
  auto acc = frames.accessor<float, 4>();
  for (int64_t t = 0; t < n_frames; ++t) {
    for (const auto& cell : cells) {
      for (int64_t y = 0; y < grid.height; ++y) {
        const double dy = (static_cast<double>(y) - cell.cy) / cell.ry;
        for (int64_t x = 0; x < grid.width; ++x) {
          const double dx = (static_cast<double>(x) - cell.cx) / cell.rx;
          acc[t][0][y][x] += static_cast<float>(cell.peak * std::exp(-0.5 * (dx * dx + dy * dy)));
        }
      }
    }
    for (auto& cell : cells) {
      cell.vy += params.velocity_jitter * normal(rng);
      cell.vx += params.velocity_jitter * normal(rng);
      cell.cy += cell.vy;
      cell.cx += cell.vx;
      cell.peak = std::clamp(cell.peak * std::exp(cell.growth + params.intensity_noise * normal(rng)), 0.0, 1.2);
    }
  }
  frames.clamp_(0.0, 1.0);
  frames.masked_fill_(frames < params.floor, 0.0);
  return RadarSequence(frames);
}

std::vector<EventRecord> generate_synthetic_dataset(const SyntheticDatasetConfig& cfg) {
  if (cfg.min_cells < 1 || cfg.max_cells < cfg.min_cells) throw ParameterError("invalid cell count range");
  if (cfg.n_train < 0 || cfg.n_val < 0 || cfg.n_test < 0) throw ParameterError("event counts must be non-negative");
  const int64_t n_frames = cfg.context_len + cfg.horizon;
  const int64_t total = cfg.n_train + cfg.n_val + cfg.n_test;
  std::vector<EventRecord> events;
  events.reserve(static_cast<std::size_t>(total));
  for (int64_t i = 0; i < total; ++i) {
    const uint64_t event_seed = mix_seed(cfg.seed, static_cast<uint64_t>(i));
    const int64_t n_cells = cfg.min_cells + static_cast<int64_t>(event_seed % static_cast<uint64_t>(
                                                                               cfg.max_cells - cfg.min_cells + 1));
    auto seq = generate_synthetic_event(event_seed, cfg.grid, n_frames, n_cells, cfg.advection);
    const Split split = i < cfg.n_train ? Split::train : (i < cfg.n_train + cfg.n_val ? Split::val : Split::test);
    char id[32];
    std::snprintf(id, sizeof(id), "syn%06lld", static_cast<long long>(i));
    events.push_back(EventRecord{RadarSequence(seq.frames(), cfg.interval_minutes), id, split});
  }
  return events;
}

// --- archive ------------------------------------------------------------------

DatasetManifest write_archive(const fs::path& root, const std::vector<EventRecord>& events, int64_t context_len,
                              int64_t horizon, double value_scale) {
  DatasetManifest manifest;
  manifest.context_len = context_len;
  manifest.horizon = horizon;
  manifest.value_scale = value_scale;
  int64_t min_len = std::numeric_limits<int64_t>::max();
  std::set<std::string> seen;
  for (const auto& e : events) {
    if (!seen.insert(e.event_id).second) throw ParameterError("duplicate event_id '" + e.event_id + "'");
    min_len = std::min(min_len, e.sequence.length());
  }
  if (!events.empty()) manifest.validate(min_len);

  io::json splits = {{"train", io::json::array()}, {"val", io::json::array()}, {"test", io::json::array()}};
  for (const auto& e : events) {
    const fs::path rel = fs::path("events") / e.event_id;
    fs::create_directories(root / rel);
    const auto& frames = e.sequence.frames();
    io::write_f32(root / rel / "frames.bin", frames * value_scale);
    io::json meta = {{"shape", frames.sizes().vec()},
                     {"interval_minutes", e.sequence.interval_minutes()},
                     {"event_id", e.event_id},
                     {"value_scale", value_scale}};
    if (e.sequence.origin_time()) meta["origin_time"] = *e.sequence.origin_time();
    io::write_json(root / rel / "meta.json", meta);
    splits[std::string(to_string(e.split))].push_back(rel.generic_string());
    manifest.events.push_back(EventRef{e.event_id, e.split, rel});
  }
  io::json doc = {{"format_version", 1},
                  {"context_len", context_len},
                  {"horizon", horizon},
                  {"value_scale", value_scale},
                  {"splits", splits}};
  io::write_json(root / "manifest.json", doc);
  return manifest;
}

namespace {

struct EventMeta {
  std::vector<int64_t> shape;
  int interval_minutes;
  std::string event_id;
  double value_scale;
  std::optional<std::string> origin_time;
};

EventMeta read_meta(const fs::path& dir) {
  const auto doc = io::read_json(dir / "meta.json");
  EventMeta meta;
  try {
    meta.shape = doc.at("shape").get<std::vector<int64_t>>();
    meta.interval_minutes = doc.at("interval_minutes").get<int>();
    meta.event_id = doc.at("event_id").get<std::string>();
    meta.value_scale = doc.at("value_scale").get<double>();
    if (doc.contains("origin_time")) meta.origin_time = doc.at("origin_time").get<std::string>();
  } catch (const io::json::exception& e) {
    throw FormatError((dir / "meta.json").string() + ": " + e.what());
  }
  if (meta.shape.size() != 4) throw FormatError((dir / "meta.json").string() + ": shape must have 4 entries");
  if (!(meta.value_scale > 0.0)) throw FormatError((dir / "meta.json").string() + ": value_scale must be positive");
  return meta;
}

}  // namespace

DatasetManifest read_manifest(const fs::path& root) {
  const auto doc = io::read_json(root / "manifest.json");
  DatasetManifest manifest;
  try {
    manifest.context_len = doc.at("context_len").get<int64_t>();
    manifest.horizon = doc.at("horizon").get<int64_t>();
    manifest.value_scale = doc.at("value_scale").get<double>();
    for (const auto& [name, dirs] : doc.at("splits").items()) {
      const Split split = parse_split(name);
      for (const auto& dir : dirs) manifest.events.push_back(EventRef{"", split, fs::path(dir.get<std::string>())});
    }
  } catch (const io::json::exception& e) {
    throw FormatError((root / "manifest.json").string() + ": " + e.what());
  }
  return manifest;
}

Archive::Archive(fs::path root, DatasetManifest manifest, ArchiveOptions options)
    : root_(std::move(root)), manifest_(std::move(manifest)), options_(options) {
  if (options_.downscale < 1) throw ParameterError("downscale factor must be >= 1");
  int64_t min_len = std::numeric_limits<int64_t>::max();
  std::set<std::string> seen;
  for (auto& ref : manifest_.events) {
    const auto meta = read_meta(root_ / ref.dir);
    if (!ref.event_id.empty() && ref.event_id != meta.event_id) {
      throw FormatError("manifest event_id '" + ref.event_id + "' disagrees with " + ref.dir.string());
    }
    ref.event_id = meta.event_id;
    if (!seen.insert(meta.event_id).second) throw FormatError("duplicate event_id '" + meta.event_id + "'");
    if (meta.shape[1] != 1) throw FormatError(meta.event_id + ": expected one channel");
    min_len = std::min(min_len, meta.shape[0]);
  }
  if (!manifest_.events.empty()) manifest_.validate(min_len);
}

std::vector<EventRef> Archive::events(Split split) const {
  std::vector<EventRef> out;
  for (const auto& ref : manifest_.events)
    if (ref.split == split) out.push_back(ref);
  return out;
}

EventRecord Archive::load(const EventRef& ref) const {
  const fs::path dir = root_ / ref.dir;
  const auto meta = read_meta(dir);
  auto raw = io::read_f32(dir / "frames.bin", meta.shape);
  if (!torch::isfinite(raw).all().item<bool>()) {
    throw DataError("event '" + meta.event_id + "' contains non-finite values");
  }
  auto frames = (raw.to(torch::kFloat64) / meta.value_scale).to(torch::kFloat32).clamp(0.0, 1.0);
  if (options_.crop) {
    const auto& c = *options_.crop;
    if (c.top < 0 || c.left < 0 || c.height <= 0 || c.width <= 0 || c.top + c.height > frames.size(2) ||
        c.left + c.width > frames.size(3)) {
      throw ParameterError("crop window exceeds the grid of event '" + meta.event_id + "'");
    }
    frames = frames.slice(2, c.top, c.top + c.height).slice(3, c.left, c.left + c.width);
  }
  if (options_.downscale > 1) frames = area_downscale(frames, options_.downscale);
  return EventRecord{RadarSequence(frames, meta.interval_minutes, meta.origin_time), meta.event_id, ref.split};
}

std::vector<EventRecord> Archive::load_split(Split split) const {
  const auto refs = events(split);
  const auto workers = static_cast<std::size_t>(std::max(1, num_workers_from_env()));
  std::vector<std::optional<EventRecord>> slots(refs.size());
  if (workers <= 1 || refs.size() <= 1) {
    for (std::size_t i = 0; i < refs.size(); ++i) slots[i] = load(refs[i]);
  } else {
    std::vector<std::future<void>> jobs;
    for (std::size_t w = 0; w < workers; ++w) {
      jobs.push_back(std::async(std::launch::async, [&, w] {
        for (std::size_t i = w; i < refs.size(); i += workers) slots[i] = load(refs[i]);
      }));
    }
    for (auto& j : jobs) j.get();
  }
  std::vector<EventRecord> out;
  out.reserve(slots.size());
  for (auto& s : slots) out.push_back(std::move(*s));
  return out;
}

Archive ingest_archive(const fs::path& root, const ArchiveOptions& options) {
  if (!fs::is_directory(root)) throw IoError("archive directory does not exist: " + root.string());
  return Archive(root, read_manifest(root), options);
}

Archive ingest_archive(const fs::path& root, DatasetManifest manifest, const ArchiveOptions& options) {
  if (!fs::is_directory(root)) throw IoError("archive directory does not exist: " + root.string());
  return Archive(root, std::move(manifest), options);
}

torch::Tensor area_downscale(const torch::Tensor& frames, int64_t factor) {
  if (factor == 1) return frames;
  const auto h = frames.size(-2);
  const auto w = frames.size(-1);
  if (h % factor != 0 || w % factor != 0) throw ParameterError("grid is not divisible by the downscale factor");
  auto sizes = frames.sizes().vec();
  sizes.pop_back();
  sizes.pop_back();
  auto blocks = sizes;
  blocks.insert(blocks.end(), {h / factor, factor, w / factor, factor});
  return frames.reshape(blocks).mean({-3, -1});
}

int num_workers_from_env() {
  if (const char* v = std::getenv("SYNCAST_NUM_WORKERS")) {
    const int n = std::atoi(v);
    if (n > 0) return n;
  }
  return 1;
}

}  // namespace syncast::data
