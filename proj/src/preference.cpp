#include "syncast/preference.hpp"

#include <algorithm>
#include <set>

#include "syncast/errors.hpp"
#include "syncast/io.hpp"
#include "syncast/rng.hpp"

namespace syncast::preference {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Larger is better under either metric.
std::optional<double> goodness(const metrics::LeadTimeScores& s, Metric metric) {
  if (metric == Metric::csi) return s.csi_m;
  if (s.far_m) return -*s.far_m;
  return std::nullopt;
}

metrics::LeadTimeScores sequence_scores(const torch::Tensor& pred, const torch::Tensor& target,
                                        const metrics::ThresholdSet& thresholds) {
  std::vector<std::optional<double>> c, f, h;
  for (double thr : thresholds.values()) {
    const auto counts = metrics::contingency(pred, target, thr);
    c.push_back(metrics::csi(counts));
    f.push_back(metrics::far(counts));
    h.push_back(metrics::hss(counts));
  }
  return {metrics::mean_defined(c), metrics::mean_defined(f), metrics::mean_defined(h)};
}

PreferencePair whole_pair(const CandidateSet& cands, std::size_t win, std::size_t lose, Metric metric,
                          Strategy strategy) {
  const auto frames = cands.candidates.front().size(0);
  PreferencePair pair;
  pair.condition = cands.condition;
  pair.y_win = cands.candidates[win];
  pair.y_lose = cands.candidates[lose];
  pair.metric = metric;
  pair.strategy = strategy;
  pair.win_index.assign(static_cast<std::size_t>(frames), static_cast<int64_t>(win));
  pair.lose_index.assign(static_cast<std::size_t>(frames), static_cast<int64_t>(lose));
  pair.neutral.assign(static_cast<std::size_t>(frames), false);
  pair.seeds = cands.seeds;
  return pair;
}

json opt_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

void write_pair(const fs::path& dir, const PreferencePair& pair, const json& extra) {
  fs::create_directories(dir);
  io::write_f32(dir / "win.bin", pair.y_win);
  io::write_f32(dir / "lose.bin", pair.y_lose);
  std::vector<int> neutral(pair.neutral.begin(), pair.neutral.end());
  json meta = {{"event_id", pair.event_id},
               {"metric", std::string(to_string(pair.metric))},
               {"strategy", std::string(to_string(pair.strategy))},
               {"seeds", pair.seeds},
               {"win_index", pair.win_index},
               {"lose_index", pair.lose_index},
               {"neutral", neutral},
               {"shape", pair.y_win.sizes().vec()}};
  meta.update(extra);
  io::write_json(dir / "pair_meta.json", meta);
}

PreferencePair read_pair(const fs::path& dir, const torch::Tensor& condition, const std::string& event_id) {
  const auto meta = io::read_json(dir / "pair_meta.json");
  PreferencePair pair;
  try {
    const auto shape = meta.at("shape").get<std::vector<int64_t>>();
    pair.event_id = event_id;
    pair.condition = condition;
    pair.y_win = io::read_f32(dir / "win.bin", shape);
    pair.y_lose = io::read_f32(dir / "lose.bin", shape);
    pair.metric = parse_metric(meta.at("metric").get<std::string>());
    pair.strategy = parse_strategy(meta.at("strategy").get<std::string>());
    pair.win_index = meta.at("win_index").get<std::vector<int64_t>>();
    pair.lose_index = meta.at("lose_index").get<std::vector<int64_t>>();
    for (int n : meta.at("neutral").get<std::vector<int>>()) pair.neutral.push_back(n != 0);
    pair.seeds = meta.at("seeds").get<std::vector<uint64_t>>();
  } catch (const json::exception& e) {
    throw FormatError((dir / "pair_meta.json").string() + ": " + e.what());
  }
  return pair;
}

}  // namespace

std::string_view to_string(Metric metric) { return metric == Metric::far ? "FAR" : "CSI"; }

std::string_view to_string(Strategy strategy) {
  switch (strategy) {
    case Strategy::frame_level: return "frame_level";
    case Strategy::whole_sample: return "whole_sample";
    case Strategy::dual_metric: return "dual_metric";
  }
  return "frame_level";
}

Metric parse_metric(std::string_view name) {
  if (name == "FAR" || name == "far") return Metric::far;
  if (name == "CSI" || name == "csi") return Metric::csi;
  throw ParameterError("unknown metric '" + std::string(name) + "'");
}

Strategy parse_strategy(std::string_view name) {
  if (name == "frame_level") return Strategy::frame_level;
  if (name == "whole_sample") return Strategy::whole_sample;
  if (name == "dual_metric") return Strategy::dual_metric;
  throw ParameterError("unknown strategy '" + std::string(name) + "'");
}

std::vector<CandidateSet> generate_candidates_batched(DenoiserModule& model, const diffusion::DiffusionSchedule& sched,
                                                      const torch::Tensor& conditions, int64_t target_frames,
                                                      const std::vector<std::vector<uint64_t>>& seeds,
                                                      const diffusion::TrajectoryConfig& config) {
  if (conditions.dim() != 4) throw ParameterError("generate_candidates: conditions must be [E, T', H, W]");
  const int64_t events = conditions.size(0);
  if (static_cast<int64_t>(seeds.size()) != events) throw ParameterError("generate_candidates: one seed list per event");
  const auto n = static_cast<int64_t>(seeds.front().size());
  if (n < 2) throw ParameterError("generate_candidates: N must be at least 2");
  std::vector<uint64_t> row_seeds;
  for (const auto& s : seeds) {
    if (static_cast<int64_t>(s.size()) != n) throw ParameterError("generate_candidates: ragged seed lists");
    if (std::set<uint64_t>(s.begin(), s.end()).size() != s.size()) {
      throw ParameterError("generate_candidates: seeds must be distinct");
    }
    row_seeds.insert(row_seeds.end(), s.begin(), s.end());
  }
  auto rows = conditions.repeat_interleave(n, 0);
  torch::Tensor out;
  try {
    out = diffusion::from_model_space(diffusion::sample(model, rows, target_frames, sched, config, row_seeds));
  } catch (const NumericError& e) {
    throw NumericError(std::string("candidate generation: ") + e.what());
  }
  out = out.to(torch::kFloat32).reshape({events, n, target_frames, conditions.size(2), conditions.size(3)});
  std::vector<CandidateSet> sets;
  sets.reserve(static_cast<std::size_t>(events));
  for (int64_t e = 0; e < events; ++e) {
    CandidateSet set;
    set.condition = conditions[e].to(torch::kFloat32).contiguous();
    set.seeds = seeds[static_cast<std::size_t>(e)];
    for (int64_t i = 0; i < n; ++i) set.candidates.push_back(out[e][i].contiguous());
    set.candidates.push_back(out[e].mean(0).contiguous());
    sets.push_back(std::move(set));
  }
  return sets;
}

CandidateSet generate_candidates(DenoiserModule& model, const diffusion::DiffusionSchedule& sched,
                                 const torch::Tensor& condition, int64_t target_frames, int64_t n,
                                 const diffusion::TrajectoryConfig& config, std::span<const uint64_t> seeds) {
  if (n < 2) throw ParameterError("generate_candidates: N must be at least 2");
  std::vector<uint64_t> s(seeds.begin(), seeds.end());
  if (s.empty()) {
    for (int64_t i = 0; i < n; ++i) s.push_back(mix_seed(config.seed, static_cast<uint64_t>(i)));
  }
  if (static_cast<int64_t>(s.size()) != n) throw ParameterError("generate_candidates: need exactly N seeds");
  auto cond = condition.dim() == 4 ? condition.squeeze(1) : condition;
  return std::move(generate_candidates_batched(model, sched, cond.unsqueeze(0), target_frames, {s}, config).front());
}

std::optional<double> FrameScoreTable::value(std::size_t candidate, std::size_t frame, Metric metric) const {
  const auto& s = scores.at(candidate).at(frame);
  return metric == Metric::csi ? s.csi_m : s.far_m;
}

FrameScoreTable score_frames(const CandidateSet& cands, const torch::Tensor& target,
                             const metrics::ThresholdSet& thresholds) {
  FrameScoreTable table;
  for (const auto& cand : cands.candidates) {
    if (!cand.sizes().equals(target.sizes())) throw ParameterError("score_frames: candidate and target shapes differ");
    std::vector<metrics::LeadTimeScores> row;
    for (int64_t k = 0; k < target.size(0); ++k) row.push_back(metrics::score_frame(cand[k], target[k], thresholds));
    table.scores.push_back(std::move(row));
  }
  return table;
}

std::optional<PreferencePair> assemble_frame_level(const CandidateSet& cands, const FrameScoreTable& table,
                                                   Metric metric) {
  if (table.n_candidates() != cands.candidates.size()) {
    throw ParameterError("assemble_frame_level: score table does not cover every candidate");
  }
  const auto frames = static_cast<int64_t>(cands.candidates.front().size(0));
  if (static_cast<int64_t>(table.n_frames()) != frames) {
    throw ParameterError("assemble_frame_level: score table does not cover every frame");
  }
  PreferencePair pair;
  pair.condition = cands.condition;
  pair.metric = metric;
  pair.strategy = Strategy::frame_level;
  pair.seeds = cands.seeds;
  std::vector<torch::Tensor> win_frames, lose_frames;
  bool differs = false;
  for (int64_t k = 0; k < frames; ++k) {
    std::optional<std::size_t> best, worst;
    std::optional<double> best_v, worst_v;
    for (std::size_t i = 0; i < cands.candidates.size(); ++i) {
      const auto g = goodness(table.scores[i][static_cast<std::size_t>(k)], metric);
      if (!g) continue;
      if (!best_v || *g > *best_v) {
        best = i;
        best_v = g;
      }
      if (!worst_v || *g < *worst_v) {
        worst = i;
        worst_v = g;
      }
    }
    const bool neutral = !best.has_value();
    const std::size_t w = neutral ? 0 : *best;
    const std::size_t l = neutral ? 0 : *worst;
    pair.win_index.push_back(static_cast<int64_t>(w));
    pair.lose_index.push_back(static_cast<int64_t>(l));
    pair.neutral.push_back(neutral);
    win_frames.push_back(cands.candidates[w][k]);
    lose_frames.push_back(cands.candidates[l][k]);
    differs |= !torch::equal(win_frames.back(), lose_frames.back());
  }
  if (!differs) return std::nullopt;
  pair.y_win = torch::stack(win_frames).contiguous();
  pair.y_lose = torch::stack(lose_frames).contiguous();
  return pair;
}

std::vector<metrics::LeadTimeScores> score_sequences_per_candidate(const CandidateSet& cands,
                                                                   const torch::Tensor& target,
                                                                   const metrics::ThresholdSet& thresholds) {
  std::vector<metrics::LeadTimeScores> out;
  for (const auto& cand : cands.candidates) {
    if (!cand.sizes().equals(target.sizes())) throw ParameterError("candidate and target shapes differ");
    out.push_back(sequence_scores(cand, target, thresholds));
  }
  return out;
}

std::vector<std::size_t> rank_candidates(std::span<const metrics::LeadTimeScores> scores, Metric metric) {
  std::vector<std::size_t> order(scores.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const auto ga = goodness(scores[a], metric);
    const auto gb = goodness(scores[b], metric);
    if (ga && gb) return *ga > *gb;
    return ga.has_value() && !gb.has_value();
  });
  return order;
}

std::optional<PreferencePair> assemble_whole_sample(const CandidateSet& cands, const torch::Tensor& target,
                                                    const metrics::ThresholdSet& thresholds, Metric metric) {
  const auto scores = score_sequences_per_candidate(cands, target, thresholds);
  const auto order = rank_candidates(scores, metric);
  std::optional<std::size_t> worst;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if (goodness(scores[*it], metric)) {
      worst = *it;
      break;
    }
  }
  if (!worst || !goodness(scores[order.front()], metric)) return std::nullopt;
  const std::size_t best = order.front();
  // Among equally scored worst candidates prefer the lowest index.
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const auto g = goodness(scores[i], metric);
    if (g && *g == *goodness(scores[*worst], metric)) {
      worst = i;
      break;
    }
  }
  if (best == *worst) return std::nullopt;
  return whole_pair(cands, best, *worst, metric, Strategy::whole_sample);
}

std::optional<PreferencePair> assemble_dual_metric(const CandidateSet& cands, const torch::Tensor& target,
                                                   const metrics::ThresholdSet& thresholds) {
  if (cands.candidates.size() < 4) throw ParameterError("dual-metric selection needs at least 4 candidates");
  const auto scores = score_sequences_per_candidate(cands, target, thresholds);
  const auto by_csi = rank_candidates(scores, Metric::csi);
  const auto by_far = rank_candidates(scores, Metric::far);
  const std::size_t n = scores.size();
  auto in = [](const std::vector<std::size_t>& v, std::size_t lo, std::size_t hi, std::size_t x) {
    return std::find(v.begin() + static_cast<std::ptrdiff_t>(lo), v.begin() + static_cast<std::ptrdiff_t>(hi), x) !=
           v.begin() + static_cast<std::ptrdiff_t>(hi);
  };
  std::optional<std::size_t> win, lose;
  for (std::size_t r = 0; r < 2 && !win; ++r) {
    if (in(by_far, 0, 2, by_csi[r])) win = by_csi[r];
  }
  for (std::size_t r = n; r-- > n - 2 && !lose;) {
    if (in(by_far, n - 2, n, by_csi[r])) lose = by_csi[r];
  }
  if (!win || !lose || *win == *lose) return std::nullopt;
  if (!scores[*win].csi_m || !scores[*lose].csi_m) return std::nullopt;
  return whole_pair(cands, *win, *lose, Metric::csi, Strategy::dual_metric);
}

// --- archive ------------------------------------------------------------------

BuildSummary build_preference_dataset(DenoiserModule& model, const diffusion::DiffusionSchedule& sched,
                                      std::span<const data::EventRecord> events, int64_t context_len,
                                      const metrics::ThresholdSet& thresholds, const BuildOptions& options,
                                      const fs::path& out_dir) {
  if (events.empty()) throw ConfigError("build_preference_dataset: dataset is empty");
  if (options.n_candidates < 2) throw ParameterError("build_preference_dataset: N must be at least 2");
  if (options.strategy == Strategy::dual_metric && options.n_candidates + 1 < 4) {
    throw ParameterError("dual-metric selection needs N + 1 >= 4");
  }
  const std::size_t n_events = options.max_events > 0
                                   ? std::min(events.size(), static_cast<std::size_t>(options.max_events))
                                   : events.size();
  fs::create_directories(out_dir);
  BuildSummary summary;
  json index_events = json::array();
  double csi_gap = 0.0;
  double far_gap = 0.0;
  const auto batch = static_cast<std::size_t>(std::max<int64_t>(1, options.events_per_batch));

  for (std::size_t start = 0; start < n_events; start += batch) {
    const std::size_t stop = std::min(n_events, start + batch);
    std::vector<torch::Tensor> conds;
    std::vector<torch::Tensor> targets;
    std::vector<std::vector<uint64_t>> seeds;
    for (std::size_t e = start; e < stop; ++e) {
      auto [ctx, tgt] = data::split_context_target(events[e].sequence, context_len);
      conds.push_back(ctx.frames().squeeze(1));
      targets.push_back(tgt.frames().squeeze(1));
      std::vector<uint64_t> s;
      const uint64_t event_seed = mix_seed(options.sampler.seed, e);
      for (int64_t i = 0; i < options.n_candidates; ++i) s.push_back(mix_seed(event_seed, static_cast<uint64_t>(i)));
      seeds.push_back(std::move(s));
    }
    auto param = model.parameters();
    auto dtype = param.empty() ? torch::kFloat32 : param.front().scalar_type();
    auto sets = generate_candidates_batched(model, sched, torch::stack(conds).to(dtype), targets.front().size(0),
                                            seeds, options.sampler);

    for (std::size_t j = 0; j < sets.size(); ++j) {
      const auto& event = events[start + j];
      const auto& target = targets[j];
      auto& cands = sets[j];
      std::optional<PreferencePair> far_pair, csi_pair;
      json extra = json::object();
      switch (options.strategy) {
        case Strategy::frame_level: {
          const auto table = score_frames(cands, target, thresholds);
          far_pair = assemble_frame_level(cands, table, Metric::far);
          csi_pair = assemble_frame_level(cands, table, Metric::csi);
          json csi_rows = json::array(), far_rows = json::array();
          for (const auto& row : table.scores) {
            json c = json::array(), f = json::array();
            for (const auto& s : row) {
              c.push_back(opt_json(s.csi_m));
              f.push_back(opt_json(s.far_m));
            }
            csi_rows.push_back(c);
            far_rows.push_back(f);
          }
          extra["frame_scores"] = {{"csi_m", csi_rows}, {"far_m", far_rows}};
          break;
        }
        case Strategy::whole_sample:
          far_pair = assemble_whole_sample(cands, target, thresholds, Metric::far);
          csi_pair = assemble_whole_sample(cands, target, thresholds, Metric::csi);
          break;
        case Strategy::dual_metric:
          csi_pair = assemble_dual_metric(cands, target, thresholds);
          if (csi_pair) {
            far_pair = *csi_pair;
            far_pair->metric = Metric::far;
          }
          break;
      }
      if (!far_pair && !csi_pair) {
        ++summary.n_skipped;
        continue;
      }
      const fs::path rel = event.event_id;
      try {
        fs::create_directories(out_dir / rel);
        io::write_f32(out_dir / rel / "condition.bin", cands.condition);
        if (far_pair) {
          far_pair->event_id = event.event_id;
          const auto sw = sequence_scores(far_pair->y_win, target, thresholds);
          const auto sl = sequence_scores(far_pair->y_lose, target, thresholds);
          if (sw.far_m && sl.far_m) far_gap += *sl.far_m - *sw.far_m;
          json e = extra;
          e["win_scores"] = {{"csi_m", opt_json(sw.csi_m)}, {"far_m", opt_json(sw.far_m)}};
          e["lose_scores"] = {{"csi_m", opt_json(sl.csi_m)}, {"far_m", opt_json(sl.far_m)}};
          write_pair(out_dir / rel / "pair_far", *far_pair, e);
          ++summary.n_far_pairs;
        }
        if (csi_pair) {
          csi_pair->event_id = event.event_id;
          const auto sw = sequence_scores(csi_pair->y_win, target, thresholds);
          const auto sl = sequence_scores(csi_pair->y_lose, target, thresholds);
          if (sw.csi_m && sl.csi_m) csi_gap += *sw.csi_m - *sl.csi_m;
          json e = extra;
          e["win_scores"] = {{"csi_m", opt_json(sw.csi_m)}, {"far_m", opt_json(sw.far_m)}};
          e["lose_scores"] = {{"csi_m", opt_json(sl.csi_m)}, {"far_m", opt_json(sl.far_m)}};
          write_pair(out_dir / rel / "pair_csi", *csi_pair, e);
          ++summary.n_csi_pairs;
        }
      } catch (const Error& err) {
        throw IoError("writing pairs for event '" + event.event_id + "': " + err.what());
      } catch (const fs::filesystem_error& err) {
        throw IoError("writing pairs for event '" + event.event_id + "': " + err.what());
      }
      index_events.push_back({{"event_id", event.event_id},
                              {"dir", rel.generic_string()},
                              {"far", far_pair.has_value()},
                              {"csi", csi_pair.has_value()}});
      ++summary.n_events;
    }
  }
  if (summary.n_csi_pairs > 0) summary.mean_csi_gap = csi_gap / static_cast<double>(summary.n_csi_pairs);
  if (summary.n_far_pairs > 0) summary.mean_far_gap = far_gap / static_cast<double>(summary.n_far_pairs);

  const auto& first = events.front().sequence;
  const json index = {{"format_version", 1},
                      {"strategy", std::string(to_string(options.strategy))},
                      {"n_candidates", options.n_candidates},
                      {"thresholds", thresholds.values()},
                      {"sampler",
                       {{"name", std::string(diffusion::to_string(options.sampler.sampler))},
                        {"n_steps", options.sampler.n_steps},
                        {"eta", options.sampler.eta},
                        {"clip_denoised", options.sampler.clip_denoised},
                        {"seed", options.sampler.seed}}},
                      {"context_shape", {context_len, first.height(), first.width()}},
                      {"target_shape", {first.length() - context_len, first.height(), first.width()}},
                      {"events", index_events},
                      {"summary",
                       {{"n_events", summary.n_events},
                        {"n_far_pairs", summary.n_far_pairs},
                        {"n_csi_pairs", summary.n_csi_pairs},
                        {"n_skipped", summary.n_skipped},
                        {"mean_csi_gap", summary.mean_csi_gap},
                        {"mean_far_gap", summary.mean_far_gap}}}};
  io::write_json(out_dir / "pairs.json", index);
  return summary;
}

PairArchive load_pair_archive(const fs::path& root) {
  if (!fs::exists(root / "pairs.json")) throw IoError("pair archive index not found: " + (root / "pairs.json").string());
  PairArchive archive;
  archive.index = io::read_json(root / "pairs.json");
  try {
    const auto context_shape = archive.index.at("context_shape").get<std::vector<int64_t>>();
    for (const auto& e : archive.index.at("events")) {
      const auto id = e.at("event_id").get<std::string>();
      const fs::path dir = root / e.at("dir").get<std::string>();
      const auto condition = io::read_f32(dir / "condition.bin", context_shape);
      if (e.at("far").get<bool>()) archive.far_pairs.push_back(read_pair(dir / "pair_far", condition, id));
      if (e.at("csi").get<bool>()) archive.csi_pairs.push_back(read_pair(dir / "pair_csi", condition, id));
    }
  } catch (const json::exception& e) {
    throw FormatError((root / "pairs.json").string() + ": " + e.what());
  }
  return archive;
}

}  // namespace syncast::preference
