#include "syncast/harness.hpp"

#include <chrono>
#include <fstream>
#include <iostream>

#include "syncast/errors.hpp"
#include "syncast/io.hpp"
#include "syncast/rng.hpp"

namespace syncast::harness {

using nlohmann::json;

json default_config() {
  return {
      {"seed", 0},
      {"output_dir", "runs/syncast"},
      {"data",
       {{"archive", ""},
        {"seed", 0},
        {"n_train", 400},
        {"n_val", 20},
        {"n_test", 100},
        {"height", 32},
        {"width", 32},
        {"context_len", 4},
        {"horizon", 8},
        {"min_cells", 1},
        {"max_cells", 3},
        {"interval_minutes", 10},
        {"thresholds", "synthetic"},
        {"downscale", 1}}},
      {"model",
       {{"base_channels", 16},
        {"channel_mults", {1, 2, 2}},
        {"n_res_blocks", 1},
        {"attention_resolutions", {16, 8}},
        {"attention_heads", 4},
        {"cond_embed_dim", 32},
        {"time_embed_dim", 64},
        {"prediction", "velocity"}}},
      {"schedule", {{"steps", 1000}, {"kind", "linear"}, {"beta_min", 1e-4}, {"beta_max", 2e-2}}},
      {"train",
       {{"steps", 3000},
        {"batch_size", 8},
        {"lr", 1e-3},
        {"ema_decay", 0.0},
        {"log_every", 50},
        {"checkpoint_every", 500},
        {"val_every", 1000},
        {"val_events", 20},
        {"val_members", 2},
        {"use_best", false}}},
      {"sampler", {{"name", "ddim"}, {"n_steps", 20}, {"eta", 0.0}, {"clip_denoised", true}}},
      {"preference",
       {{"n_candidates", 4},
        {"strategy", "frame_level"},
        {"events_per_batch", 8},
        {"max_events", 0},
        {"eta", 1.0}}},
      {"alignment",
       {{"beta_td", 1000.0},
        {"alpha_far", 1.0},
        {"omega_mode", "constant_one"},
        {"batch_size", 4},
        {"lr", 2e-5},
        {"far_steps", 300},
        {"csi_steps", 300},
        {"grad_clip", 1.0}}},
      {"evaluation",
       {{"ensemble", 4},
        {"seed", 20240917},
        {"max_events", 0},
        {"events_per_batch", 8},
        {"pools", {1, 4, 16}},
        {"split", "test"}}},
  };
}

namespace {

void flatten(const json& doc, const std::string& prefix, std::vector<std::string>& out) {
  for (const auto& [key, value] : doc.items()) {
    const std::string name = prefix.empty() ? key : prefix + "." + key;
    if (value.is_object()) {
      flatten(value, name, out);
    } else {
      out.push_back(name);
    }
  }
}

json::json_pointer pointer(const std::string& dotted) {
  std::string p;
  std::size_t start = 0;
  while (true) {
    const auto dot = dotted.find('.', start);
    p += "/" + dotted.substr(start, dot - start);
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  return json::json_pointer(p);
}

template <typename F>
auto typed(const char* section, F&& f) {
  try {
    return f();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config section '") + section + "': " + e.what());
  } catch (const ParameterError& e) {
    throw ConfigError(std::string("config section '") + section + "': " + e.what());
  } catch (const FormatError& e) {
    throw ConfigError(std::string("config section '") + section + "': " + e.what());
  }
}

void merge_known(json& base, const json& over, const std::string& prefix) {
  if (!over.is_object()) throw ConfigError("config: '" + (prefix.empty() ? std::string("<root>") : prefix) +
                                           "' must be an object");
  for (const auto& [key, value] : over.items()) {
    const std::string name = prefix.empty() ? key : prefix + "." + key;
    if (!base.contains(key)) throw ConfigError("config: unknown key '" + name + "'");
    if (base[key].is_object()) {
      merge_known(base[key], value, name);
    } else {
      base[key] = value;
    }
  }
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

RunConfig::RunConfig() : doc_(default_config()) {}

RunConfig RunConfig::from_json(const json& doc) {
  RunConfig c;
  merge_known(c.doc_, doc, "");
  return c;
}

RunConfig RunConfig::load(const fs::path& path) {
  if (!fs::exists(path)) throw IoError("config file not found: " + path.string());
  return from_json(io::read_json(path));
}

std::vector<std::string> RunConfig::dotted_keys() {
  std::vector<std::string> out;
  flatten(default_config(), "", out);
  return out;
}

void RunConfig::set(const std::string& dotted, const std::string& value) {
  const auto ptr = pointer(dotted);
  if (!default_config().contains(ptr) || default_config()[ptr].is_object()) {
    throw ConfigError("config: unknown key '" + dotted + "'");
  }
  json parsed = json::parse(value, nullptr, false);
  if (parsed.is_discarded() || (doc_[ptr].is_string() && !parsed.is_string())) parsed = value;
  doc_[ptr] = parsed;
}

void RunConfig::validate() const {
  (void)data();
  (void)thresholds();
  (void)model();
  (void)schedule();
  (void)train();
  (void)sampler();
  (void)preference();
  (void)alignment(alignment::Stage::far_align);
  (void)alignment(alignment::Stage::csi_align);
  (void)evaluation();
  (void)output_dir();
}

uint64_t RunConfig::seed() const {
  return typed("seed", [&] { return doc_.at("seed").get<uint64_t>(); });
}

fs::path RunConfig::output_dir() const {
  return typed("output_dir", [&] {
    const auto s = doc_.at("output_dir").get<std::string>();
    if (s.empty()) throw ConfigError("config: output_dir is empty");
    return fs::path(s);
  });
}

fs::path RunConfig::data_archive() const {
  return typed("data", [&] { return fs::path(doc_.at("data").at("archive").get<std::string>()); });
}

uint64_t RunConfig::init_seed() const { return mix_seed(seed(), 0); }
uint64_t RunConfig::train_seed() const { return mix_seed(seed(), 1); }

data::SyntheticDatasetConfig RunConfig::data() const {
  return typed("data", [&] {
    const auto& d = doc_.at("data");
    data::SyntheticDatasetConfig c;
    c.seed = d.at("seed").get<uint64_t>();
    c.n_train = d.at("n_train").get<int64_t>();
    c.n_val = d.at("n_val").get<int64_t>();
    c.n_test = d.at("n_test").get<int64_t>();
    c.grid = {d.at("height").get<int64_t>(), d.at("width").get<int64_t>()};
    c.context_len = d.at("context_len").get<int64_t>();
    c.horizon = d.at("horizon").get<int64_t>();
    c.min_cells = d.at("min_cells").get<int64_t>();
    c.max_cells = d.at("max_cells").get<int64_t>();
    c.interval_minutes = d.at("interval_minutes").get<int>();
    if (c.n_train < 1 || c.n_val < 0 || c.n_test < 1) throw ConfigError("data: need n_train >= 1 and n_test >= 1");
    if (c.context_len < 1 || c.horizon < 1) throw ConfigError("data: context_len and horizon must be positive");
    if (c.min_cells < 1 || c.max_cells < c.min_cells) throw ConfigError("data: invalid cell count range");
    const auto ds = d.at("downscale").get<int64_t>();
    if (ds < 1) throw ConfigError("data: downscale must be >= 1");
    return c;
  });
}

metrics::ThresholdSet RunConfig::thresholds() const {
  return typed("data", [&] {
    const auto& t = doc_.at("data").at("thresholds");
    if (t.is_string()) {
      if (t == "synthetic") return metrics::ThresholdSet::synthetic();
      if (t == "sevir") return metrics::ThresholdSet::sevir();
      throw ConfigError("data.thresholds: expected 'synthetic', 'sevir' or a list");
    }
    return metrics::ThresholdSet(t.get<std::vector<double>>());
  });
}

denoiser::DenoiserConfig RunConfig::model() const {
  return typed("model", [&] {
    auto c = denoiser::DenoiserConfig::from_json(doc_.at("model"));
    const auto d = data();
    const auto ds = doc_.at("data").at("downscale").get<int64_t>();
    c.context_frames = d.context_len;
    c.target_frames = d.horizon;
    c.height = d.grid.height / ds;
    c.width = d.grid.width / ds;
    c.validate();
    return c;
  });
}

diffusion::DiffusionSchedule RunConfig::schedule() const {
  return typed("schedule", [&] {
    const auto& s = doc_.at("schedule");
    return diffusion::make_schedule(s.at("steps").get<int64_t>(),
                                    diffusion::parse_schedule_kind(s.at("kind").get<std::string>()),
                                    s.at("beta_min").get<double>(), s.at("beta_max").get<double>());
  });
}

TrainConfig RunConfig::train() const {
  return typed("train", [&] {
    const auto& s = doc_.at("train");
    TrainConfig c;
    c.steps = s.at("steps").get<int64_t>();
    c.batch_size = s.at("batch_size").get<int64_t>();
    c.lr = s.at("lr").get<double>();
    c.ema_decay = s.at("ema_decay").get<double>();
    c.log_every = s.at("log_every").get<int64_t>();
    c.checkpoint_every = s.at("checkpoint_every").get<int64_t>();
    c.val_every = s.at("val_every").get<int64_t>();
    c.val_events = s.at("val_events").get<int64_t>();
    c.val_members = s.at("val_members").get<int64_t>();
    c.use_best = s.at("use_best").get<bool>();
    if (c.steps < 0 || c.batch_size < 1 || !(c.lr > 0.0)) throw ConfigError("train: invalid steps/batch_size/lr");
    if (c.ema_decay < 0.0 || c.ema_decay >= 1.0) throw ConfigError("train: ema_decay must lie in [0, 1)");
    if (c.val_members < 1 || c.val_events < 0) throw ConfigError("train: invalid validation settings");
    return c;
  });
}

diffusion::TrajectoryConfig RunConfig::sampler() const {
  return typed("sampler", [&] {
    const auto& s = doc_.at("sampler");
    diffusion::TrajectoryConfig c;
    c.sampler = diffusion::parse_sampler(s.at("name").get<std::string>());
    c.n_steps = s.at("n_steps").get<int64_t>();
    c.eta = s.at("eta").get<double>();
    c.clip_denoised = s.at("clip_denoised").get<bool>();
    c.seed = mix_seed(seed(), 2);
    if (c.n_steps < 1 || c.eta < 0.0) throw ConfigError("sampler: invalid n_steps/eta");
    return c;
  });
}

preference::BuildOptions RunConfig::preference() const {
  return typed("preference", [&] {
    const auto& s = doc_.at("preference");
    preference::BuildOptions o;
    o.n_candidates = s.at("n_candidates").get<int64_t>();
    o.strategy = preference::parse_strategy(s.at("strategy").get<std::string>());
    o.events_per_batch = s.at("events_per_batch").get<int64_t>();
    o.max_events = s.at("max_events").get<int64_t>();
    o.sampler = sampler();
    o.sampler.eta = s.at("eta").get<double>();
    o.sampler.seed = mix_seed(seed(), 3);
    if (o.n_candidates < 2) throw ConfigError("preference: n_candidates must be at least 2");
    if (o.strategy == preference::Strategy::dual_metric && o.n_candidates + 1 < 4) {
      throw ConfigError("preference: dual_metric needs n_candidates >= 3");
    }
    return o;
  });
}

alignment::AlignmentConfig RunConfig::alignment(alignment::Stage stage) const {
  return typed("alignment", [&] {
    const auto& s = doc_.at("alignment");
    alignment::AlignmentConfig c;
    c.beta_td = s.at("beta_td").get<double>();
    c.alpha_far = s.at("alpha_far").get<double>();
    if (s.at("omega_mode").get<std::string>() != "constant_one") {
      throw ConfigError("alignment.omega_mode must be constant_one");
    }
    c.batch_size = s.at("batch_size").get<int64_t>();
    c.lr = s.at("lr").get<double>();
    c.steps = s.at(stage == alignment::Stage::far_align ? "far_steps" : "csi_steps").get<int64_t>();
    c.grad_clip = s.at("grad_clip").get<double>();
    c.seed = mix_seed(seed(), 4);
    c.validate();
    return c;
  });
}

EvalConfig RunConfig::evaluation() const {
  return typed("evaluation", [&] {
    const auto& s = doc_.at("evaluation");
    EvalConfig c;
    c.ensemble = s.at("ensemble").get<int64_t>();
    c.seed = s.at("seed").get<uint64_t>();
    c.max_events = s.at("max_events").get<int64_t>();
    c.events_per_batch = s.at("events_per_batch").get<int64_t>();
    c.pools = s.at("pools").get<std::vector<int64_t>>();
    c.split = data::parse_split(s.at("split").get<std::string>());
    if (c.ensemble < 1 || c.events_per_batch < 1 || c.max_events < 0) {
      throw ConfigError("evaluation: invalid ensemble/events_per_batch/max_events");
    }
    return c;
  });
}

// --- data ---------------------------------------------------------------------

data::Archive prepare_data(const RunConfig& cfg, const fs::path& root) {
  const auto ds = cfg.doc().at("data").at("downscale").get<int64_t>();
  data::ArchiveOptions options;
  options.downscale = ds;
  const auto given = cfg.data_archive();
  if (!given.empty()) {
    if (!fs::exists(given / "manifest.json")) throw IoError("archive manifest not found: " + (given / "manifest.json").string());
    return data::ingest_archive(given, options);
  }
  const auto d = cfg.data();
  const auto events = data::generate_synthetic_dataset(d);
  if (fs::exists(root)) fs::remove_all(root);
  data::write_archive(root, events, d.context_len, d.horizon, d.value_scale);
  return data::ingest_archive(root, options);
}

namespace {

struct Windows {
  std::vector<torch::Tensor> frames;  // [T, H, W] per event
  int64_t context_len = 0;
  int64_t horizon = 0;
};

Windows training_windows(const std::vector<data::EventRecord>& events, int64_t context_len, int64_t horizon) {
  Windows w{{}, context_len, horizon};
  for (const auto& e : events) {
    if (e.sequence.length() < context_len + horizon) {
      throw ConfigError("event '" + e.event_id + "' is shorter than context_len + horizon");
    }
    w.frames.push_back(e.sequence.frames().squeeze(1));
  }
  return w;
}

std::pair<torch::Tensor, torch::Tensor> draw_batch(const Windows& w, int64_t batch, torch::Generator& gen) {
  auto idx = torch::randint(static_cast<int64_t>(w.frames.size()), {batch}, gen, torch::kInt64);
  std::vector<torch::Tensor> ctx, tgt;
  const int64_t span = w.context_len + w.horizon;
  for (int64_t b = 0; b < batch; ++b) {
    const auto& f = w.frames[static_cast<std::size_t>(idx[b].item<int64_t>())];
    int64_t start = 0;
    if (f.size(0) > span) start = torch::randint(f.size(0) - span + 1, {1}, gen, torch::kInt64).item<int64_t>();
    ctx.push_back(f.narrow(0, start, w.context_len));
    tgt.push_back(f.narrow(0, start + w.context_len, w.horizon));
  }
  return {torch::stack(ctx), diffusion::to_model_space(torch::stack(tgt))};
}

void ema_update(torch::nn::Module& ema, const torch::nn::Module& model, double decay) {
  torch::NoGradGuard no_grad;
  auto e = ema.parameters();
  const auto m = model.parameters();
  for (std::size_t i = 0; i < e.size(); ++i) e[i].mul_(decay).add_(m[i], 1.0 - decay);
}

}  // namespace

diffusion::TrajectoryConfig resolve_sampler(const DenoiserModule& model, diffusion::TrajectoryConfig config) {
  if (model.prediction() == Prediction::velocity) {
    config.sampler = diffusion::Sampler::euler_flow;
  } else if (config.sampler == diffusion::Sampler::euler_flow) {
    throw ConfigError("euler_flow sampling needs a velocity-prediction model");
  }
  return config;
}

TrainResult train_base(const RunConfig& cfg, const data::Archive& archive, const fs::path& state_dir) {
  const auto tc = cfg.train();
  const auto mc = cfg.model();
  const auto sched = cfg.schedule();
  const auto dc = cfg.data();
  const auto train_events = archive.load_split(data::Split::train);
  if (train_events.empty()) throw ConfigError("train_base: the train split is empty");
  const auto windows = training_windows(train_events, dc.context_len, dc.horizon);
  std::vector<data::EventRecord> val_events;
  if (tc.val_every > 0 && tc.val_events > 0) {
    val_events = archive.load_split(data::Split::val);
    if (static_cast<int64_t>(val_events.size()) > tc.val_events) val_events.erase(val_events.begin() + tc.val_events, val_events.end());
  }

  fs::create_directories(state_dir);
  const auto model_path = state_dir / "model.ckpt";
  const auto opt_path = state_dir / "optimizer.pt";
  const auto state_path = state_dir / "state.json";
  const auto ema_path = state_dir / "ema.ckpt";
  const auto best_path = state_dir / "best.ckpt";

  TrainResult result;
  auto model = denoiser::make_denoiser(mc, cfg.init_seed());
  torch::optim::AdamW opt(model->parameters(),
                          torch::optim::AdamWOptions(tc.lr).betas({0.9, 0.95}).weight_decay(0.0));
  std::shared_ptr<denoiser::ConditionalUNet> ema;
  if (tc.ema_decay > 0.0) ema = denoiser::clone_denoiser(*model);
  json state = {{"step", 0}, {"best_val_crps", nullptr}, {"validation", json::array()}};

  if (fs::exists(state_path)) {
    state = io::read_json(state_path);
    auto ck = PolicyCheckpoint::load(model_path);
    if (ck.config().to_json() != mc.to_json()) throw ConfigError("train_base: resume state has a different model config");
    denoiser::copy_state(*ck.model, *model);
    torch::load(opt, opt_path.string());
    if (ema) {
      auto ek = PolicyCheckpoint::load(ema_path);
      denoiser::copy_state(*ek.model, *ema);
    }
  }
  int64_t step = state.at("step").get<int64_t>();
  result.start_step = step;
  if (!state.at("best_val_crps").is_null()) result.best_val_crps = state.at("best_val_crps").get<double>();

  auto stage_meta = [&](int64_t s) {
    return json{{"stage", "train_base"}, {"step", s}, {"train", cfg.doc().at("train")}};
  };
  auto save_state = [&](int64_t s) {
    PolicyCheckpoint{model, PolicyRole::base, stage_meta(s)}.save(model_path);
    if (ema) PolicyCheckpoint{ema, PolicyRole::base, stage_meta(s)}.save(ema_path);
    torch::save(opt, opt_path.string());
    state["step"] = s;
    io::write_json(state_path, state);
  };

  std::ofstream log(state_dir / "train_log.jsonl", std::ios::app);
  const auto sampler = resolve_sampler(*model, cfg.sampler());
  model->train();
  while (step < tc.steps) {
    auto gen = make_generator(mix_seed(cfg.train_seed(), static_cast<uint64_t>(step)));
    auto [ctx, y0] = draw_batch(windows, tc.batch_size, gen);
    opt.zero_grad();
    torch::Tensor loss;
    try {
      loss = mc.prediction == Prediction::velocity ? diffusion::flow_match_loss(*model, y0, ctx, gen)
                                                   : diffusion::ddpm_loss(*model, y0, ctx, sched, gen);
    } catch (const NumericError& e) {
      throw NumericError("train_base diverged at step " + std::to_string(step) + " (" + e.what() +
                         "); last good checkpoint: " + model_path.string());
    }
    const double value = loss.item<double>();
    if (!std::isfinite(value)) {
      throw NumericError("train_base diverged at step " + std::to_string(step) +
                         "; last good checkpoint: " + model_path.string());
    }
    loss.backward();
    opt.step();
    if (ema) ema_update(*ema, *model, tc.ema_decay);
    result.losses.push_back(value);
    ++step;
    if (tc.log_every > 0 && step % tc.log_every == 0) log << json{{"step", step}, {"loss", value}}.dump() << std::endl;

    if (tc.val_every > 0 && !val_events.empty() && (step % tc.val_every == 0 || step == tc.steps)) {
      auto& eval_model = ema ? *ema : *model;
      EvalConfig ec;
      ec.ensemble = tc.val_members;
      ec.pools = {1};
      eval_model.eval();
      const auto rep = evaluate(eval_model, val_events, dc.context_len, sched, sampler, cfg.thresholds(), ec);
      model->train();
      const double crps = rep.crps.value_or(std::numeric_limits<double>::infinity());
      state["validation"].push_back(
          {{"step", step}, {"crps", crps}, {"csi_m", rep.csi_m ? json(*rep.csi_m) : json(nullptr)}});
      if (!result.best_val_crps || crps < *result.best_val_crps) {
        result.best_val_crps = crps;
        state["best_val_crps"] = crps;
        state["best_step"] = step;
        PolicyCheckpoint{ema ? ema : model, PolicyRole::base, stage_meta(step)}.save(best_path);
      }
    }
    if ((tc.checkpoint_every > 0 && step % tc.checkpoint_every == 0) || step == tc.steps) save_state(step);
  }
  if (!fs::exists(state_path)) save_state(step);
  model->eval();

  auto final_model = ema ? ema : model;
  if (tc.use_best && fs::exists(best_path)) final_model = PolicyCheckpoint::load(best_path).model;
  final_model->eval();
  result.checkpoint = PolicyCheckpoint{final_model, PolicyRole::base, stage_meta(step)};
  return result;
}

// --- evaluation -----------------------------------------------------------------

metrics::ScoreReport evaluate(DenoiserModule& model, std::span<const data::EventRecord> events, int64_t context_len,
                              const diffusion::DiffusionSchedule& sched, const diffusion::TrajectoryConfig& sampler,
                              const metrics::ThresholdSet& thresholds, const EvalConfig& eval) {
  if (events.empty()) throw ConfigError("evaluate: no events");
  const auto config = resolve_sampler(model, sampler);
  const std::size_t n = eval.max_events > 0 ? std::min(events.size(), static_cast<std::size_t>(eval.max_events))
                                            : events.size();
  const int64_t horizon = events.front().sequence.length() - context_len;
  if (horizon < 1) throw ConfigError("evaluate: events are not longer than the context");
  metrics::ScoreAccumulator acc(thresholds, eval.pools);
  const auto chunk = static_cast<std::size_t>(eval.events_per_batch);
  for (std::size_t start = 0; start < n; start += chunk) {
    const std::size_t stop = std::min(n, start + chunk);
    std::vector<torch::Tensor> ctx, obs;
    std::vector<uint64_t> seeds;
    for (std::size_t i = start; i < stop; ++i) {
      const auto& f = events[i].sequence.frames();
      if (f.size(0) < context_len + horizon) throw ConfigError("evaluate: event '" + events[i].event_id + "' is too short");
      ctx.push_back(f.narrow(0, 0, context_len).squeeze(1));
      obs.push_back(f.narrow(0, context_len, horizon).squeeze(1));
      const uint64_t event_seed = mix_seed(eval.seed, i);
      for (int64_t m = 0; m < eval.ensemble; ++m) seeds.push_back(mix_seed(event_seed, static_cast<uint64_t>(m)));
    }
    auto rows = torch::stack(ctx).repeat_interleave(eval.ensemble, 0);
    auto out = diffusion::from_model_space(diffusion::sample(model, rows, horizon, sched, config, seeds));
    out = out.reshape({static_cast<int64_t>(stop - start), eval.ensemble, horizon, out.size(2), out.size(3)});
    for (std::size_t j = 0; j < stop - start; ++j) {
      std::vector<torch::Tensor> members;
      for (int64_t m = 0; m < eval.ensemble; ++m) members.push_back(out[static_cast<int64_t>(j)][m]);
      acc.add(members, obs[j]);
    }
  }
  return acc.report();
}

preference::BuildSummary build_prefs(const RunConfig& cfg, const PolicyCheckpoint& pi0, const data::Archive& archive,
                                     const fs::path& out_dir) {
  if (pi0.role != PolicyRole::base) throw ConfigError("build-prefs expects the base policy (pi0)");
  auto options = cfg.preference();
  options.sampler = resolve_sampler(*pi0.model, options.sampler);
  const auto events = archive.load_split(data::Split::train);
  if (events.empty()) throw ConfigError("build-prefs: the train split is empty");
  return preference::build_preference_dataset(*pi0.model, cfg.schedule(), events, archive.manifest().context_len,
                                              cfg.thresholds(), options, out_dir);
}

json summary_rows(const std::vector<std::pair<PolicyRole, metrics::ScoreReport>>& reports) {
  auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
  json rows = json::array();
  for (const auto& [role, rep] : reports) {
    json pooled = json::object();
    for (const auto& [k, v] : rep.csi_m_pooled) pooled[std::to_string(k)] = opt(v);
    rows.push_back({{"policy", std::string(to_string(role))},
                    {"csi_m", opt(rep.csi_m)},
                    {"far_m", opt(rep.far_m)},
                    {"hss", opt(rep.hss)},
                    {"crps", opt(rep.crps)},
                    {"csi_m_pooled", pooled},
                    {"n_events", rep.n_events}});
  }
  return rows;
}

PipelineSummary run_pipeline(const RunConfig& cfg) {
  cfg.validate();
  const RunLayout layout{cfg.output_dir()};
  fs::create_directories(layout.root);
  io::DirectoryLock lock(layout.root);
  io::write_json(layout.root / "config.json", cfg.doc());

  PipelineSummary out;
  json timings = json::object();
  auto stage = [&](const std::string& name, auto&& body) {
    const auto t0 = std::chrono::steady_clock::now();
    std::cerr << "[pipeline] " << name << "\n";
    try {
      body();
    } catch (const StageError&) {
      throw;
    } catch (const std::exception& e) {
      throw StageError(name, e.what());
    }
    timings[name] = seconds_since(t0);
  };

  std::optional<data::Archive> archive;
  stage("gen-data", [&] { archive.emplace(prepare_data(cfg, layout.data())); });

  std::optional<PolicyCheckpoint> pi0, pi_alpha, pi_beta;
  stage("train-base", [&] {
    auto res = train_base(cfg, *archive, layout.base_dir());
    res.checkpoint.save(layout.pi0());
    pi0 = std::move(res.checkpoint);
  });

  preference::BuildSummary prefs;
  stage("build-prefs", [&] {
    if (fs::exists(layout.prefs())) fs::remove_all(layout.prefs());
    prefs = build_prefs(cfg, *pi0, *archive, layout.prefs());
  });

  const auto sched = cfg.schedule();
  std::optional<preference::PairArchive> pairs;
  stage("align-far", [&] {
    pairs = preference::load_pair_archive(layout.prefs());
    alignment::PolicyTriple triple{*pi0, std::nullopt, std::nullopt};
    pi_alpha = alignment::run_stage(alignment::Stage::far_align, triple, *pairs,
                                    cfg.alignment(alignment::Stage::far_align), sched,
                                    layout.logs() / "far_align.jsonl");
    pi_alpha->save(layout.pi_alpha());
  });
  stage("align-csi", [&] {
    alignment::PolicyTriple triple{*pi0, *pi_alpha, std::nullopt};
    pi_beta = alignment::run_stage(alignment::Stage::csi_align, triple, *pairs,
                                   cfg.alignment(alignment::Stage::csi_align), sched,
                                   layout.logs() / "csi_align.jsonl");
    pi_beta->save(layout.pi_beta());
  });

  std::vector<std::pair<PolicyRole, metrics::ScoreReport>> reports;
  stage("evaluate", [&] {
    const auto ec = cfg.evaluation();
    const auto events = archive->load_split(ec.split);
    for (const auto* ck : {&*pi0, &*pi_alpha, &*pi_beta}) {
      auto rep = evaluate(*ck->model, events, archive->manifest().context_len, sched, cfg.sampler(), cfg.thresholds(),
                          ec);
      io::write_json(layout.report(ck->role), rep.to_json());
      out.artifacts.push_back(layout.report(ck->role));
      reports.emplace_back(ck->role, std::move(rep));
    }
  });

  out.doc = {{"policies", summary_rows(reports)},
             {"preferences",
              {{"n_events", prefs.n_events},
               {"n_far_pairs", prefs.n_far_pairs},
               {"n_csi_pairs", prefs.n_csi_pairs},
               {"n_skipped", prefs.n_skipped},
               {"mean_csi_gap", prefs.mean_csi_gap},
               {"mean_far_gap", prefs.mean_far_gap}}},
             {"timings_s", timings},
             {"seed", cfg.seed()}};
  io::write_json(layout.summary(), out.doc);
  for (const auto& p : {layout.pi0(), layout.pi_alpha(), layout.pi_beta(), layout.summary()}) out.artifacts.push_back(p);
  return out;
}

}  // namespace syncast::harness
