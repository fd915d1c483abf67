#include "syncast/alignment.hpp"

#include <fstream>

#include "syncast/denoiser.hpp"
#include "syncast/errors.hpp"
#include "syncast/rng.hpp"

namespace syncast::alignment {

using nlohmann::json;

void AlignmentConfig::validate() const {
  if (!(beta_td > 0.0)) throw ParameterError("alignment: beta_td must be positive");
  if (!(alpha_far >= 0.0)) throw ParameterError("alignment: alpha_far must be non-negative");
  if (batch_size < 1) throw ParameterError("alignment: batch_size must be at least 1");
  if (!(lr > 0.0)) throw ParameterError("alignment: lr must be positive");
  if (steps < 0) throw ParameterError("alignment: steps must be non-negative");
  if (grad_clip < 0.0) throw ParameterError("alignment: grad_clip must be non-negative");
}

json AlignmentConfig::to_json() const {
  return {{"beta_td", beta_td}, {"alpha_far", alpha_far}, {"omega_mode", "constant_one"},
          {"batch_size", batch_size}, {"lr", lr}, {"steps", steps}, {"grad_clip", grad_clip}, {"seed", seed}};
}

AlignmentConfig AlignmentConfig::from_json(const json& doc) {
  AlignmentConfig c;
  try {
    c.beta_td = doc.value("beta_td", c.beta_td);
    c.alpha_far = doc.value("alpha_far", c.alpha_far);
    if (doc.value("omega_mode", std::string("constant_one")) != "constant_one") {
      throw ConfigError("alignment: omega_mode must be constant_one");
    }
    c.batch_size = doc.value("batch_size", c.batch_size);
    c.lr = doc.value("lr", c.lr);
    c.steps = doc.value("steps", c.steps);
    c.grad_clip = doc.value("grad_clip", c.grad_clip);
    c.seed = doc.value("seed", c.seed);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("alignment config: ") + e.what());
  }
  c.validate();
  return c;
}

PairBatch make_batch(std::span<const preference::PreferencePair> pairs, torch::Dtype dtype) {
  if (pairs.empty()) throw ParameterError("make_batch: no pairs");
  std::vector<torch::Tensor> c, w, l;
  for (const auto& p : pairs) {
    if (p.metric != pairs.front().metric) throw ParameterError("make_batch: mixed metrics in one batch");
    c.push_back(p.condition);
    w.push_back(p.y_win);
    l.push_back(p.y_lose);
  }
  PairBatch b;
  b.condition = torch::stack(c).to(dtype);
  b.y_win = diffusion::to_model_space(torch::stack(w)).to(dtype);
  b.y_lose = diffusion::to_model_space(torch::stack(l)).to(dtype);
  b.metric = pairs.front().metric;
  if (!b.y_win.sizes().equals(b.y_lose.sizes())) throw ParameterError("make_batch: win and lose shapes differ");
  return b;
}

NoiseDraws draw_noise(const PairBatch& batch, const diffusion::DiffusionSchedule& sched, torch::Generator& gen) {
  NoiseDraws d;
  d.t = diffusion::sample_steps(batch.size(), sched, gen);
  d.eps_w = torch::randn(batch.y_win.sizes(), gen, batch.y_win.options());
  d.eps_l = torch::randn(batch.y_lose.sizes(), gen, batch.y_lose.options());
  return d;
}

torch::Tensor branch_error(DenoiserModule& model, const torch::Tensor& y0, const torch::Tensor& condition,
                           const diffusion::DiffusionSchedule& sched, const torch::Tensor& t, const torch::Tensor& eps) {
  torch::Tensor pred, target;
  if (model.prediction() == Prediction::velocity) {
    auto s = t.to(y0.scalar_type()) / static_cast<double>(sched.steps);
    auto ss = s.reshape({-1, 1, 1, 1});
    pred = model.forward((1.0 - ss) * eps + ss * y0, s, condition);
    target = y0 - eps;
  } else {
    auto noisy = diffusion::forward_noise(y0, t, eps, sched);
    pred = model.forward(noisy.y_t, t.to(y0.scalar_type()), condition);
    target = eps;
  }
  return (target - pred).pow(2).flatten(1).mean(1);
}

namespace {

torch::Tensor frozen_error(DenoiserModule& model, const torch::Tensor& y0, const torch::Tensor& condition,
                           const diffusion::DiffusionSchedule& sched, const torch::Tensor& t, const torch::Tensor& eps) {
  torch::NoGradGuard no_grad;
  return branch_error(model, y0, condition, sched, t, eps);
}

void check_draws(const PairBatch& batch, const NoiseDraws& d) {
  if (d.t.numel() != batch.size() || !d.eps_w.sizes().equals(batch.y_win.sizes()) ||
      !d.eps_l.sizes().equals(batch.y_lose.sizes())) {
    throw ParameterError("alignment loss: noise draws do not match the batch");
  }
}

LossBreakdown finish(const torch::Tensor& arg, const torch::Tensor& pref_term, const torch::Tensor& preserve_term,
                     const NoiseDraws& d, const diffusion::DiffusionSchedule& sched, const char* name) {
  LossBreakdown out;
  out.total = torch::nn::functional::softplus(-arg).mean();
  if (!std::isfinite(out.total.item<double>())) {
    throw NumericError(std::string(name) + ": non-finite loss at step " + std::to_string(d.t[0].item<int64_t>()));
  }
  out.argument = arg.detach();
  out.csi_term = pref_term.detach().mean().item<double>();
  out.far_preservation_term = preserve_term.detach().mean().item<double>();
  const auto a = out.argument.to(torch::kFloat64);
  const double n = static_cast<double>(a.numel());
  out.implicit_accuracy =
      ((a > 0).sum().item<double>() + 0.5 * (a == 0).sum().item<double>()) / n;
  out.lambda_min = std::numeric_limits<double>::infinity();
  out.lambda_max = -std::numeric_limits<double>::infinity();
  double sum = 0.0;
  for (int64_t i = 0; i < d.t.numel(); ++i) {
    const double l = sched.snr(d.t[i].item<int64_t>());
    sum += l;
    out.lambda_min = std::min(out.lambda_min, l);
    out.lambda_max = std::max(out.lambda_max, l);
  }
  out.lambda_mean = sum / static_cast<double>(d.t.numel());
  return out;
}

}  // namespace

LossBreakdown dpo_loss_at(DenoiserModule& theta, DenoiserModule& ref, const PairBatch& batch,
                          const diffusion::DiffusionSchedule& sched, const AlignmentConfig& cfg,
                          const NoiseDraws& draws) {
  cfg.validate();
  check_draws(batch, draws);
  auto tw = branch_error(theta, batch.y_win, batch.condition, sched, draws.t, draws.eps_w);
  auto tl = branch_error(theta, batch.y_lose, batch.condition, sched, draws.t, draws.eps_l);
  auto rw = frozen_error(ref, batch.y_win, batch.condition, sched, draws.t, draws.eps_w);
  auto rl = frozen_error(ref, batch.y_lose, batch.condition, sched, draws.t, draws.eps_l);
  auto term = cfg.beta_td * ((tw - rw) - (tl - rl));
  auto arg = -term;
  return finish(arg, term, torch::zeros_like(term), draws, sched, "dpo_loss");
}

LossBreakdown dpo_loss(DenoiserModule& theta, DenoiserModule& ref, const PairBatch& batch,
                       const diffusion::DiffusionSchedule& sched, const AlignmentConfig& cfg, torch::Generator& gen) {
  return dpo_loss_at(theta, ref, batch, sched, cfg, draw_noise(batch, sched, gen));
}

LossBreakdown spo_loss_at(DenoiserModule& pi_beta, DenoiserModule& pi_alpha, DenoiserModule& pi0,
                          const PairBatch& batch, const diffusion::DiffusionSchedule& sched, const AlignmentConfig& cfg,
                          const NoiseDraws& draws) {
  cfg.validate();
  if (batch.metric != preference::Metric::csi) throw ConfigError("spo_loss: pairs must be ranked by CSI");
  check_draws(batch, draws);
  auto bw = branch_error(pi_beta, batch.y_win, batch.condition, sched, draws.t, draws.eps_w);
  auto bl = branch_error(pi_beta, batch.y_lose, batch.condition, sched, draws.t, draws.eps_l);
  auto aw = frozen_error(pi_alpha, batch.y_win, batch.condition, sched, draws.t, draws.eps_w);
  auto al = frozen_error(pi_alpha, batch.y_lose, batch.condition, sched, draws.t, draws.eps_l);
  auto ow = frozen_error(pi0, batch.y_win, batch.condition, sched, draws.t, draws.eps_w);
  auto ol = frozen_error(pi0, batch.y_lose, batch.condition, sched, draws.t, draws.eps_l);
  auto a_term = cfg.beta_td * ((bw - aw) - (bl - al));
  auto b_term = cfg.alpha_far * cfg.beta_td * ((aw - ow) - (al - ol));
  auto arg = -a_term + b_term;
  return finish(arg, a_term, b_term, draws, sched, "spo_loss");
}

LossBreakdown spo_loss(DenoiserModule& pi_beta, DenoiserModule& pi_alpha, DenoiserModule& pi0, const PairBatch& batch,
                       const diffusion::DiffusionSchedule& sched, const AlignmentConfig& cfg, torch::Generator& gen) {
  return spo_loss_at(pi_beta, pi_alpha, pi0, batch, sched, cfg, draw_noise(batch, sched, gen));
}

LossBreakdown spo_loss(PolicyCheckpoint& pi_beta, const PolicyCheckpoint& pi_alpha, const PolicyCheckpoint& pi0,
                       const PairBatch& batch, const diffusion::DiffusionSchedule& sched, const AlignmentConfig& cfg,
                       torch::Generator& gen) {
  if (pi0.role != PolicyRole::base) throw ConfigError("spo_loss: reference policy is not the base policy (pi0)");
  if (pi_alpha.role != PolicyRole::far_aligned) throw ConfigError("spo_loss: pi_alpha is not FAR-aligned");
  return spo_loss(*pi_beta.model, *pi_alpha.model, *pi0.model, batch, sched, cfg, gen);
}

std::string_view to_string(Stage stage) { return stage == Stage::far_align ? "far" : "csi"; }

Stage parse_stage(std::string_view name) {
  if (name == "far" || name == "far_align") return Stage::far_align;
  if (name == "csi" || name == "csi_align") return Stage::csi_align;
  throw ParameterError("unknown alignment stage '" + std::string(name) + "'");
}

PolicyCheckpoint run_stage(Stage stage, const PolicyTriple& triple, const preference::PairArchive& archive,
                           const AlignmentConfig& cfg, const diffusion::DiffusionSchedule& sched,
                           const std::optional<std::filesystem::path>& log_path) {
  cfg.validate();
  if (!triple.pi0.model) throw ConfigError("run_stage: missing pi0");
  if (triple.pi0.role != PolicyRole::base) throw ConfigError("run_stage: pi0 checkpoint has role " +
                                                             std::string(to_string(triple.pi0.role)));
  const bool far = stage == Stage::far_align;
  const auto& pairs = far ? archive.far_pairs : archive.csi_pairs;
  if (pairs.empty()) {
    throw ConfigError(std::string("run_stage: pair archive holds no ") + (far ? "FAR" : "CSI") + " pairs");
  }

  std::shared_ptr<denoiser::ConditionalUNet> trainable;
  if (far) {
    trainable = denoiser::clone_denoiser(*triple.pi0.model);
  } else {
    if (!triple.pi_alpha || !triple.pi_alpha->model) throw ConfigError("csi_align requires a pi_alpha checkpoint");
    if (triple.pi_alpha->role != PolicyRole::far_aligned) {
      throw ConfigError("csi_align: pi_alpha checkpoint has role " + std::string(to_string(triple.pi_alpha->role)));
    }
    if (triple.pi_alpha->config().to_json() != triple.pi0.config().to_json()) {
      throw ConfigError("csi_align: pi0 and pi_alpha architectures differ");
    }
    const auto& init = triple.pi_beta ? *triple.pi_beta : *triple.pi_alpha;
    if (init.config().to_json() != triple.pi0.config().to_json()) {
      throw ConfigError("csi_align: pi_beta architecture differs from pi0");
    }
    trainable = denoiser::clone_denoiser(*init.model);
  }
  for (const auto& p : pairs) {
    if (p.y_win.size(0) != trainable->config().target_frames || p.condition.size(0) != trainable->config().context_frames) {
      throw ConfigError("run_stage: pair shapes do not match the model (event " + p.event_id + ")");
    }
  }

  std::optional<std::ofstream> log;
  if (log_path) {
    if (log_path->has_parent_path()) std::filesystem::create_directories(log_path->parent_path());
    log.emplace(*log_path, std::ios::app);
    if (!*log) throw IoError("cannot open stage log: " + log_path->string());
  }

  trainable->train();
  torch::optim::AdamW opt(trainable->parameters(),
                          torch::optim::AdamWOptions(cfg.lr).betas({0.9, 0.95}).weight_decay(0.0));
  auto gen = make_generator(mix_seed(cfg.seed, far ? 1 : 2));
  const auto n_pairs = static_cast<int64_t>(pairs.size());
  const auto dtype = trainable->parameters().front().scalar_type();

  for (int64_t step = 0; step < cfg.steps; ++step) {
    auto idx = torch::randint(n_pairs, {cfg.batch_size}, gen, torch::kInt64);
    std::vector<preference::PreferencePair> chosen;
    for (int64_t i = 0; i < cfg.batch_size; ++i) chosen.push_back(pairs[static_cast<std::size_t>(idx[i].item<int64_t>())]);
    const auto batch = make_batch(chosen, dtype);
    const auto draws = draw_noise(batch, sched, gen);
    opt.zero_grad();
    LossBreakdown loss;
    try {
      loss = far ? dpo_loss_at(*trainable, *triple.pi0.model, batch, sched, cfg, draws)
                 : spo_loss_at(*trainable, *triple.pi_alpha->model, *triple.pi0.model, batch, sched, cfg, draws);
    } catch (const NumericError& e) {
      throw NumericError(std::string(far ? "far_align" : "csi_align") + " step " + std::to_string(step) + ": " +
                         e.what());
    }
    loss.total.backward();
    if (cfg.grad_clip > 0.0) torch::nn::utils::clip_grad_norm_(trainable->parameters(), cfg.grad_clip);
    opt.step();
    if (log) {
      const json rec = {{"step", step},
                        {"total", loss.total.item<double>()},
                        {"csi_term", loss.csi_term},
                        {"far_preservation_term", loss.far_preservation_term},
                        {"implicit_accuracy", loss.implicit_accuracy},
                        {"lambda_mean", loss.lambda_mean},
                        {"lambda_min", loss.lambda_min},
                        {"lambda_max", loss.lambda_max}};
      *log << rec.dump() << '\n';
    }
  }
  trainable->eval();

  PolicyCheckpoint out;
  out.model = trainable;
  out.role = far ? PolicyRole::far_aligned : PolicyRole::csi_aligned;
  out.stage = {{"stage", far ? "far_align" : "csi_align"},
               {"steps", cfg.steps},
               {"n_pairs", n_pairs},
               {"alignment", cfg.to_json()}};
  return out;
}

}  // namespace syncast::alignment
