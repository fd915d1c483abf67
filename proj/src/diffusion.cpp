#include "syncast/diffusion.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

#include "syncast/errors.hpp"
#include "syncast/rng.hpp"

namespace syncast::diffusion {

namespace {

void require_finite(const torch::Tensor& x, const char* what, int64_t step) {
  if (!torch::isfinite(x).all().item<bool>()) {
    throw NumericError(std::string(what) + ": non-finite value at step " + std::to_string(step));
  }
}

// Per-row coefficient tensor broadcastable against [B, ...].
torch::Tensor gather_coef(const std::vector<double>& table, const torch::Tensor& t, const torch::Tensor& like,
                          double (*fn)(double)) {
  auto idx = t.to(torch::kLong).contiguous();
  std::vector<double> vals(static_cast<std::size_t>(idx.numel()));
  const int64_t* ip = idx.data_ptr<int64_t>();
  for (int64_t i = 0; i < idx.numel(); ++i) {
    if (ip[i] < 0 || ip[i] >= static_cast<int64_t>(table.size())) {
      throw ParameterError("diffusion step " + std::to_string(ip[i]) + " out of range");
    }
    vals[static_cast<std::size_t>(i)] = fn(table[static_cast<std::size_t>(ip[i])]);
  }
  std::vector<int64_t> shape(static_cast<std::size_t>(like.dim()), 1);
  shape[0] = idx.numel();
  return torch::tensor(vals, torch::kFloat64).to(like.scalar_type()).reshape(shape);
}

double sqrt_of(double v) { return std::sqrt(v); }
double sqrt_one_minus(double v) { return std::sqrt(1.0 - v); }

struct RowNoise {
  std::vector<torch::Generator> gens;

  RowNoise(int64_t batch, uint64_t seed, std::span<const uint64_t> row_seeds) {
    if (!row_seeds.empty() && static_cast<int64_t>(row_seeds.size()) != batch) {
      throw ParameterError("row_seeds must have one entry per batch row");
    }
    for (int64_t b = 0; b < batch; ++b) {
      const uint64_t s = row_seeds.empty() ? mix_seed(seed, static_cast<uint64_t>(b)) : row_seeds[b];
      gens.push_back(make_generator(s));
    }
  }

  torch::Tensor draw(at::IntArrayRef row_shape, const torch::TensorOptions& opts) {
    std::vector<torch::Tensor> rows;
    rows.reserve(gens.size());
    for (auto& g : gens) rows.push_back(torch::randn(row_shape, g, opts));
    return torch::stack(rows);
  }
};

void check_context(const torch::Tensor& context, int64_t target_frames) {
  if (context.dim() != 4) throw ParameterError("context must be [B, T', H, W]");
  if (target_frames < 1) throw ParameterError("target_frames must be positive");
}

torch::TensorOptions float_opts(const torch::Tensor& context) {
  return torch::TensorOptions().dtype(context.scalar_type()).device(context.device());
}

}  // namespace

ScheduleKind parse_schedule_kind(std::string_view name) {
  if (name == "linear") return ScheduleKind::linear;
  if (name == "cosine") return ScheduleKind::cosine;
  throw ParameterError("unknown schedule kind '" + std::string(name) + "'");
}

std::string_view to_string(ScheduleKind kind) { return kind == ScheduleKind::linear ? "linear" : "cosine"; }

DiffusionSchedule make_schedule(int64_t steps, ScheduleKind kind, double beta_min, double beta_max) {
  if (steps < 2) throw ParameterError("diffusion schedule needs at least 2 steps");
  if (!(beta_min > 0.0 && beta_min < beta_max && beta_max < 1.0)) {
    throw ParameterError("beta range must satisfy 0 < beta_min < beta_max < 1");
  }
  DiffusionSchedule s;
  s.steps = steps;
  s.beta.resize(static_cast<std::size_t>(steps));
  if (kind == ScheduleKind::linear) {
    for (int64_t t = 0; t < steps; ++t) {
      s.beta[t] = beta_min + (beta_max - beta_min) * static_cast<double>(t) / static_cast<double>(steps - 1);
    }
  } else {
    constexpr double offset = 0.008;
    auto f = [&](double u) {
      const double c = std::cos((u + offset) / (1.0 + offset) * std::numbers::pi / 2.0);
      return c * c;
    };
    for (int64_t t = 0; t < steps; ++t) {
      const double a0 = f(static_cast<double>(t) / static_cast<double>(steps));
      const double a1 = f(static_cast<double>(t + 1) / static_cast<double>(steps));
      s.beta[t] = std::clamp(1.0 - a1 / a0, beta_min, beta_max);
    }
  }
  s.alpha_bar.resize(s.beta.size());
  s.sigma.resize(s.beta.size());
  double prod = 1.0;
  for (std::size_t t = 0; t < s.beta.size(); ++t) {
    prod *= 1.0 - s.beta[t];
    s.alpha_bar[t] = prod;
    s.sigma[t] = std::sqrt(s.beta[t]);
  }
  return s;
}

NoisySample forward_noise(const torch::Tensor& y0, const torch::Tensor& t, const torch::Tensor& eps,
                          const DiffusionSchedule& sched) {
  if (!y0.sizes().equals(eps.sizes())) throw ParameterError("forward_noise: y0 and eps shapes differ");
  if (t.dim() != 1 || t.size(0) != y0.size(0)) throw ParameterError("forward_noise: need one step per batch row");
  auto a = gather_coef(sched.alpha_bar, t, y0, &sqrt_of);
  auto b = gather_coef(sched.alpha_bar, t, y0, &sqrt_one_minus);
  return NoisySample{a * y0 + b * eps, t.to(torch::kLong), eps};
}

NoisySample forward_noise(const torch::Tensor& y0, int64_t t, const torch::Tensor& eps,
                          const DiffusionSchedule& sched) {
  if (!y0.sizes().equals(eps.sizes())) throw ParameterError("forward_noise: y0 and eps shapes differ");
  if (t < 0 || t >= sched.steps) throw ParameterError("forward_noise: step out of range");
  const double ab = sched.alpha_bar[static_cast<std::size_t>(t)];
  return NoisySample{std::sqrt(ab) * y0 + std::sqrt(1.0 - ab) * eps, torch::tensor({t}, torch::kLong), eps};
}

torch::Tensor to_model_space(const torch::Tensor& y) { return y * 2.0 - 1.0; }
torch::Tensor from_model_space(const torch::Tensor& x) { return ((x + 1.0) * 0.5).clamp(0.0, 1.0); }

torch::Tensor sample_steps(int64_t batch, const DiffusionSchedule& sched, torch::Generator& gen) {
  return torch::randint(0, sched.steps, {batch}, gen, torch::kLong);
}

torch::Tensor ddpm_loss_at(DenoiserModule& model, const torch::Tensor& y0, const torch::Tensor& context,
                           const DiffusionSchedule& sched, const torch::Tensor& t, const torch::Tensor& eps) {
  auto noisy = forward_noise(y0, t, eps, sched);
  auto pred = model.forward(noisy.y_t, t.to(y0.scalar_type()), context);
  if (!torch::isfinite(pred).all().item<bool>()) {
    throw NumericError("ddpm_loss: non-finite model output at step " + std::to_string(t[0].item<int64_t>()));
  }
  return (eps - pred).pow(2).mean();
}

torch::Tensor ddpm_loss(DenoiserModule& model, const torch::Tensor& y0, const torch::Tensor& context,
                        const DiffusionSchedule& sched, torch::Generator& gen) {
  auto t = sample_steps(y0.size(0), sched, gen);
  auto eps = torch::randn(y0.sizes(), gen, y0.options());
  return ddpm_loss_at(model, y0, context, sched, t, eps);
}

torch::Tensor flow_match_loss_at(DenoiserModule& model, const torch::Tensor& y0, const torch::Tensor& context,
                                 const torch::Tensor& t, const torch::Tensor& eps) {
  if (!y0.sizes().equals(eps.sizes())) throw ParameterError("flow_match_loss: y0 and eps shapes differ");
  std::vector<int64_t> shape(static_cast<std::size_t>(y0.dim()), 1);
  shape[0] = y0.size(0);
  auto tt = t.to(y0.scalar_type()).reshape(shape);
  auto x_t = (1.0 - tt) * eps + tt * y0;
  auto pred = model.forward(x_t, t.to(y0.scalar_type()), context);
  if (!torch::isfinite(pred).all().item<bool>()) {
    throw NumericError("flow_match_loss: non-finite model output at t=" + std::to_string(t[0].item<double>()));
  }
  return ((y0 - eps) - pred).pow(2).mean();
}

torch::Tensor flow_match_loss(DenoiserModule& model, const torch::Tensor& y0, const torch::Tensor& context,
                              torch::Generator& gen) {
  auto t = torch::rand({y0.size(0)}, gen, y0.options());
  auto eps = torch::randn(y0.sizes(), gen, y0.options());
  return flow_match_loss_at(model, y0, context, t, eps);
}

Sampler parse_sampler(std::string_view name) {
  if (name == "ddpm") return Sampler::ddpm;
  if (name == "ddim") return Sampler::ddim;
  if (name == "euler_flow") return Sampler::euler_flow;
  throw ParameterError("unknown sampler '" + std::string(name) + "'");
}

std::string_view to_string(Sampler sampler) {
  switch (sampler) {
    case Sampler::ddpm: return "ddpm";
    case Sampler::ddim: return "ddim";
    case Sampler::euler_flow: return "euler_flow";
  }
  return "ddim";
}

torch::Tensor ddpm_sample(DenoiserModule& model, const torch::Tensor& context, int64_t target_frames,
                          const DiffusionSchedule& sched, const TrajectoryConfig& config,
                          std::span<const uint64_t> row_seeds) {
  if (config.sampler != Sampler::ddpm) throw ParameterError("ddpm_sample requires sampler == ddpm");
  check_context(context, target_frames);
  torch::NoGradGuard no_grad;
  const int64_t batch = context.size(0);
  const auto opts = float_opts(context);
  const std::vector<int64_t> row_shape{target_frames, context.size(2), context.size(3)};
  RowNoise noise(batch, config.seed, row_seeds);
  auto y = noise.draw(row_shape, opts);
  for (int64_t t = sched.steps - 1; t >= 0; --t) {
    const auto st = static_cast<std::size_t>(t);
    auto tt = torch::full({batch}, static_cast<double>(t), opts);
    auto eps = model.forward(y, tt, context);
    const double beta = sched.beta[st];
    y = (y - (beta / std::sqrt(1.0 - sched.alpha_bar[st])) * eps) / std::sqrt(1.0 - beta);
    if (t > 0) y = y + sched.sigma[st] * noise.draw(row_shape, opts);
    require_finite(y, "ddpm_sample", t);
  }
  return y;
}

std::vector<int64_t> ddim_timesteps(int64_t total_steps, int64_t n_steps) {
  if (n_steps < 1 || n_steps > total_steps) {
    throw ParameterError("ddim n_steps must be in [1, " + std::to_string(total_steps) + "], got " +
                         std::to_string(n_steps));
  }
  std::vector<int64_t> steps;
  steps.reserve(static_cast<std::size_t>(n_steps));
  for (int64_t i = 0; i < n_steps; ++i) steps.push_back(i * total_steps / n_steps);
  return steps;
}

torch::Tensor ddim_sample(DenoiserModule& model, const torch::Tensor& context, int64_t target_frames,
                          const DiffusionSchedule& sched, const TrajectoryConfig& config,
                          std::span<const uint64_t> row_seeds) {
  if (config.sampler != Sampler::ddim) throw ParameterError("ddim_sample requires sampler == ddim");
  if (config.eta < 0.0) throw ParameterError("ddim eta must be non-negative");
  check_context(context, target_frames);
  const auto steps = ddim_timesteps(sched.steps, config.n_steps);
  torch::NoGradGuard no_grad;
  const int64_t batch = context.size(0);
  const auto opts = float_opts(context);
  const std::vector<int64_t> row_shape{target_frames, context.size(2), context.size(3)};
  RowNoise noise(batch, config.seed, row_seeds);
  auto y = noise.draw(row_shape, opts);
  for (auto i = static_cast<int64_t>(steps.size()) - 1; i >= 0; --i) {
    const int64_t t = steps[static_cast<std::size_t>(i)];
    const double ab = sched.alpha_bar[static_cast<std::size_t>(t)];
    const double ab_prev = i > 0 ? sched.alpha_bar[static_cast<std::size_t>(steps[static_cast<std::size_t>(i - 1)])] : 1.0;
    auto tt = torch::full({batch}, static_cast<double>(t), opts);
    auto eps = model.forward(y, tt, context);
    auto x0 = (y - std::sqrt(1.0 - ab) * eps) / std::sqrt(ab);
    if (config.clip_denoised) {
      x0 = x0.clamp(-1.0, 1.0);
      eps = (y - std::sqrt(ab) * x0) / std::sqrt(1.0 - ab);
    }
    const double sigma = config.eta * std::sqrt((1.0 - ab_prev) / (1.0 - ab)) * std::sqrt(1.0 - ab / ab_prev);
    const double dir = std::sqrt(std::max(0.0, 1.0 - ab_prev - sigma * sigma));
    y = std::sqrt(ab_prev) * x0 + dir * eps;
    if (sigma > 0.0) y = y + sigma * noise.draw(row_shape, opts);
    require_finite(y, "ddim_sample", t);
  }
  return y;
}

torch::Tensor euler_flow_sample(DenoiserModule& model, const torch::Tensor& context, int64_t target_frames,
                                int64_t n_steps, uint64_t seed, std::span<const uint64_t> row_seeds) {
  if (n_steps < 1) throw ParameterError("euler_flow_sample needs n_steps >= 1");
  check_context(context, target_frames);
  torch::NoGradGuard no_grad;
  const int64_t batch = context.size(0);
  const auto opts = float_opts(context);
  RowNoise noise(batch, seed, row_seeds);
  auto x = noise.draw({target_frames, context.size(2), context.size(3)}, opts);
  const double dt = 1.0 / static_cast<double>(n_steps);
  for (int64_t i = 0; i < n_steps; ++i) {
    auto tt = torch::full({batch}, static_cast<double>(i) * dt, opts);
    x = x + dt * model.forward(x, tt, context);
    require_finite(x, "euler_flow_sample", i);
  }
  return x;
}

torch::Tensor sample(DenoiserModule& model, const torch::Tensor& context, int64_t target_frames,
                     const DiffusionSchedule& sched, const TrajectoryConfig& config,
                     std::span<const uint64_t> row_seeds) {
  switch (config.sampler) {
    case Sampler::ddpm: return ddpm_sample(model, context, target_frames, sched, config, row_seeds);
    case Sampler::ddim: return ddim_sample(model, context, target_frames, sched, config, row_seeds);
    case Sampler::euler_flow:
      return euler_flow_sample(model, context, target_frames, config.n_steps, config.seed, row_seeds);
  }
  throw ParameterError("unknown sampler");
}

}  // namespace syncast::diffusion
