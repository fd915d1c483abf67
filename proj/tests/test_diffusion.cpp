#include <doctest.h>

#include <cmath>

#include "support.hpp"
#include "syncast/diffusion.hpp"
#include "syncast/errors.hpp"

using namespace syncast;
using namespace syncast::diffusion;

namespace {

class ZeroModel : public DenoiserModule {
 public:
  torch::Tensor forward(const torch::Tensor& y, const torch::Tensor&, const torch::Tensor&) override {
    return torch::zeros_like(y);
  }
  Prediction prediction() const override { return Prediction::epsilon; }
};

// Exact posterior-mean predictor for data concentrated on the single point `target`.
class DeltaModel : public DenoiserModule {
 public:
  DeltaModel(torch::Tensor target, const DiffusionSchedule* sched, Prediction p)
      : target_(std::move(target)), sched_(sched), p_(p) {}

  torch::Tensor forward(const torch::Tensor& y, const torch::Tensor& t, const torch::Tensor&) override {
    auto x = target_.expand_as(y);
    if (p_ == Prediction::velocity) {
      auto s = t.to(y.scalar_type()).view({-1, 1, 1, 1});
      return (x - y) / (1.0 - s);
    }
    std::vector<torch::Tensor> rows;
    for (int64_t b = 0; b < y.size(0); ++b) {
      const double ab = sched_->alpha_bar[static_cast<std::size_t>(t[b].item<double>())];
      rows.push_back((y[b] - std::sqrt(ab) * x[b]) / std::sqrt(1.0 - ab));
    }
    return torch::stack(rows);
  }
  Prediction prediction() const override { return p_; }

 private:
  torch::Tensor target_;
  const DiffusionSchedule* sched_;
  Prediction p_;
};

}  // namespace

TEST_CASE("linear schedule matches its closed form") {
  const auto s = make_schedule(1000);
  double prod = 1.0;
  for (int t = 0; t < 1000; ++t) {
    const double beta = 1e-4 + (2e-2 - 1e-4) * t / 999.0;
    prod *= 1.0 - beta;
    CHECK(s.beta[t] == doctest::Approx(beta).epsilon(1e-12));
    CHECK(s.alpha_bar[t] == doctest::Approx(prod).epsilon(1e-10));
    CHECK(s.sigma[t] == doctest::Approx(std::sqrt(beta)));
  }
  CHECK(s.snr(10) == doctest::Approx(s.alpha_bar[10] / (1.0 - s.alpha_bar[10])));
}

TEST_CASE("cosine schedule stays inside the beta range and decays") {
  const auto s = make_schedule(200, ScheduleKind::cosine);
  for (int t = 0; t < 200; ++t) {
    CHECK(s.beta[t] >= 1e-4);
    CHECK(s.beta[t] <= 2e-2);
    if (t > 0) CHECK(s.alpha_bar[t] < s.alpha_bar[t - 1]);
  }
  CHECK_THROWS_AS(make_schedule(1), ParameterError);
  CHECK_THROWS_AS(make_schedule(10, ScheduleKind::linear, 0.1, 0.01), ParameterError);
}

TEST_CASE("forward noising uses sqrt(alpha_bar)") {
  const auto s = make_schedule(100);
  auto gen = make_generator(1);
  auto y0 = torch::rand({3, 2, 4, 4}, gen, torch::kFloat64);
  auto eps = torch::randn({3, 2, 4, 4}, gen, torch::kFloat64);
  auto t = torch::tensor({0, 50, 99}, torch::kLong);
  auto out = forward_noise(y0, t, eps, s);
  for (int b = 0; b < 3; ++b) {
    const double ab = s.alpha_bar[t[b].item<int64_t>()];
    CHECK(torch::allclose(out.y_t[b], std::sqrt(ab) * y0[b] + std::sqrt(1 - ab) * eps[b]));
  }
  CHECK(torch::allclose(forward_noise(y0, 50, eps, s).y_t, std::sqrt(s.alpha_bar[50]) * y0 +
                                                                  std::sqrt(1 - s.alpha_bar[50]) * eps));
  CHECK_THROWS_AS(forward_noise(y0, torch::tensor({0, 1, 100}, torch::kLong), eps, s), ParameterError);
}

TEST_CASE("forward-process moments by Monte Carlo") {
  const auto s = make_schedule(1000);
  auto gen = make_generator(99);
  const int64_t n = 20000;
  auto y0 = torch::full({n, 1, 1, 1}, 0.4, torch::kFloat64);
  auto eps = torch::randn({n, 1, 1, 1}, gen, torch::kFloat64);
  const int64_t t = 300;
  auto y = forward_noise(y0, t, eps, s).y_t.flatten();
  const double ab = s.alpha_bar[t];
  const double se_mean = std::sqrt((1 - ab) / n);
  CHECK(std::abs(y.mean().item<double>() - std::sqrt(ab) * 0.4) < 3 * se_mean);
  CHECK(std::abs(y.var().item<double>() - (1 - ab)) < 3 * (1 - ab) * std::sqrt(2.0 / (n - 1)));
}

TEST_CASE("model space mapping") {
  auto y = torch::tensor({0.0, 0.25, 1.0}, torch::kFloat64);
  CHECK(torch::allclose(to_model_space(y), torch::tensor({-1.0, -0.5, 1.0}, torch::kFloat64)));
  CHECK(torch::allclose(from_model_space(to_model_space(y)), y));
  CHECK(from_model_space(torch::tensor({3.0})).item<double>() == 1.0);
}

TEST_CASE("ddim sub-schedule is evenly strided") {
  const auto st = ddim_timesteps(1000, 20);
  REQUIRE(st.size() == 20);
  for (int i = 0; i < 20; ++i) CHECK(st[i] == 50 * i);
  CHECK(ddim_timesteps(10, 10).back() == 9);
  CHECK_THROWS_AS(ddim_timesteps(10, 11), ParameterError);
}

TEST_CASE("ddpm ancestral step against a hand-rolled chain") {
  const auto s = make_schedule(2, ScheduleKind::linear, 0.1, 0.3);
  ZeroModel model;
  TrajectoryConfig cfg;
  cfg.sampler = Sampler::ddpm;
  cfg.seed = 5;
  auto ctx = torch::zeros({1, 1, 2, 2});
  auto out = ddpm_sample(model, ctx, 1, s, cfg);

  auto gen = make_generator(mix_seed(5, 0));
  auto y = torch::randn({1, 2, 2}, gen);
  auto z = torch::randn({1, 2, 2}, gen);
  y = y / std::sqrt(1 - 0.3) + std::sqrt(0.3) * z;
  y = y / std::sqrt(1 - 0.1);
  CHECK(torch::allclose(out[0], y, 1e-6, 1e-6));
}

TEST_CASE("deterministic samplers recover a point mass exactly") {
  const auto s = make_schedule(1000);
  auto target = torch::rand({1, 2, 4, 4}, torch::kFloat64) * 1.6 - 0.8;
  auto ctx = torch::zeros({3, 1, 4, 4}, torch::kFloat64);

  DeltaModel eps_model(target, &s, Prediction::epsilon);
  TrajectoryConfig cfg;
  cfg.n_steps = 25;
  auto x = ddim_sample(eps_model, ctx, 2, s, cfg);
  CHECK(torch::allclose(x, target.expand_as(x), 1e-6, 1e-6));

  DeltaModel flow_model(target, &s, Prediction::velocity);
  auto f = euler_flow_sample(flow_model, ctx, 2, 10, 3);
  CHECK(torch::allclose(f, target.expand_as(f), 1e-9, 1e-9));
}

TEST_CASE("a row's trajectory does not depend on the other rows") {
  test::LinearStub model(2, 1, 8);
  const auto s = make_schedule(50);
  TrajectoryConfig cfg;
  cfg.n_steps = 10;
  cfg.eta = 1.0;
  auto gen = make_generator(2);
  auto ctx = torch::rand({2, 1, 4, 4}, gen);
  std::vector<uint64_t> seeds{11, 12};
  auto both = ddim_sample(model, ctx, 2, s, cfg, seeds);
  std::vector<uint64_t> one{12};
  auto single = ddim_sample(model, ctx.narrow(0, 1, 1), 2, s, cfg, one);
  CHECK(torch::allclose(both[1], single[0], 1e-6, 1e-6));
  CHECK_FALSE(torch::allclose(both[0], both[1]));
}

TEST_CASE("same seed, same output; different seed, different output") {
  test::LinearStub model(2, 1, 8);
  const auto s = make_schedule(30);
  auto ctx = torch::rand({2, 1, 4, 4});
  for (auto sampler : {Sampler::ddpm, Sampler::ddim}) {
    TrajectoryConfig cfg;
    cfg.sampler = sampler;
    cfg.n_steps = 5;
    cfg.seed = 4;
    auto a = sample(model, ctx, 2, s, cfg);
    auto b = sample(model, ctx, 2, s, cfg);
    CHECK(torch::equal(a, b));
    cfg.seed = 5;
    CHECK_FALSE(torch::equal(a, sample(model, ctx, 2, s, cfg)));
  }
}

TEST_CASE("ddpm loss is the mean squared noise error") {
  test::MlpStub model(2, 1, 6, 3);
  const auto s = make_schedule(100);
  auto gen = make_generator(4);
  auto y0 = torch::rand({3, 2, 4, 4}, gen);
  auto ctx = torch::rand({3, 1, 4, 4}, gen);
  auto eps = torch::randn({3, 2, 4, 4}, gen);
  auto t = torch::tensor({1, 40, 99}, torch::kLong);
  auto noisy = forward_noise(y0, t, eps, s);
  auto expected = (eps - model.forward(noisy.y_t, t.to(torch::kFloat32), ctx)).pow(2).mean();
  CHECK(ddpm_loss_at(model, y0, ctx, s, t, eps).item<double>() == doctest::Approx(expected.item<double>()));
}

TEST_CASE("ddpm and flow-matching gradients match central differences") {
  test::MlpStub model(2, 1, 5, 21);
  model.to(torch::kFloat64);
  const auto s = make_schedule(100);
  auto gen = make_generator(6);
  auto y0 = torch::rand({2, 2, 3, 3}, gen, torch::kFloat64);
  auto ctx = torch::rand({2, 1, 3, 3}, gen, torch::kFloat64);
  auto eps = torch::randn({2, 2, 3, 3}, gen, torch::kFloat64);
  auto t = torch::tensor({7, 63}, torch::kLong);
  auto g = test::check_gradient(model, [&] { return ddpm_loss_at(model, y0, ctx, s, t, eps); });
  CHECK(g.rel_error < 1e-3);
  auto tf = torch::tensor({0.2, 0.7}, torch::kFloat64);
  auto gf = test::check_gradient(model, [&] { return flow_match_loss_at(model, y0, ctx, tf, eps); });
  CHECK(gf.rel_error < 1e-3);
}

TEST_CASE("non-finite model output names the step") {
  class NanModel : public DenoiserModule {
   public:
    torch::Tensor forward(const torch::Tensor& y, const torch::Tensor&, const torch::Tensor&) override {
      return torch::full_like(y, NAN);
    }
    Prediction prediction() const override { return Prediction::epsilon; }
  } model;
  const auto s = make_schedule(100);
  auto y0 = torch::zeros({1, 1, 2, 2});
  try {
    ddpm_loss_at(model, y0, y0, s, torch::tensor({17}, torch::kLong), torch::zeros_like(y0));
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("17") != std::string::npos);
  }
}
