#include <doctest.h>

#include <cmath>
#include <fstream>

#include "support.hpp"
#include "syncast/alignment.hpp"
#include "syncast/errors.hpp"

using namespace syncast;
using namespace syncast::alignment;

namespace {

PairBatch random_batch(uint64_t seed, int64_t b, int64_t k, int64_t tc, int64_t hw,
                       torch::Dtype dtype = torch::kFloat64) {
  auto gen = make_generator(seed);
  PairBatch batch;
  batch.condition = torch::rand({b, tc, hw, hw}, gen, dtype);
  batch.y_win = torch::rand({b, k, hw, hw}, gen, dtype) * 2 - 1;
  batch.y_lose = torch::rand({b, k, hw, hw}, gen, dtype) * 2 - 1;
  batch.metric = preference::Metric::csi;
  return batch;
}

// Per-row mean squared error written out independently of the library.
torch::Tensor row_error(DenoiserModule& m, const torch::Tensor& y0, const torch::Tensor& ctx,
                        const diffusion::DiffusionSchedule& s, const torch::Tensor& t, const torch::Tensor& eps) {
  std::vector<torch::Tensor> ab;
  for (int64_t i = 0; i < t.numel(); ++i) ab.push_back(torch::full({1}, s.alpha_bar[t[i].item<int64_t>()], y0.options()));
  auto a = torch::cat(ab).view({-1, 1, 1, 1});
  auto yt = a.sqrt() * y0 + (1 - a).sqrt() * eps;
  return (eps - m.forward(yt, t.to(y0.scalar_type()), ctx)).pow(2).mean({1, 2, 3});
}

}  // namespace

TEST_CASE("DPO with identical policies is exactly log 2") {
  test::MlpStub theta(2, 1, 6, 1), ref(2, 1, 6, 1);
  theta.to(torch::kFloat64);
  ref.to(torch::kFloat64);
  const auto s = diffusion::make_schedule(1000);
  AlignmentConfig cfg;
  auto gen = make_generator(2);
  for (int i = 0; i < 10; ++i) {
    auto batch = random_batch(i, 3, 2, 1, 4);
    auto out = dpo_loss(theta, ref, batch, s, cfg, gen);
    CHECK(out.total.item<double>() == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    CHECK(out.implicit_accuracy == 0.5);
  }
}

TEST_CASE("DPO value matches the written-out objective") {
  test::MlpStub theta(2, 1, 6, 3), ref(2, 1, 6, 4);
  theta.to(torch::kFloat64);
  ref.to(torch::kFloat64);
  const auto s = diffusion::make_schedule(1000);
  AlignmentConfig cfg;
  cfg.beta_td = 50.0;
  auto batch = random_batch(5, 4, 2, 1, 4);
  auto gen = make_generator(6);
  auto draws = draw_noise(batch, s, gen);
  auto out = dpo_loss_at(theta, ref, batch, s, cfg, draws);
  auto tw = row_error(theta, batch.y_win, batch.condition, s, draws.t, draws.eps_w);
  auto tl = row_error(theta, batch.y_lose, batch.condition, s, draws.t, draws.eps_l);
  auto rw = row_error(ref, batch.y_win, batch.condition, s, draws.t, draws.eps_w);
  auto rl = row_error(ref, batch.y_lose, batch.condition, s, draws.t, draws.eps_l);
  auto arg = -50.0 * ((tw - rw) - (tl - rl));
  auto expected = -torch::log(torch::sigmoid(arg)).mean();
  CHECK(out.total.item<double>() == doctest::Approx(expected.item<double>()).epsilon(1e-10));
  CHECK(torch::allclose(out.argument, arg.detach()));
}

TEST_CASE("a policy that denoises the winner better lowers the loss") {
  // theta predicts eps_w exactly on the noised winner and zero elsewhere; ref always predicts zero.
  class Branching : public DenoiserModule {
   public:
    torch::Tensor key, value;
    torch::Tensor forward(const torch::Tensor& y, const torch::Tensor&, const torch::Tensor&) override {
      return torch::equal(y, key) ? value : torch::zeros_like(y);
    }
    Prediction prediction() const override { return Prediction::epsilon; }
  } theta, ref;
  const auto s = diffusion::make_schedule(1000);
  auto batch = random_batch(9, 2, 2, 1, 4);
  auto gen = make_generator(1);
  auto draws = draw_noise(batch, s, gen);
  theta.key = diffusion::forward_noise(batch.y_win, draws.t, draws.eps_w, s).y_t;
  theta.value = draws.eps_w;
  ref.key = torch::zeros({1});
  auto out = dpo_loss_at(theta, ref, batch, s, AlignmentConfig{}, draws);
  CHECK(out.total.item<double>() < std::log(2.0));
  CHECK(out.implicit_accuracy == 1.0);
}

TEST_CASE("SPO reduces to DPO against pi_alpha when alpha is zero") {
  test::MlpStub beta(2, 1, 6, 11), alpha(2, 1, 6, 12), base(2, 1, 6, 13);
  for (auto* m : {&beta, &alpha, &base}) m->to(torch::kFloat64);
  const auto s = diffusion::make_schedule(1000);
  AlignmentConfig cfg;
  cfg.alpha_far = 0.0;
  auto batch = random_batch(14, 3, 2, 1, 4);
  auto gen = make_generator(15);
  auto draws = draw_noise(batch, s, gen);

  beta.zero_grad();
  auto spo = spo_loss_at(beta, alpha, base, batch, s, cfg, draws);
  spo.total.backward();
  std::vector<torch::Tensor> g_spo;
  for (auto& p : beta.parameters()) g_spo.push_back(p.grad().clone());

  beta.zero_grad();
  auto dpo = dpo_loss_at(beta, alpha, batch, s, cfg, draws);
  dpo.total.backward();
  CHECK(spo.total.item<double>() == doctest::Approx(dpo.total.item<double>()).epsilon(1e-12));
  auto params = beta.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) CHECK(torch::allclose(g_spo[i], params[i].grad(), 1e-10, 1e-12));
}

TEST_CASE("the FAR-preservation term shifts the argument but carries no gradient") {
  test::MlpStub beta(2, 1, 6, 21), alpha(2, 1, 6, 22), base(2, 1, 6, 23);
  for (auto* m : {&beta, &alpha, &base}) m->to(torch::kFloat64);
  const auto s = diffusion::make_schedule(1000);
  auto batch = random_batch(24, 3, 2, 1, 4);
  auto gen = make_generator(25);
  auto draws = draw_noise(batch, s, gen);
  AlignmentConfig a0, a1;
  a0.alpha_far = 0.0;
  a1.alpha_far = 1.0;
  auto l0 = spo_loss_at(beta, alpha, base, batch, s, a0, draws);
  auto l1 = spo_loss_at(beta, alpha, base, batch, s, a1, draws);
  auto bw = row_error(alpha, batch.y_win, batch.condition, s, draws.t, draws.eps_w) -
            row_error(base, batch.y_win, batch.condition, s, draws.t, draws.eps_w);
  auto bl = row_error(alpha, batch.y_lose, batch.condition, s, draws.t, draws.eps_l) -
            row_error(base, batch.y_lose, batch.condition, s, draws.t, draws.eps_l);
  auto shift = (1000.0 * (bw - bl)).detach();
  CHECK(torch::allclose(l1.argument - l0.argument, shift, 1e-8, 1e-10));

  // The shift is constant in theta, so the gradient is sigmoid(-arg) weighting of d(-arg)/d theta.
  beta.zero_grad();
  l1.total.backward();
  std::vector<torch::Tensor> g1;
  for (auto& p : beta.parameters()) g1.push_back(p.grad().clone());
  beta.zero_grad();
  auto tw = row_error(beta, batch.y_win, batch.condition, s, draws.t, draws.eps_w);
  auto tl = row_error(beta, batch.y_lose, batch.condition, s, draws.t, draws.eps_l);
  auto arg_theta = -1000.0 * (tw - tl);
  (torch::sigmoid(-l1.argument) * -arg_theta).mean().backward();
  auto params = beta.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) CHECK(torch::allclose(g1[i], params[i].grad(), 1e-8, 1e-10));
}

TEST_CASE("scaling beta scales the argument") {
  test::MlpStub theta(2, 1, 6, 31), ref(2, 1, 6, 32);
  theta.to(torch::kFloat64);
  ref.to(torch::kFloat64);
  const auto s = diffusion::make_schedule(1000);
  auto batch = random_batch(33, 3, 2, 1, 4);
  auto gen = make_generator(34);
  auto draws = draw_noise(batch, s, gen);
  AlignmentConfig c1, c3;
  c1.beta_td = 10.0;
  c3.beta_td = 30.0;
  auto a = dpo_loss_at(theta, ref, batch, s, c1, draws).argument;
  auto b = dpo_loss_at(theta, ref, batch, s, c3, draws).argument;
  CHECK(torch::allclose(b, 3.0 * a, 1e-12, 1e-14));
}

TEST_CASE("alignment gradients match central differences") {
  test::MlpStub theta(2, 1, 4, 41), ref(2, 1, 4, 42), base(2, 1, 4, 43);
  for (auto* m : {&theta, &ref, &base}) m->to(torch::kFloat64);
  const auto s = diffusion::make_schedule(1000);
  auto batch = random_batch(44, 2, 2, 1, 3);
  auto gen = make_generator(45);
  auto draws = draw_noise(batch, s, gen);
  AlignmentConfig cfg;
  cfg.beta_td = 20.0;
  auto g = test::check_gradient(theta, [&] { return dpo_loss_at(theta, ref, batch, s, cfg, draws).total; });
  CHECK(g.rel_error < 1e-3);
  auto g2 = test::check_gradient(theta, [&] { return spo_loss_at(theta, ref, base, batch, s, cfg, draws).total; });
  CHECK(g2.rel_error < 1e-3);
}

TEST_CASE("SPO checks metric and roles") {
  test::MlpStub m(2, 1, 4, 1);
  const auto s = diffusion::make_schedule(100);
  auto batch = random_batch(1, 1, 2, 1, 3, torch::kFloat32);
  batch.metric = preference::Metric::far;
  AlignmentConfig cfg;
  auto gen = make_generator(1);
  CHECK_THROWS_AS(spo_loss(m, m, m, batch, s, cfg, gen), ConfigError);

  auto net = denoiser::make_denoiser(test::tiny_unet_config(), 1);
  PolicyCheckpoint p0{net, PolicyRole::base, {}}, pa{net, PolicyRole::base, {}}, pb{net, PolicyRole::base, {}};
  auto b2 = random_batch(2, 1, 3, 2, 16, torch::kFloat32);
  CHECK_THROWS_AS(spo_loss(pb, pa, p0, b2, s, cfg, gen), ConfigError);
}

TEST_CASE("config validation") {
  AlignmentConfig c;
  c.beta_td = 0.0;
  CHECK_THROWS_AS(c.validate(), ParameterError);
  c = AlignmentConfig{};
  c.alpha_far = -1.0;
  CHECK_THROWS_AS(c.validate(), ParameterError);
  c = AlignmentConfig{};
  CHECK(AlignmentConfig::from_json(c.to_json()).to_json() == c.to_json());
}

TEST_CASE("velocity models are scored on the flow interpolant") {
  test::MlpStub m(2, 1, 4, 51, Prediction::velocity);
  m.to(torch::kFloat64);
  const auto s = diffusion::make_schedule(1000);
  auto batch = random_batch(52, 2, 2, 1, 3);
  auto t = torch::tensor({250, 750}, torch::kLong);
  auto eps = torch::randn_like(batch.y_win);
  auto err = branch_error(m, batch.y_win, batch.condition, s, t, eps);
  auto tt = torch::tensor({0.25, 0.75}, torch::kFloat64);
  auto x = (1 - tt.view({-1, 1, 1, 1})) * eps + tt.view({-1, 1, 1, 1}) * batch.y_win;
  auto expected = ((batch.y_win - eps) - m.forward(x, tt, batch.condition)).pow(2).mean({1, 2, 3});
  CHECK(torch::allclose(err, expected));
}

namespace {

preference::PairArchive tiny_archive(const denoiser::DenoiserConfig& c, int n) {
  preference::PairArchive a;
  auto gen = make_generator(77);
  for (int i = 0; i < n; ++i) {
    preference::PreferencePair p;
    p.event_id = "e" + std::to_string(i);
    p.condition = torch::rand({c.context_frames, c.height, c.width}, gen);
    p.y_win = torch::rand({c.target_frames, c.height, c.width}, gen);
    p.y_lose = torch::rand({c.target_frames, c.height, c.width}, gen);
    p.metric = preference::Metric::far;
    a.far_pairs.push_back(p);
    p.metric = preference::Metric::csi;
    a.csi_pairs.push_back(p);
  }
  return a;
}

}  // namespace

TEST_CASE("stage runs: identity at zero steps, frozen references, role markers") {
  auto c = test::tiny_unet_config();
  auto base = PolicyCheckpoint{denoiser::make_denoiser(c, 5), PolicyRole::base, {}};
  const auto s = diffusion::make_schedule(100);
  auto archive = tiny_archive(c, 3);
  AlignmentConfig cfg;
  cfg.steps = 0;
  PolicyTriple triple{base, std::nullopt, std::nullopt};
  auto same = run_stage(Stage::far_align, triple, archive, cfg, s);
  CHECK(denoiser::parameter_hash(*same.model) == denoiser::parameter_hash(*base.model));
  CHECK(same.role == PolicyRole::far_aligned);

  const auto h0 = denoiser::parameter_hash(*base.model);
  cfg.steps = 2;
  cfg.lr = 1e-3;
  test::TempDir dir("stage");
  auto pa = run_stage(Stage::far_align, triple, archive, cfg, s, dir.path() / "far.jsonl");
  CHECK(denoiser::parameter_hash(*pa.model) != h0);
  CHECK(denoiser::parameter_hash(*base.model) == h0);

  const auto ha = denoiser::parameter_hash(*pa.model);
  PolicyTriple t2{base, pa, std::nullopt};
  auto pb = run_stage(Stage::csi_align, t2, archive, cfg, s, dir.path() / "csi.jsonl");
  CHECK(pb.role == PolicyRole::csi_aligned);
  CHECK(denoiser::parameter_hash(*base.model) == h0);
  CHECK(denoiser::parameter_hash(*pa.model) == ha);
  CHECK(denoiser::parameter_hash(*pb.model) != ha);

  std::ifstream log(dir.path() / "csi.jsonl");
  std::string line;
  int lines = 0;
  while (std::getline(log, line)) {
    auto rec = nlohmann::json::parse(line);
    CHECK(rec.contains("implicit_accuracy"));
    CHECK(rec.contains("far_preservation_term"));
    ++lines;
  }
  CHECK(lines == 2);

  // Stage ordering and roles.
  CHECK_THROWS_AS(run_stage(Stage::csi_align, triple, archive, cfg, s), ConfigError);
  PolicyTriple wrong{base, base, std::nullopt};
  CHECK_THROWS_AS(run_stage(Stage::csi_align, wrong, archive, cfg, s), ConfigError);
  CHECK_THROWS_AS(run_stage(Stage::far_align, triple, preference::PairArchive{}, cfg, s), ConfigError);
}

TEST_CASE("a fresh policy has implicit accuracy one half") {
  auto c = test::tiny_unet_config();
  auto net = denoiser::make_denoiser(c, 8);
  auto copy = denoiser::clone_denoiser(*net);
  auto archive = tiny_archive(c, 4);
  auto batch = make_batch(archive.far_pairs);
  const auto s = diffusion::make_schedule(100);
  auto gen = make_generator(3);
  auto out = dpo_loss(*copy, *net, batch, s, AlignmentConfig{}, gen);
  CHECK(out.implicit_accuracy == 0.5);
  CHECK(out.total.item<double>() == doctest::Approx(std::log(2.0)).epsilon(1e-7));
  CHECK(out.lambda_min <= out.lambda_mean);
  CHECK(out.lambda_mean <= out.lambda_max);
}
