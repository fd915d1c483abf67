#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "syncast/errors.hpp"
#include "syncast/metrics.hpp"
#include "syncast/rng.hpp"

using namespace syncast;
using namespace syncast::metrics;

namespace {

struct Brute {
  int64_t h = 0, m = 0, f = 0, n = 0;
};

Brute brute_counts(const std::vector<double>& pred, const std::vector<double>& obs, double thr) {
  Brute b;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] >= thr, o = obs[i] >= thr;
    if (p && o) ++b.h;
    else if (!p && o) ++b.m;
    else if (p && !o) ++b.f;
    else ++b.n;
  }
  return b;
}

std::vector<double> values(const torch::Tensor& t) {
  auto c = t.to(torch::kFloat64).contiguous();
  return {c.data_ptr<double>(), c.data_ptr<double>() + c.numel()};
}

// Integral over x of (F_ens(x) - 1{x >= y})^2 by the trapezoid rule on a fine grid.
double crps_by_integration(const std::vector<double>& members, double y) {
  double lo = std::min(y, *std::min_element(members.begin(), members.end())) - 0.1;
  double hi = std::max(y, *std::max_element(members.begin(), members.end())) + 0.1;
  const int n = 200000;
  const double dx = (hi - lo) / n;
  double sum = 0.0;
  for (int i = 0; i < n; ++i) {
    const double x = lo + (i + 0.5) * dx;
    double cdf = 0.0;
    for (double m : members) cdf += (m <= x) ? 1.0 : 0.0;
    cdf /= static_cast<double>(members.size());
    const double step = x >= y ? 1.0 : 0.0;
    sum += (cdf - step) * (cdf - step) * dx;
  }
  return sum;
}

}  // namespace

TEST_CASE("contingency counts match a per-pixel loop") {
  auto gen = make_generator(3);
  for (int trial = 0; trial < 50; ++trial) {
    auto pred = torch::rand({3, 9, 7}, gen);
    auto obs = torch::rand({3, 9, 7}, gen);
    const double thr = 0.1 + 0.8 * trial / 50.0;
    const auto c = contingency(pred, obs, thr);
    const auto b = brute_counts(values(pred), values(obs), thr);
    CHECK(c.hits == b.h);
    CHECK(c.misses == b.m);
    CHECK(c.false_alarms == b.f);
    CHECK(c.correct_negatives == b.n);
    CHECK(c == contingency(binarize(pred, thr), binarize(obs, thr)));
  }
}

TEST_CASE("threshold comparison is inclusive and done in double") {
  auto f = torch::tensor({0.2f, 0.19999f, 0.5f});
  auto bin = binarize(f, static_cast<double>(0.2f));
  CHECK(bin[0].item<bool>());
  CHECK_FALSE(bin[1].item<bool>());
}

TEST_CASE("score formulas") {
  ContingencyCounts c{5, 3, 2, 90};
  CHECK(*csi(c) == doctest::Approx(5.0 / 10.0));
  CHECK(*far(c) == doctest::Approx(2.0 / 7.0));
  const double n = 100.0;
  const double expected = ((5.0 + 3.0) * (5.0 + 2.0) + (90.0 + 3.0) * (90.0 + 2.0)) / n;
  CHECK(*hss(c) == doctest::Approx((5.0 + 90.0 - expected) / (n - expected)));
}

TEST_CASE("undefined scores are absent and skipped by the mean") {
  ContingencyCounts empty{0, 0, 0, 64};
  CHECK_FALSE(csi(empty).has_value());
  CHECK_FALSE(far(empty).has_value());
  ContingencyCounts miss_only{0, 4, 0, 60};
  CHECK(*csi(miss_only) == 0.0);
  CHECK_FALSE(far(miss_only).has_value());
  std::vector<std::optional<double>> v{0.5, std::nullopt, 0.25};
  CHECK(*mean_defined(v) == doctest::Approx(0.375));
  std::vector<std::optional<double>> none{std::nullopt};
  CHECK_FALSE(mean_defined(none).has_value());
}

TEST_CASE("threshold sets validate ordering and range") {
  CHECK_THROWS_AS(ThresholdSet({0.5, 0.4}), ParameterError);
  CHECK_THROWS_AS(ThresholdSet({0.0, 0.4}), ParameterError);
  CHECK_THROWS_AS(ThresholdSet({0.5, 1.0}), ParameterError);
  CHECK(ThresholdSet::sevir().values().front() == doctest::Approx(16.0 / 255.0));
  CHECK(ThresholdSet::sevir().size() == 6);
}

TEST_CASE("pooling matches block means, with reflection padding at ragged edges") {
  auto gen = make_generator(5);
  auto f = torch::rand({2, 8, 8}, gen, torch::kFloat64);
  auto p = pool(f, 4);
  REQUIRE(p.sizes() == torch::IntArrayRef({2, 2, 2}));
  for (int64_t b = 0; b < 2; ++b)
    for (int64_t i = 0; i < 2; ++i)
      for (int64_t j = 0; j < 2; ++j) {
        double s = 0.0;
        for (int64_t u = 0; u < 4; ++u)
          for (int64_t v = 0; v < 4; ++v) s += f[b][4 * i + u][4 * j + v].item<double>();
        CHECK(p[b][i][j].item<double>() == doctest::Approx(s / 16.0).epsilon(1e-12));
      }

  // 5 columns padded to 8 by reflection: 0 1 2 3 4 | 3 2 1
  auto row = torch::arange(5, torch::kFloat64).view({1, 1, 5}).expand({1, 4, 5}).contiguous();
  auto q = pool(row, 4);
  REQUIRE(q.size(2) == 2);
  CHECK(q[0][0][0].item<double>() == doctest::Approx(1.5));
  CHECK(q[0][0][1].item<double>() == doctest::Approx((4.0 + 3.0 + 2.0 + 1.0) / 4.0));
}

TEST_CASE("CRPS agrees with the integral of squared CDF differences") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<torch::Tensor> ens;
    std::vector<double> members;
    for (int m = 0; m < 4; ++m) {
      members.push_back(u(rng));
      ens.push_back(torch::full({1}, members.back(), torch::kFloat64));
    }
    const double y = u(rng);
    const double expected = crps_by_integration(members, y);
    CHECK(crps(ens, torch::full({1}, y, torch::kFloat64)) == doctest::Approx(expected).epsilon(1e-4));
  }
}

TEST_CASE("fair CRPS uses m(m-1) in the spread term") {
  std::vector<torch::Tensor> ens{torch::tensor({0.0}, torch::kFloat64), torch::tensor({1.0}, torch::kFloat64)};
  auto obs = torch::tensor({0.25}, torch::kFloat64);
  // mean |x - y| = 0.5; sum |xi - xj| = 2
  CHECK(crps(ens, obs) == doctest::Approx(0.5 - 2.0 / 8.0));
  CHECK(crps(ens, obs, CrpsDivisor::m_times_m_minus1) == doctest::Approx(0.5 - 2.0 / 4.0));
}

TEST_CASE("single-member CRPS is the mean absolute error") {
  auto gen = make_generator(17);
  auto x = torch::rand({4, 6, 6}, gen, torch::kFloat64);
  auto y = torch::rand({4, 6, 6}, gen, torch::kFloat64);
  std::vector<torch::Tensor> ens{x};
  CHECK(std::abs(crps(ens, y) - (x - y).abs().mean().item<double>()) < 1e-12);
}

TEST_CASE("accumulator micro-averages counts across events") {
  auto gen = make_generator(23);
  ThresholdSet thr({0.3, 0.6});
  ScoreAccumulator acc(thr, {1, 4});
  Brute total0, total1;
  for (int e = 0; e < 3; ++e) {
    auto pred = torch::rand({2, 8, 8}, gen);
    auto obs = torch::rand({2, 8, 8}, gen);
    auto other = torch::rand({2, 8, 8}, gen);
    std::vector<torch::Tensor> members{pred, other};
    acc.add(members, obs);
    for (auto [thr_v, tot] : {std::pair{0.3, &total0}, std::pair{0.6, &total1}}) {
      auto b = brute_counts(values(pred), values(obs), thr_v);
      tot->h += b.h;
      tot->m += b.m;
      tot->f += b.f;
      tot->n += b.n;
    }
  }
  const auto rep = acc.report();
  CHECK(rep.n_events == 3);
  const double csi0 = double(total0.h) / double(total0.h + total0.m + total0.f);
  const double csi1 = double(total1.h) / double(total1.h + total1.m + total1.f);
  CHECK(*rep.per_threshold()[0].csi == doctest::Approx(csi0));
  CHECK(*rep.per_threshold()[1].csi == doctest::Approx(csi1));
  CHECK(*rep.csi_m == doctest::Approx((csi0 + csi1) / 2));
  CHECK(rep.per_lead_time.size() == 2);
  REQUIRE(rep.crps.has_value());
}

TEST_CASE("score reports round-trip through JSON with nulls for undefined values") {
  ThresholdSet thr({0.5});
  ScoreAccumulator acc(thr, {1});
  auto zeros = torch::zeros({2, 4, 4});
  std::vector<torch::Tensor> members{zeros};
  acc.add(members, zeros);
  const auto rep = acc.report();
  CHECK_FALSE(rep.csi_m.has_value());
  const auto doc = rep.to_json();
  CHECK(doc.at("csi_m").is_null());
  const auto back = ScoreReport::from_json(doc);
  CHECK(back.to_json() == doc);
}

TEST_CASE("shape mismatches are rejected") {
  CHECK_THROWS_AS(contingency(torch::zeros({2, 2}), torch::zeros({2, 3}), 0.5), ParameterError);
}
