#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>

#include <torch/torch.h>

#include "syncast/denoiser.hpp"
#include "syncast/model.hpp"
#include "syncast/preference.hpp"
#include "syncast/rng.hpp"

namespace syncast::test {

// Per-pixel model: out_k = tanh(sum_j A_kj y_j + sum_c C_kc ctx_c + b_k + s * t / 1000).
// With K target and Tc context frames it has K*K + K*Tc + K + 1 parameters.
class LinearStub : public DenoiserModule {
 public:
  LinearStub(int64_t k, int64_t tc, uint64_t seed, Prediction p = Prediction::epsilon) : prediction_(p) {
    auto gen = make_generator(seed);
    a = register_parameter("a", torch::randn({k, k}, gen) * 0.5);
    c = register_parameter("c", torch::randn({k, tc}, gen) * 0.5);
    b = register_parameter("b", torch::randn({k}, gen) * 0.1);
    s = register_parameter("s", torch::randn({1}, gen));
  }

  torch::Tensor forward(const torch::Tensor& y, const torch::Tensor& t, const torch::Tensor& ctx) override {
    auto h = torch::einsum("kj,bjhw->bkhw", {a, y}) + torch::einsum("kc,bchw->bkhw", {c, ctx}) +
             b.view({1, -1, 1, 1}) + (s * t.to(y.scalar_type()) / 1000.0).view({-1, 1, 1, 1});
    return torch::tanh(h);
  }
  Prediction prediction() const override { return prediction_; }

  torch::Tensor a, c, b, s;

 private:
  Prediction prediction_;
};

// Per-pixel two-layer MLP over [y, ctx, t] channels.
class MlpStub : public DenoiserModule {
 public:
  MlpStub(int64_t k, int64_t tc, int64_t hidden, uint64_t seed, Prediction p = Prediction::epsilon)
      : prediction_(p) {
    auto gen = make_generator(seed);
    w1 = register_parameter("w1", torch::randn({hidden, k + tc + 1}, gen) * 0.4);
    b1 = register_parameter("b1", torch::randn({hidden}, gen) * 0.1);
    w2 = register_parameter("w2", torch::randn({k, hidden}, gen) * 0.4);
    b2 = register_parameter("b2", torch::randn({k}, gen) * 0.1);
  }

  torch::Tensor forward(const torch::Tensor& y, const torch::Tensor& t, const torch::Tensor& ctx) override {
    auto tt = (t.to(y.scalar_type()) / 1000.0).view({-1, 1, 1, 1}).expand({y.size(0), 1, y.size(2), y.size(3)});
    auto x = torch::cat({y, ctx, tt}, 1);
    auto h = torch::tanh(torch::einsum("hc,bcxy->bhxy", {w1, x}) + b1.view({1, -1, 1, 1}));
    return torch::einsum("kh,bhxy->bkxy", {w2, h}) + b2.view({1, -1, 1, 1});
  }
  Prediction prediction() const override { return prediction_; }

  torch::Tensor w1, b1, w2, b2;

 private:
  Prediction prediction_;
};

inline void copy_params(const torch::nn::Module& src, torch::nn::Module& dst) {
  torch::NoGradGuard g;
  auto d = dst.parameters();
  auto s = src.parameters();
  for (std::size_t i = 0; i < d.size(); ++i) d[i].copy_(s[i]);
}

inline void perturb(torch::nn::Module& m, double scale, uint64_t seed) {
  torch::NoGradGuard g;
  auto gen = make_generator(seed);
  for (auto& p : m.parameters()) p.add_(torch::randn(p.sizes(), gen, p.options()) * scale);
}

struct GradCheck {
  double max_abs_diff = 0.0;
  double rel_error = 0.0;  // ||fd - ad|| / ||ad||
};

// Central differences on every parameter of `m` against its autograd gradient.
inline GradCheck check_gradient(torch::nn::Module& m, const std::function<torch::Tensor()>& loss, double h = 1e-4) {
  for (auto& p : m.parameters()) p.mutable_grad() = torch::Tensor();
  loss().backward();
  double num = 0.0, den = 0.0, worst = 0.0;
  for (auto& p : m.parameters()) {
    auto g = p.grad().clone();
    auto flat = p.data().view(-1);
    for (int64_t i = 0; i < flat.numel(); ++i) {
      const double x = flat[i].item<double>();
      double fp, fm;
      {
        torch::NoGradGuard ng;
        flat[i] = x + h;
        fp = loss().item<double>();
        flat[i] = x - h;
        fm = loss().item<double>();
        flat[i] = x;
      }
      const double fd = (fp - fm) / (2 * h);
      const double ad = g.view(-1)[i].item<double>();
      num += (fd - ad) * (fd - ad);
      den += ad * ad;
      worst = std::max(worst, std::abs(fd - ad));
    }
  }
  return {worst, std::sqrt(num) / std::max(std::sqrt(den), 1e-300)};
}

inline denoiser::DenoiserConfig tiny_unet_config(Prediction p = Prediction::epsilon) {
  denoiser::DenoiserConfig c;
  c.base_channels = 8;
  c.channel_mults = {1, 2};
  c.n_res_blocks = 1;
  c.attention_resolutions = {8};
  c.attention_heads = 2;
  c.cond_embed_dim = 16;
  c.time_embed_dim = 32;
  c.target_frames = 3;
  c.context_frames = 2;
  c.height = 16;
  c.width = 16;
  c.prediction = p;
  return c;
}

// Scratch directory removed on scope exit.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() /
            ("syncast_" + tag + "_" + std::to_string(reinterpret_cast<std::uintptr_t>(this)));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace syncast::test
