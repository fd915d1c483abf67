#pragma once

#include <torch/torch.h>

namespace syncast {

// What the network regresses: the injected noise (score-based) or the
// noise-to-data velocity (flow matching).
enum class Prediction { epsilon, velocity };

/// Interface every denoiser implements, from the full UNet down to the
/// few-parameter stubs used in gradient checks.
///
/// Shapes: y_t [B, K, H, W] with the K target frames stacked as channels;
/// t [B] (diffusion step index as a real for epsilon models, time in [0, 1] for
/// velocity models); context [B, T', H, W].
class DenoiserModule : public torch::nn::Module {
 public:
  virtual torch::Tensor forward(const torch::Tensor& y_t, const torch::Tensor& t, const torch::Tensor& context) = 0;
  virtual Prediction prediction() const = 0;
};

}  // namespace syncast
