#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include <torch/torch.h>
#include <json.hpp>

#include "syncast/model.hpp"

namespace syncast::denoiser {

struct DenoiserConfig {
  int64_t base_channels = 32;
  std::vector<int64_t> channel_mults{1, 2, 4};
  int64_t n_res_blocks = 2;
  // Spatial sizes (in pixels along H) at which cross-attention blocks are inserted.
  std::vector<int64_t> attention_resolutions{16, 8};
  int64_t attention_heads = 4;
  int64_t cond_embed_dim = 64;
  int64_t time_embed_dim = 128;
  int64_t target_frames = 8;
  int64_t context_frames = 4;
  int64_t height = 32;
  int64_t width = 32;
  Prediction prediction = Prediction::epsilon;

  // Throws ParameterError when a field is non-positive, the grid does not
  // survive the downsampling chain, or an attention resolution is unreachable.
  void validate() const;

  nlohmann::json to_json() const;
  static DenoiserConfig from_json(const nlohmann::json& doc);
};

// Tokens [B, L, D] used as keys/values by the UNet, pooled [B, D] added to the time embedding.
struct ConditionEmbedding {
  torch::Tensor tokens;
  torch::Tensor pooled;
};

class ResBlockImpl : public torch::nn::Module {
 public:
  ResBlockImpl(int64_t in_channels, int64_t out_channels, int64_t embed_dim);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& emb);

 private:
  torch::nn::GroupNorm norm1{nullptr}, norm2{nullptr};
  torch::nn::Conv2d conv1{nullptr}, conv2{nullptr}, skip{nullptr};
  torch::nn::Linear emb_proj{nullptr};
};
TORCH_MODULE(ResBlock);

// Cross-attention from a feature map onto condition tokens, residual.
class CrossAttentionImpl : public torch::nn::Module {
 public:
  CrossAttentionImpl(int64_t channels, int64_t cond_dim, int64_t heads, int64_t height, int64_t width);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& tokens);

 private:
  torch::nn::GroupNorm norm{nullptr};
  torch::nn::MultiheadAttention attn{nullptr};
  torch::nn::Linear out{nullptr};
  torch::Tensor query_pos;
};
TORCH_MODULE(CrossAttention);

/// Residual CNN that turns the T' context frames into a token grid at 1/4 resolution.
class ConditionEncoderImpl : public torch::nn::Module {
 public:
  ConditionEncoderImpl(int64_t context_frames, int64_t dim, int64_t height, int64_t width);
  ConditionEmbedding forward(const torch::Tensor& context);

 private:
  torch::nn::Conv2d conv_in{nullptr}, down1{nullptr}, down2{nullptr};
  torch::nn::ModuleList blocks{nullptr};
  torch::nn::GroupNorm norm_out{nullptr};
  torch::Tensor token_pos;
};
TORCH_MODULE(ConditionEncoder);

/// UNet over the stacked target frames, conditioned on time and context.
/// Serves both epsilon and velocity prediction (config.prediction).
class ConditionalUNet : public DenoiserModule {
 public:
  explicit ConditionalUNet(DenoiserConfig config);

  const DenoiserConfig& config() const noexcept { return config_; }
  Prediction prediction() const override { return config_.prediction; }

  ConditionEmbedding encode_condition(const torch::Tensor& context);
  torch::Tensor predict_noise(const torch::Tensor& y_t, const torch::Tensor& t, const ConditionEmbedding& cond);
  torch::Tensor forward(const torch::Tensor& y_t, const torch::Tensor& t, const torch::Tensor& context) override;

  int64_t parameter_count() const;

 private:
  torch::Tensor time_embedding(const torch::Tensor& t) const;

  DenoiserConfig config_;
  ConditionEncoder encoder{nullptr};
  torch::nn::Sequential time_mlp{nullptr};
  torch::nn::Linear cond_to_time{nullptr};
  torch::nn::Conv2d conv_in{nullptr}, conv_out{nullptr};
  torch::nn::GroupNorm norm_out{nullptr};
  torch::nn::ModuleList down_blocks{nullptr}, up_blocks{nullptr}, downsamplers{nullptr}, upsamplers{nullptr};
  torch::nn::ModuleList mid{nullptr};
  // Per block: index into `attentions`, or -1.
  std::vector<int64_t> down_attn_, up_attn_;
  torch::nn::ModuleList attentions{nullptr};
  std::vector<int64_t> down_channels_;  // channel count of every skip tensor, in push order
};

std::shared_ptr<ConditionalUNet> make_denoiser(const DenoiserConfig& config, uint64_t init_seed);

// Copies parameter and buffer values from `src` into `dst` (same architecture).
void copy_state(const torch::nn::Module& src, torch::nn::Module& dst);
std::shared_ptr<ConditionalUNet> clone_denoiser(const ConditionalUNet& src);

// FNV-1a over every parameter's float bytes, in registration order.
uint64_t parameter_hash(const torch::nn::Module& module);

}  // namespace syncast::denoiser
