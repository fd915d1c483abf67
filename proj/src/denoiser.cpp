#include "syncast/denoiser.hpp"

#include <algorithm>
#include <cmath>
#include <mutex>
#include <numbers>
#include <numeric>
#include <sstream>

#include "syncast/errors.hpp"

namespace syncast::denoiser {

namespace nn = torch::nn;

namespace {

int64_t groups_for(int64_t channels) { return std::gcd(channels, int64_t{8}); }

nn::Conv2d conv3x3(int64_t in, int64_t out, int64_t stride = 1) {
  return nn::Conv2d(nn::Conv2dOptions(in, out, 3).stride(stride).padding(1));
}

// Sinusoidal encoding of normalized cell centres, [h * w, dim]; the same coordinates
// at every resolution so queries and condition tokens can be matched by position.
torch::Tensor grid_encoding(int64_t h, int64_t w, int64_t dim) {
  auto enc = torch::zeros({h * w, dim});
  const int64_t per_axis = dim / 2;
  auto acc = enc.accessor<float, 2>();
  for (int64_t i = 0; i < h; ++i) {
    for (int64_t j = 0; j < w; ++j) {
      const double coords[2] = {(i + 0.5) / static_cast<double>(h), (j + 0.5) / static_cast<double>(w)};
      for (int axis = 0; axis < 2; ++axis) {
        for (int64_t k = 0; k < per_axis; ++k) {
          const double freq = std::numbers::pi * std::pow(2.0, static_cast<double>(k / 2));
          const double v = (k % 2 == 0) ? std::sin(freq * coords[axis]) : std::cos(freq * coords[axis]);
          acc[i * w + j][axis * per_axis + k] = static_cast<float>(v);
        }
      }
    }
  }
  return enc;
}

std::string prediction_name(Prediction p) { return p == Prediction::epsilon ? "epsilon" : "velocity"; }

Prediction parse_prediction(const std::string& s) {
  if (s == "epsilon") return Prediction::epsilon;
  if (s == "velocity") return Prediction::velocity;
  throw ParameterError("unknown prediction regime '" + s + "'");
}

}  // namespace

// --- config -------------------------------------------------------------------

void DenoiserConfig::validate() const {
  auto positive = [](int64_t v, const char* name) {
    if (v <= 0) throw ParameterError(std::string("denoiser config: ") + name + " must be positive");
  };
  positive(base_channels, "base_channels");
  positive(n_res_blocks, "n_res_blocks");
  positive(attention_heads, "attention_heads");
  positive(cond_embed_dim, "cond_embed_dim");
  positive(time_embed_dim, "time_embed_dim");
  positive(target_frames, "target_frames");
  positive(context_frames, "context_frames");
  positive(height, "height");
  positive(width, "width");
  if (channel_mults.empty()) throw ParameterError("denoiser config: channel_mults must not be empty");
  for (auto m : channel_mults) positive(m, "channel_mults entry");
  if (time_embed_dim % 2 != 0) throw ParameterError("denoiser config: time_embed_dim must be even");
  const int64_t factor = int64_t{1} << (channel_mults.size() - 1);
  if (height % factor != 0 || width % factor != 0 || height % 4 != 0 || width % 4 != 0) {
    throw ParameterError("denoiser config: grid must be divisible by 4 and by 2^(levels-1)");
  }
  for (auto r : attention_resolutions) {
    bool reachable = false;
    for (std::size_t i = 0; i < channel_mults.size(); ++i) reachable |= (height >> i) == r;
    if (!reachable) throw ParameterError("denoiser config: attention resolution " + std::to_string(r) + " unreachable");
  }
  for (auto m : channel_mults) {
    if ((base_channels * m) % attention_heads != 0) {
      throw ParameterError("denoiser config: channel counts must be divisible by attention_heads");
    }
  }
}

nlohmann::json DenoiserConfig::to_json() const {
  return {{"base_channels", base_channels},
          {"channel_mults", channel_mults},
          {"n_res_blocks", n_res_blocks},
          {"attention_resolutions", attention_resolutions},
          {"attention_heads", attention_heads},
          {"cond_embed_dim", cond_embed_dim},
          {"time_embed_dim", time_embed_dim},
          {"target_frames", target_frames},
          {"context_frames", context_frames},
          {"height", height},
          {"width", width},
          {"prediction", prediction_name(prediction)}};
}

DenoiserConfig DenoiserConfig::from_json(const nlohmann::json& doc) {
  DenoiserConfig c;
  try {
    c.base_channels = doc.value("base_channels", c.base_channels);
    c.channel_mults = doc.value("channel_mults", c.channel_mults);
    c.n_res_blocks = doc.value("n_res_blocks", c.n_res_blocks);
    c.attention_resolutions = doc.value("attention_resolutions", c.attention_resolutions);
    c.attention_heads = doc.value("attention_heads", c.attention_heads);
    c.cond_embed_dim = doc.value("cond_embed_dim", c.cond_embed_dim);
    c.time_embed_dim = doc.value("time_embed_dim", c.time_embed_dim);
    c.target_frames = doc.value("target_frames", c.target_frames);
    c.context_frames = doc.value("context_frames", c.context_frames);
    c.height = doc.value("height", c.height);
    c.width = doc.value("width", c.width);
    c.prediction = parse_prediction(doc.value("prediction", std::string("epsilon")));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("denoiser config: ") + e.what());
  }
  return c;
}

// --- blocks -------------------------------------------------------------------

ResBlockImpl::ResBlockImpl(int64_t in_channels, int64_t out_channels, int64_t embed_dim) {
  norm1 = register_module("norm1", nn::GroupNorm(groups_for(in_channels), in_channels));
  conv1 = register_module("conv1", conv3x3(in_channels, out_channels));
  norm2 = register_module("norm2", nn::GroupNorm(groups_for(out_channels), out_channels));
  conv2 = register_module("conv2", conv3x3(out_channels, out_channels));
  if (embed_dim > 0) emb_proj = register_module("emb_proj", nn::Linear(embed_dim, out_channels));
  if (in_channels != out_channels) {
    skip = register_module("skip", nn::Conv2d(nn::Conv2dOptions(in_channels, out_channels, 1)));
  }
}

torch::Tensor ResBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& emb) {
  auto h = conv1(torch::silu(norm1(x)));
  if (emb_proj && emb.defined()) h = h + emb_proj(torch::silu(emb)).unsqueeze(-1).unsqueeze(-1);
  h = conv2(torch::silu(norm2(h)));
  return (skip ? skip(x) : x) + h;
}

CrossAttentionImpl::CrossAttentionImpl(int64_t channels, int64_t cond_dim, int64_t heads, int64_t height,
                                       int64_t width) {
  norm = register_module("norm", nn::GroupNorm(groups_for(channels), channels));
  attn = register_module("attn",
                         nn::MultiheadAttention(nn::MultiheadAttentionOptions(channels, heads).kdim(cond_dim).vdim(cond_dim)));
  out = register_module("out", nn::Linear(channels, channels));
  query_pos = register_parameter("query_pos", grid_encoding(height, width, channels).unsqueeze(1));
}

torch::Tensor CrossAttentionImpl::forward(const torch::Tensor& x, const torch::Tensor& tokens) {
  const auto b = x.size(0);
  const auto c = x.size(1);
  const auto h = x.size(2);
  const auto w = x.size(3);
  // [B, C, H, W] -> [HW, B, C]; tokens [B, L, D] -> [L, B, D]
  auto q = norm(x).flatten(2).permute({2, 0, 1}) + query_pos;
  auto kv = tokens.transpose(0, 1);
  auto attended = std::get<0>(attn->forward(q, kv, kv, /*key_padding_mask=*/{}, /*need_weights=*/false));
  auto delta = out(attended).permute({1, 2, 0}).reshape({b, c, h, w});
  return x + delta;
}

ConditionEncoderImpl::ConditionEncoderImpl(int64_t context_frames, int64_t dim, int64_t height, int64_t width) {
  conv_in = register_module("conv_in", conv3x3(context_frames, dim));
  down1 = register_module("down1", conv3x3(dim, dim, 2));
  down2 = register_module("down2", conv3x3(dim, dim, 2));
  blocks = register_module("blocks", nn::ModuleList());
  for (int i = 0; i < 3; ++i) blocks->push_back(ResBlock(dim, dim, 0));
  norm_out = register_module("norm_out", nn::GroupNorm(groups_for(dim), dim));
  token_pos = register_parameter("token_pos", grid_encoding(height / 4, width / 4, dim).unsqueeze(0));
}

ConditionEmbedding ConditionEncoderImpl::forward(const torch::Tensor& context) {
  auto h = conv_in(context);
  h = blocks->ptr<ResBlockImpl>(0)->forward(h, {});
  h = blocks->ptr<ResBlockImpl>(1)->forward(down1(h), {});
  h = blocks->ptr<ResBlockImpl>(2)->forward(down2(h), {});
  auto tokens = torch::silu(norm_out(h)).flatten(2).transpose(1, 2);  // [B, L, D]
  auto pooled = tokens.mean(1);
  return ConditionEmbedding{tokens + token_pos, pooled};
}

// --- UNet ---------------------------------------------------------------------

ConditionalUNet::ConditionalUNet(DenoiserConfig config) : config_(std::move(config)) {
  config_.validate();
  const auto& c = config_;
  const int64_t temb = c.time_embed_dim;
  encoder = register_module("encoder", ConditionEncoder(c.context_frames, c.cond_embed_dim, c.height, c.width));
  time_mlp = register_module("time_mlp", nn::Sequential(nn::Linear(temb, temb), nn::SiLU(), nn::Linear(temb, temb)));
  cond_to_time = register_module("cond_to_time", nn::Linear(c.cond_embed_dim, temb));
  conv_in = register_module("conv_in", conv3x3(c.target_frames, c.base_channels));
  down_blocks = register_module("down_blocks", nn::ModuleList());
  up_blocks = register_module("up_blocks", nn::ModuleList());
  downsamplers = register_module("downsamplers", nn::ModuleList());
  upsamplers = register_module("upsamplers", nn::ModuleList());
  attentions = register_module("attentions", nn::ModuleList());
  mid = register_module("mid", nn::ModuleList());

  auto wants_attention = [&](int64_t res) {
    return std::find(c.attention_resolutions.begin(), c.attention_resolutions.end(), res) !=
           c.attention_resolutions.end();
  };
  auto add_attention = [&](int64_t channels, int64_t level) {
    const int64_t h = c.height >> level;
    const int64_t w = c.width >> level;
    attentions->push_back(CrossAttention(channels, c.cond_embed_dim, c.attention_heads, h, w));
    return static_cast<int64_t>(attentions->size()) - 1;
  };

  const auto levels = static_cast<int64_t>(c.channel_mults.size());
  int64_t ch = c.base_channels;
  down_channels_.push_back(ch);
  for (int64_t level = 0; level < levels; ++level) {
    const int64_t out = c.base_channels * c.channel_mults[static_cast<std::size_t>(level)];
    for (int64_t j = 0; j < c.n_res_blocks; ++j) {
      down_blocks->push_back(ResBlock(ch, out, temb));
      ch = out;
      down_attn_.push_back(wants_attention(c.height >> level) ? add_attention(ch, level) : -1);
      down_channels_.push_back(ch);
    }
    if (level + 1 < levels) {
      downsamplers->push_back(conv3x3(ch, ch, 2));
      down_channels_.push_back(ch);
    }
  }

  mid->push_back(ResBlock(ch, ch, temb));
  mid->push_back(ResBlock(ch, ch, temb));
  const int64_t mid_attn = wants_attention(c.height >> (levels - 1)) ? add_attention(ch, levels - 1) : -1;
  down_attn_.push_back(mid_attn);  // last entry: bottleneck

  auto skips = down_channels_;
  for (int64_t level = levels - 1; level >= 0; --level) {
    const int64_t out = c.base_channels * c.channel_mults[static_cast<std::size_t>(level)];
    for (int64_t j = 0; j < c.n_res_blocks + 1; ++j) {
      const int64_t skip_ch = skips.back();
      skips.pop_back();
      up_blocks->push_back(ResBlock(ch + skip_ch, out, temb));
      ch = out;
      up_attn_.push_back(wants_attention(c.height >> level) ? add_attention(ch, level) : -1);
    }
    if (level > 0) upsamplers->push_back(conv3x3(ch, ch));
  }
  norm_out = register_module("norm_out", nn::GroupNorm(groups_for(ch), ch));
  conv_out = register_module("conv_out", conv3x3(ch, c.target_frames));
}

torch::Tensor ConditionalUNet::time_embedding(const torch::Tensor& t) const {
  const int64_t half = config_.time_embed_dim / 2;
  const double scale = config_.prediction == Prediction::velocity ? 1000.0 : 1.0;
  auto freqs = torch::exp(torch::arange(half, t.options()) * (-std::log(10000.0) / static_cast<double>(half)));
  auto args = (t * scale).unsqueeze(1) * freqs.unsqueeze(0);
  return torch::cat({torch::sin(args), torch::cos(args)}, 1);
}

ConditionEmbedding ConditionalUNet::encode_condition(const torch::Tensor& context) {
  if (context.dim() != 4 || context.size(1) != config_.context_frames || context.size(2) != config_.height ||
      context.size(3) != config_.width) {
    std::ostringstream ss;
    ss << "encode_condition: expected context [B, " << config_.context_frames << ", " << config_.height << ", "
       << config_.width << "], got " << context.sizes();
    throw ParameterError(ss.str());
  }
  return encoder->forward(context);
}

torch::Tensor ConditionalUNet::predict_noise(const torch::Tensor& y_t, const torch::Tensor& t,
                                             const ConditionEmbedding& cond) {
  const bool unbatched = y_t.dim() == 3;
  auto x = unbatched ? y_t.unsqueeze(0) : y_t;
  if (x.dim() != 4 || x.size(1) != config_.target_frames || x.size(2) != config_.height ||
      x.size(3) != config_.width) {
    std::ostringstream ss;
    ss << "predict_noise: expected y_t [B, " << config_.target_frames << ", " << config_.height << ", "
       << config_.width << "], got " << y_t.sizes();
    throw ParameterError(ss.str());
  }
  auto tt = t.to(x.scalar_type()).reshape({-1});
  if (tt.size(0) == 1 && x.size(0) > 1) tt = tt.expand({x.size(0)});
  if (tt.size(0) != x.size(0)) throw ParameterError("predict_noise: need one time value per batch row");
  if (cond.tokens.size(0) != x.size(0)) throw ParameterError("predict_noise: condition batch differs from y_t");

  auto emb = time_mlp->forward(time_embedding(tt)) + cond_to_time(cond.pooled);
  auto h = conv_in(x);
  std::vector<torch::Tensor> skips{h};
  const auto levels = static_cast<int64_t>(config_.channel_mults.size());
  std::size_t block = 0;
  for (int64_t level = 0; level < levels; ++level) {
    for (int64_t j = 0; j < config_.n_res_blocks; ++j, ++block) {
      h = down_blocks->ptr<ResBlockImpl>(block)->forward(h, emb);
      if (down_attn_[block] >= 0) h = attentions->ptr<CrossAttentionImpl>(down_attn_[block])->forward(h, cond.tokens);
      skips.push_back(h);
    }
    if (level + 1 < levels) {
      h = downsamplers[level]->as<nn::Conv2dImpl>()->forward(h);
      skips.push_back(h);
    }
  }
  h = mid->ptr<ResBlockImpl>(0)->forward(h, emb);
  if (down_attn_.back() >= 0) h = attentions->ptr<CrossAttentionImpl>(down_attn_.back())->forward(h, cond.tokens);
  h = mid->ptr<ResBlockImpl>(1)->forward(h, emb);

  block = 0;
  std::size_t up = 0;
  for (int64_t level = levels - 1; level >= 0; --level) {
    for (int64_t j = 0; j < config_.n_res_blocks + 1; ++j, ++block) {
      h = torch::cat({h, skips.back()}, 1);
      skips.pop_back();
      h = up_blocks->ptr<ResBlockImpl>(block)->forward(h, emb);
      if (up_attn_[block] >= 0) h = attentions->ptr<CrossAttentionImpl>(up_attn_[block])->forward(h, cond.tokens);
    }
    if (level > 0) {
      h = torch::nn::functional::interpolate(
          h, torch::nn::functional::InterpolateFuncOptions().scale_factor(std::vector<double>{2.0, 2.0}).mode(torch::kNearest));
      h = upsamplers[up++]->as<nn::Conv2dImpl>()->forward(h);
    }
  }
  auto out = conv_out(torch::silu(norm_out(h)));
  if (!torch::isfinite(out).all().item<bool>()) throw NumericError("denoiser produced non-finite output");
  return unbatched ? out.squeeze(0) : out;
}

torch::Tensor ConditionalUNet::forward(const torch::Tensor& y_t, const torch::Tensor& t, const torch::Tensor& context) {
  const bool unbatched = context.dim() == 3;
  auto cond = encode_condition(unbatched ? context.unsqueeze(0) : context);
  return predict_noise(y_t, t, cond);
}

int64_t ConditionalUNet::parameter_count() const {
  int64_t n = 0;
  for (const auto& p : parameters()) n += p.numel();
  return n;
}

std::shared_ptr<ConditionalUNet> make_denoiser(const DenoiserConfig& config, uint64_t init_seed) {
  // Parameter initialization draws from the global generator.
  static std::mutex init_mutex;
  std::lock_guard<std::mutex> lock(init_mutex);
  torch::manual_seed(init_seed);
  return std::make_shared<ConditionalUNet>(config);
}

void copy_state(const torch::nn::Module& src, torch::nn::Module& dst) {
  torch::NoGradGuard no_grad;
  const auto sp = src.named_parameters(true);
  auto dp = dst.named_parameters(true);
  if (sp.size() != dp.size()) throw ParameterError("copy_state: parameter sets differ");
  for (const auto& item : sp) {
    auto* target = dp.find(item.key());
    if (target == nullptr || !target->sizes().equals(item.value().sizes())) {
      throw ParameterError("copy_state: mismatch at parameter '" + item.key() + "'");
    }
    target->copy_(item.value());
  }
  const auto sb = src.named_buffers(true);
  auto db = dst.named_buffers(true);
  for (const auto& item : sb) {
    if (auto* target = db.find(item.key())) target->copy_(item.value());
  }
}

std::shared_ptr<ConditionalUNet> clone_denoiser(const ConditionalUNet& src) {
  auto dst = std::make_shared<ConditionalUNet>(src.config());
  const auto p = src.parameters();
  if (!p.empty()) dst->to(p.front().scalar_type());
  copy_state(src, *dst);
  return dst;
}

uint64_t parameter_hash(const torch::nn::Module& module) {
  uint64_t h = 1469598103934665603ULL;
  for (const auto& p : module.parameters(true)) {
    auto data = p.detach().to(torch::kFloat32).contiguous();
    const auto* bytes = reinterpret_cast<const unsigned char*>(data.data_ptr<float>());
    for (int64_t i = 0; i < data.numel() * static_cast<int64_t>(sizeof(float)); ++i) {
      h ^= bytes[i];
      h *= 1099511628211ULL;
    }
  }
  return h;
}

}  // namespace syncast::denoiser
