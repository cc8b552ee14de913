#include "mlqa/backbones.hpp"

#include <cmath>

#include "mlqa/errors.hpp"

namespace mlqa {

std::array<std::size_t, kLevels> ImageEncoderConfig::default_taps(std::size_t depth) {
  return {depth / 4, depth / 2, 3 * depth / 4, depth};
}

std::size_t ImageEncoderConfig::patches() const {
  const std::size_t g = image_size / patch_size;
  return g * g;
}

void ImageEncoderConfig::validate() const {
  if (patch_size == 0 || image_size == 0 || image_size % patch_size != 0) {
    throw ConfigError("image encoder: image_size " + std::to_string(image_size) +
                      " must be a positive multiple of patch_size " + std::to_string(patch_size));
  }
  if (channels == 0 || dim == 0 || depth == 0) throw ConfigError("image encoder: zero extent");
  if (heads == 0 || dim % heads != 0) throw ConfigError("image encoder: dim not divisible by heads");
  if (taps[0] < 1) throw ConfigError("image encoder: tap layers are 1-based");
  for (std::size_t i = 1; i < kLevels; ++i) {
    if (taps[i] <= taps[i - 1]) throw ConfigError("image encoder: tap layers must strictly increase");
  }
  if (taps[kLevels - 1] != depth) throw ConfigError("image encoder: last tap must equal depth");
}

void CnnConfig::validate() const {
  if (channels == 0 || base_channels == 0) throw ConfigError("cnn: zero channel count");
}

void TextEncoderConfig::validate() const {
  if (vocab_size < 2 || dim == 0 || depth == 0 || max_tokens == 0) {
    throw ConfigError("text encoder: vocab_size >= 2 and positive dim/depth/max_tokens required");
  }
  if (heads == 0 || dim % heads != 0) throw ConfigError("text encoder: dim not divisible by heads");
  if (pad_id < 0 || static_cast<std::size_t>(pad_id) >= vocab_size) {
    throw ConfigError("text encoder: pad id outside vocabulary");
  }
}

PromptBatch PromptBatch::from_sequences(const std::vector<std::vector<std::int32_t>>& sequences,
                                        std::size_t max_tokens, std::int32_t pad_id) {
  PromptBatch pb;
  pb.batch = sequences.size();
  pb.tokens = max_tokens;
  pb.ids.assign(pb.batch * max_tokens, pad_id);
  pb.mask.batch = pb.batch;
  pb.mask.keys = max_tokens;
  pb.mask.valid.assign(pb.batch * max_tokens, 0);
  for (std::size_t b = 0; b < pb.batch; ++b) {
    const auto& seq = sequences[b];
    if (seq.size() > max_tokens) {
      throw InputError("prompt " + std::to_string(b) + " has " + std::to_string(seq.size()) +
                       " tokens, limit is " + std::to_string(max_tokens));
    }
    for (std::size_t t = 0; t < seq.size(); ++t) {
      if (seq[t] == pad_id) {
        throw InputError("prompt " + std::to_string(b) + " uses the reserved pad id at position " +
                         std::to_string(t));
      }
      pb.ids[b * max_tokens + t] = seq[t];
      pb.mask.valid[b * max_tokens + t] = 1;
    }
  }
  return pb;
}

// ---------------------------------------------------------------------------

ImageTransformer::ImageTransformer(ParameterStore& store, const std::string& prefix,
                                   const ImageEncoderConfig& cfg)
    : cfg_(cfg) {
  cfg_.validate();
  const double token_std = 1.0 / std::sqrt(static_cast<double>(cfg.dim));
  patch_embed_ = Linear(store, prefix + ".patch_embed", cfg.channels * cfg.patch_size * cfg.patch_size, cfg.dim);
  cls_ = store.normal(prefix + ".cls", {1, cfg.dim}, token_std);
  pos_ = store.normal(prefix + ".pos", {cfg.tokens(), cfg.dim}, token_std);
  for (std::size_t i = 0; i < cfg.depth; ++i) {
    layers_.emplace_back(store, prefix + ".layer" + std::to_string(i + 1), cfg.dim, cfg.heads);
  }
}

std::vector<Tensor> ImageTransformer::encode(const Tensor& image) const {
  if (image.rank() != 4 || image.dim(1) != cfg_.channels || image.dim(2) != cfg_.image_size ||
      image.dim(3) != cfg_.image_size) {
    throw DimensionError("image encoder expects (B, " + std::to_string(cfg_.channels) + ", " +
                         std::to_string(cfg_.image_size) + ", " + std::to_string(cfg_.image_size) +
                         "), got " + to_string(image.shape()));
  }
  const std::size_t batch = image.dim(0);
  Tensor patches = patch_embed_(patchify(image, cfg_.patch_size));
  Tensor x = add(concat_tokens({expand_batch(cls_, batch), patches}), pos_);
  std::vector<Tensor> taps;
  std::size_t next_tap = 0;
  for (std::size_t i = 0; i < layers_.size() && next_tap < kLevels; ++i) {
    x = layers_[i](x);
    if (i + 1 == cfg_.taps[next_tap]) {
      taps.push_back(x);
      ++next_tap;
    }
  }
  return taps;
}

ResidualStage::ResidualStage(ParameterStore& store, const std::string& prefix,
                             std::size_t in_channels, std::size_t out_channels) {
  down_w_ = store.normal(prefix + ".down.weight", {out_channels, in_channels * 9},
                         1.0 / std::sqrt(static_cast<double>(in_channels * 9)));
  down_b_ = store.zeros(prefix + ".down.bias", {out_channels});
  res_w_ = store.normal(prefix + ".residual.weight", {out_channels, out_channels * 9},
                        1.0 / std::sqrt(static_cast<double>(out_channels * 9)));
  res_b_ = store.zeros(prefix + ".residual.bias", {out_channels});
}

Tensor ResidualStage::operator()(const Tensor& x) const {
  Tensor h = gelu(conv2d(x, down_w_, down_b_, 3, 2, 1));
  return add(h, conv2d(gelu(h), res_w_, res_b_, 3, 1, 1));
}

ConvBackbone::ConvBackbone(ParameterStore& store, const std::string& prefix, const CnnConfig& cfg)
    : cfg_(cfg) {
  cfg_.validate();
  std::size_t in = cfg.channels;
  for (std::size_t s = 0; s < kLevels; ++s) {
    stages_.emplace_back(store, prefix + ".stage" + std::to_string(s + 1), in, cfg.stage_channels(s));
    in = cfg.stage_channels(s);
  }
}

std::vector<Tensor> ConvBackbone::encode(const Tensor& image) const {
  if (image.rank() != 4 || image.dim(1) != cfg_.channels) {
    throw DimensionError("cnn expects (B, " + std::to_string(cfg_.channels) + ", H, W), got " +
                         to_string(image.shape()));
  }
  constexpr std::size_t kStride = std::size_t{1} << kLevels;
  if (image.dim(2) % kStride != 0 || image.dim(3) % kStride != 0) {
    throw DimensionError("cnn: spatial extents of " + to_string(image.shape()) +
                         " must be divisible by 16");
  }
  std::vector<Tensor> maps;
  Tensor x = image;
  for (const auto& stage : stages_) {
    x = stage(x);
    maps.push_back(x);
  }
  return maps;
}

Adapter::Adapter(ParameterStore& store, const std::string& prefix, std::size_t channels, std::size_t dim)
    : proj_(store, prefix + ".proj", channels, dim), norm_(store, prefix + ".norm", dim) {}

Tensor Adapter::operator()(const Tensor& feature_map) const {
  return norm_(proj_(flatten_spatial(feature_map)));
}

TextEncoder::TextEncoder(ParameterStore& store, const std::string& prefix,
                         const TextEncoderConfig& cfg, std::size_t out_dim)
    : cfg_(cfg) {
  cfg_.validate();
  const double token_std = 1.0 / std::sqrt(static_cast<double>(cfg.dim));
  token_embed_ = store.normal(prefix + ".token_embed", {cfg.vocab_size, cfg.dim}, token_std);
  pos_ = store.normal(prefix + ".pos", {cfg.max_tokens, cfg.dim}, token_std);
  for (std::size_t i = 0; i < cfg.depth; ++i) {
    layers_.emplace_back(store, prefix + ".layer" + std::to_string(i + 1), cfg.dim, cfg.heads);
  }
  final_norm_ = LayerNorm(store, prefix + ".final_norm", cfg.dim);
  proj_ = Linear(store, prefix + ".proj", cfg.dim, out_dim);
}

Tensor TextEncoder::encode(const PromptBatch& prompts) const {
  if (prompts.tokens != cfg_.max_tokens) {
    throw DimensionError("text encoder expects " + std::to_string(cfg_.max_tokens) +
                         " padded tokens, got " + std::to_string(prompts.tokens));
  }
  Tensor x = add(embedding(token_embed_, prompts.ids, prompts.batch, prompts.tokens), pos_);
  for (const auto& layer : layers_) x = layer(x, &prompts.mask);
  return proj_(final_norm_(x));
}

}  // namespace mlqa
