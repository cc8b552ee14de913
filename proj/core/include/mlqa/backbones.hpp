#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "mlqa/layers.hpp"

namespace mlqa {

inline constexpr std::size_t kLevels = 4;

/// Toy ViT standing in for a CLIP image encoder.
struct ImageEncoderConfig {
  std::size_t image_size = 32;
  std::size_t patch_size = 8;
  std::size_t channels = 3;
  std::size_t depth = 12;
  std::size_t dim = 64;
  std::size_t heads = 4;
  /// 1-based layer indices whose outputs become G_0..G_3.
  std::array<std::size_t, kLevels> taps{3, 6, 9, 12};

  /// depth/4, depth/2, 3*depth/4, depth.
  static std::array<std::size_t, kLevels> default_taps(std::size_t depth);
  std::size_t patches() const;
  /// Tokens per tap: patches plus the class token.
  std::size_t tokens() const { return patches() + 1; }
  void validate() const;
};

/// Toy four-stage residual CNN standing in for ResNet stages 1..4.
struct CnnConfig {
  std::size_t channels = 3;
  std::size_t base_channels = 16;

  std::size_t stage_channels(std::size_t stage) const { return base_channels << stage; }
  void validate() const;
};

struct TextEncoderConfig {
  std::size_t vocab_size = 32;
  std::size_t dim = 32;
  std::size_t depth = 4;
  std::size_t heads = 4;
  std::size_t max_tokens = 16;
  std::int32_t pad_id = 0;

  void validate() const;
};

/// Padded prompt batch. Validity comes from each prompt's true length, never from
/// the token values at padded positions.
struct PromptBatch {
  std::size_t batch = 0;
  std::size_t tokens = 0;
  std::vector<std::int32_t> ids;  // batch * tokens, row-major
  KeyMask mask;

  /// Pads each sequence to `max_tokens` with `pad_id`. Throws InputError when a
  /// sequence is longer than `max_tokens` or uses the pad id as a real token.
  static PromptBatch from_sequences(const std::vector<std::vector<std::int32_t>>& sequences,
                                    std::size_t max_tokens, std::int32_t pad_id);
};

class ImageTransformer {
 public:
  ImageTransformer(ParameterStore& store, const std::string& prefix, const ImageEncoderConfig& cfg);

  /// image: (B, C, H, W) -> hidden states after each tap layer, each (B, N, D).
  std::vector<Tensor> encode(const Tensor& image) const;

 private:
  ImageEncoderConfig cfg_;
  Linear patch_embed_;
  Tensor cls_;
  Tensor pos_;
  std::vector<TransformerLayer> layers_;
};

class ResidualStage {
 public:
  ResidualStage(ParameterStore& store, const std::string& prefix, std::size_t in_channels,
                std::size_t out_channels);
  /// h = GELU(conv3x3/s2(x)); out = h + conv3x3(GELU(h)).
  Tensor operator()(const Tensor& x) const;

 private:
  Tensor down_w_, down_b_, res_w_, res_b_;
};

class ConvBackbone {
 public:
  ConvBackbone(ParameterStore& store, const std::string& prefix, const CnnConfig& cfg);

  /// image: (B, C, H, W) -> four feature maps, spatial extent halving per stage.
  std::vector<Tensor> encode(const Tensor& image) const;

 private:
  CnnConfig cfg_;
  std::vector<ResidualStage> stages_;
};

/// Feature map (B, C, H, W) -> token sequence (B, H*W, D): flatten, project, normalize.
class Adapter {
 public:
  Adapter(ParameterStore& store, const std::string& prefix, std::size_t channels, std::size_t dim);
  Tensor operator()(const Tensor& feature_map) const;

 private:
  Linear proj_;
  LayerNorm norm_;
};

class TextEncoder {
 public:
  /// `out_dim` is the image-encoder width D the final projection maps onto.
  TextEncoder(ParameterStore& store, const std::string& prefix, const TextEncoderConfig& cfg,
              std::size_t out_dim);

  /// Returns P: (B, N_p, D). Pad positions are computed but masked in self-attention.
  Tensor encode(const PromptBatch& prompts) const;

 private:
  TextEncoderConfig cfg_;
  Tensor token_embed_;
  Tensor pos_;
  std::vector<TransformerLayer> layers_;
  LayerNorm final_norm_;
  Linear proj_;
};

}  // namespace mlqa
