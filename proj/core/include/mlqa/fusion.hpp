#pragma once

#include <string>

#include "mlqa/layers.hpp"

namespace mlqa {

/// GLF conditions on (G_i, L_i); PEF conditions on (P, G_i).
enum class BlockKind { kGlf, kPef };

const char* block_kind_name(BlockKind kind);

struct FusionBlockConfig {
  BlockKind kind = BlockKind::kGlf;
  std::size_t dim = 64;
  std::size_t queries = 4;
  std::size_t heads = 4;
  std::size_t ffn_ratio = 4;
  /// Ablations drop a whole cross-attention stage (and its parameters).
  bool first_stage = true;
  bool second_stage = true;

  void validate() const;
};

/// The multi-head cross-attention term of one refinement stage. The residual add
/// is left to the caller.
Tensor cross_attention(const Tensor& queries, const Tensor& context, const MultiHeadAttention& attn,
                       const KeyMask* mask = nullptr);

/// One level's learnable-query refinement:
///   Q'  = CA(LN(Q), first)  + Q
///   Q'' = CA(LN(Q'), second) + Q'
///   Q~  = FFN(LN(Q'')) + Q''
/// Queries are stored batch-free as (N_Q, D) and broadcast at forward time.
class FusionBlock {
 public:
  FusionBlock(ParameterStore& store, const std::string& prefix, const FusionBlockConfig& cfg);

  /// GLF: first stage attends to G_i, second to L_i. Either may be null when the
  /// corresponding stage is ablated away.
  Tensor glf(const Tensor* global, const Tensor* local, std::size_t batch) const;
  /// PEF: first stage attends to P (pad positions masked, plus a learned null
  /// token that is always valid), second to G_i.
  Tensor pef(const Tensor* prompt, const KeyMask* pad_mask, const Tensor* global,
             std::size_t batch) const;

  /// Zeroes both attention output projections and the FFN's second affine map,
  /// which makes the block exactly the identity on its queries.
  void zero_residual_branches();

  const Tensor& queries() const { return queries_; }
  const FusionBlockConfig& config() const { return cfg_; }

 private:
  Tensor refine(const Tensor* first, const KeyMask* first_mask, const Tensor* second,
                std::size_t batch) const;

  FusionBlockConfig cfg_;
  Tensor queries_;
  LayerNorm norm1_, norm2_, norm3_;
  MultiHeadAttention attn1_, attn2_;
  FeedForward ffn_;
  Tensor null_token_;  // PEF only
};

}  // namespace mlqa
