#include "mlqa/fusion.hpp"

#include <cmath>

#include "mlqa/errors.hpp"

namespace mlqa {

const char* block_kind_name(BlockKind kind) { return kind == BlockKind::kGlf ? "glf" : "pef"; }

void FusionBlockConfig::validate() const {
  if (queries == 0) throw ConfigError("fusion block: need at least one query");
  if (heads == 0 || dim % heads != 0) throw ConfigError("fusion block: dim not divisible by heads");
  if (ffn_ratio == 0) throw ConfigError("fusion block: ffn_ratio must be positive");
}

Tensor cross_attention(const Tensor& queries, const Tensor& context, const MultiHeadAttention& attn,
                       const KeyMask* mask) {
  return attn(queries, context, mask);
}

FusionBlock::FusionBlock(ParameterStore& store, const std::string& prefix,
                         const FusionBlockConfig& cfg)
    : cfg_(cfg) {
  cfg_.validate();
  const std::size_t d = cfg.dim;
  queries_ = store.normal(prefix + ".query", {cfg.queries, d}, 1.0 / std::sqrt(static_cast<double>(d)));
  if (cfg.first_stage) {
    norm1_ = LayerNorm(store, prefix + ".stage1.norm", d);
    attn1_ = MultiHeadAttention(store, prefix + ".stage1.attn", d, cfg.heads);
    if (cfg.kind == BlockKind::kPef) {
      null_token_ = store.normal(prefix + ".stage1.null_token", {1, d}, 1.0 / std::sqrt(static_cast<double>(d)));
    }
  }
  if (cfg.second_stage) {
    norm2_ = LayerNorm(store, prefix + ".stage2.norm", d);
    attn2_ = MultiHeadAttention(store, prefix + ".stage2.attn", d, cfg.heads);
  }
  norm3_ = LayerNorm(store, prefix + ".ffn.norm", d);
  ffn_ = FeedForward(store, prefix + ".ffn", d, d * cfg.ffn_ratio, d);
}

Tensor FusionBlock::refine(const Tensor* first, const KeyMask* first_mask, const Tensor* second,
                           std::size_t batch) const {
  Tensor q = expand_batch(queries_, batch);
  if (cfg_.first_stage) {
    if (first == nullptr) throw ContractError(std::string(block_kind_name(cfg_.kind)) + ": stage-1 context missing");
    q = add(q, cross_attention(norm1_(q), *first, attn1_, first_mask));
  }
  if (cfg_.second_stage) {
    if (second == nullptr) throw ContractError(std::string(block_kind_name(cfg_.kind)) + ": stage-2 context missing");
    q = add(q, cross_attention(norm2_(q), *second, attn2_));
  }
  return add(q, ffn_(norm3_(q)));
}

Tensor FusionBlock::glf(const Tensor* global, const Tensor* local, std::size_t batch) const {
  if (cfg_.kind != BlockKind::kGlf) throw ContractError("glf() called on a PEF block");
  return refine(global, nullptr, local, batch);
}

Tensor FusionBlock::pef(const Tensor* prompt, const KeyMask* pad_mask, const Tensor* global,
                        std::size_t batch) const {
  if (cfg_.kind != BlockKind::kPef) throw ContractError("pef() called on a GLF block");
  if (!cfg_.first_stage) return refine(nullptr, nullptr, global, batch);
  if (prompt == nullptr) throw ContractError("pef: prompt features missing");
  if (pad_mask != nullptr && (pad_mask->keys != prompt->dim(1) || pad_mask->batch != prompt->dim(0))) {
    throw DimensionError("pef: pad mask (" + std::to_string(pad_mask->batch) + ", " +
                         std::to_string(pad_mask->keys) + ") does not match prompt " +
                         to_string(prompt->shape()));
  }
  Tensor context = concat_tokens({*prompt, expand_batch(null_token_, prompt->dim(0))});
  if (pad_mask == nullptr) return refine(&context, nullptr, global, batch);
  const KeyMask mask = pad_mask->with_appended(1);
  return refine(&context, &mask, global, batch);
}

void FusionBlock::zero_residual_branches() {
  if (cfg_.first_stage) attn1_.output().zero();
  if (cfg_.second_stage) attn2_.output().zero();
  ffn_.fc2.zero();
}

}  // namespace mlqa
