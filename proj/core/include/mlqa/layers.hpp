#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "mlqa/ops.hpp"
#include "mlqa/tensor.hpp"

namespace mlqa {

/// Owns every trainable tensor of a model, in creation order. Each parameter is
/// initialized from its own stream seeded by (root seed, name), so a parameter's
/// initial value does not depend on which other parameters exist.
class ParameterStore {
 public:
  ParameterStore(DType dtype, std::uint64_t seed) : dtype_(dtype), seed_(seed) {}

  /// Normal(0, 1/sqrt(shape[0])): fan-in scaled init for (in, out) weights.
  Tensor weight(const std::string& name, Shape shape);
  Tensor normal(const std::string& name, Shape shape, double stddev);
  Tensor zeros(const std::string& name, Shape shape);
  Tensor ones(const std::string& name, Shape shape);

  std::vector<Parameter>& all() { return params_; }
  const std::vector<Parameter>& all() const { return params_; }
  const Parameter* find(std::string_view name) const;
  std::size_t count_with_prefix(std::string_view prefix) const;
  std::size_t scalar_count() const;
  void zero_grad();

  DType dtype() const { return dtype_; }
  std::uint64_t seed() const { return seed_; }

 private:
  Tensor add(const std::string& name, Tensor t);

  DType dtype_;
  std::uint64_t seed_;
  std::vector<Parameter> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// y = x W + b with W stored (in, out).
struct Linear {
  Linear() = default;
  Linear(ParameterStore& store, const std::string& prefix, std::size_t in, std::size_t out);
  Tensor operator()(const Tensor& x) const { return add(matmul(x, weight), bias); }
  /// Sets W and b to zero (used to build exact residual identities).
  void zero();

  Tensor weight;
  Tensor bias;
};

struct LayerNorm {
  LayerNorm() = default;
  LayerNorm(ParameterStore& store, const std::string& prefix, std::size_t dim);
  Tensor operator()(const Tensor& x) const { return layer_norm(x, gain, bias); }

  Tensor gain;
  Tensor bias;
};

/// Multi-head scaled dot-product attention with separate query/key/value/output
/// projections.
class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(ParameterStore& store, const std::string& prefix, std::size_t dim,
                     std::size_t heads);

  /// query: (B, Nq, D); context: (B, Nk, D); mask, when given, is (B, Nk).
  Tensor operator()(const Tensor& query, const Tensor& context, const KeyMask* mask = nullptr) const;

  Linear& output() { return out_; }
  std::size_t heads() const { return heads_; }

 private:
  Linear q_, k_, v_, out_;
  std::size_t dim_ = 0;
  std::size_t heads_ = 1;
};

/// Two affine maps around a GELU: dim -> hidden -> out.
struct FeedForward {
  FeedForward() = default;
  FeedForward(ParameterStore& store, const std::string& prefix, std::size_t dim, std::size_t hidden,
              std::size_t out);
  Tensor operator()(const Tensor& x) const { return fc2(gelu(fc1(x))); }

  Linear fc1;
  Linear fc2;
};

/// Pre-norm self-attention block: x + SA(LN(x)), then + FFN(LN(.)).
class TransformerLayer {
 public:
  TransformerLayer() = default;
  TransformerLayer(ParameterStore& store, const std::string& prefix, std::size_t dim,
                   std::size_t heads, std::size_t mlp_ratio = 4);
  Tensor operator()(const Tensor& x, const KeyMask* mask = nullptr) const;

 private:
  LayerNorm ln1_, ln2_;
  MultiHeadAttention attn_;
  FeedForward ffn_;
};

}  // namespace mlqa
