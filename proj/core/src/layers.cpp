#include "mlqa/layers.hpp"

#include <cmath>

#include "mlqa/errors.hpp"
#include "mlqa/rng.hpp"

namespace mlqa {

Tensor ParameterStore::add(const std::string& name, Tensor t) {
  if (index_.contains(name)) throw ContractError("duplicate parameter name '" + name + "'");
  t.set_requires_grad(true);
  index_.emplace(name, params_.size());
  params_.push_back(Parameter{name, t});
  return t;
}

Tensor ParameterStore::normal(const std::string& name, Shape shape, double stddev) {
  Rng rng(derive_seed(seed_, name));
  std::vector<double> values(numel(shape));
  for (auto& v : values) v = stddev * rng.normal();
  return add(name, Tensor::from_values(std::move(shape), values, dtype_));
}

Tensor ParameterStore::weight(const std::string& name, Shape shape) {
  const double fan_in = static_cast<double>(shape.front());
  return normal(name, std::move(shape), 1.0 / std::sqrt(fan_in));
}

Tensor ParameterStore::zeros(const std::string& name, Shape shape) {
  return add(name, Tensor::zeros(std::move(shape), dtype_));
}

Tensor ParameterStore::ones(const std::string& name, Shape shape) {
  return add(name, Tensor::full(std::move(shape), 1.0, dtype_));
}

const Parameter* ParameterStore::find(std::string_view name) const {
  auto it = index_.find(std::string(name));
  return it == index_.end() ? nullptr : &params_[it->second];
}

std::size_t ParameterStore::count_with_prefix(std::string_view prefix) const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.name.starts_with(prefix) ? 1 : 0;
  return n;
}

std::size_t ParameterStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.tensor.numel();
  return n;
}

void ParameterStore::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

Linear::Linear(ParameterStore& store, const std::string& prefix, std::size_t in, std::size_t out)
    : weight(store.weight(prefix + ".weight", {in, out})), bias(store.zeros(prefix + ".bias", {out})) {}

void Linear::zero() {
  dispatch(weight.dtype(), [&]<class T>() {
    for (auto& v : weight.mutable_data<T>()) v = T(0);
    for (auto& v : bias.mutable_data<T>()) v = T(0);
  });
}

LayerNorm::LayerNorm(ParameterStore& store, const std::string& prefix, std::size_t dim)
    : gain(store.ones(prefix + ".gain", {dim})), bias(store.zeros(prefix + ".bias", {dim})) {}

MultiHeadAttention::MultiHeadAttention(ParameterStore& store, const std::string& prefix,
                                       std::size_t dim, std::size_t heads)
    : q_(store, prefix + ".query", dim, dim),
      k_(store, prefix + ".key", dim, dim),
      v_(store, prefix + ".value", dim, dim),
      out_(store, prefix + ".output", dim, dim),
      dim_(dim),
      heads_(heads) {
  if (heads == 0 || dim % heads != 0) {
    throw ConfigError(prefix + ": width " + std::to_string(dim) + " not divisible by " +
                      std::to_string(heads) + " heads");
  }
}

namespace {

// (B, N, D) -> (B, H, N, D/H)
Tensor split_heads(const Tensor& x, std::size_t heads) {
  const std::size_t b = x.dim(0), n = x.dim(1), d = x.dim(2);
  return swap_axes_1_2(reshape(x, {b, n, heads, d / heads}));
}

// (B, H, N, dh) -> (B, N, H*dh)
Tensor merge_heads(const Tensor& x) {
  const std::size_t b = x.dim(0), h = x.dim(1), n = x.dim(2), dh = x.dim(3);
  return reshape(swap_axes_1_2(x), {b, n, h * dh});
}

}  // namespace

Tensor MultiHeadAttention::operator()(const Tensor& query, const Tensor& context,
                                      const KeyMask* mask) const {
  if (query.rank() != 3 || context.rank() != 3 || query.dim(2) != dim_ || context.dim(2) != dim_ ||
      query.dim(0) != context.dim(0)) {
    throw DimensionError("attention: query " + to_string(query.shape()) + " and context " +
                         to_string(context.shape()) + " incompatible with width " +
                         std::to_string(dim_));
  }
  if (mask != nullptr && (mask->keys != context.dim(1) || mask->batch != context.dim(0))) {
    throw DimensionError("attention: mask (" + std::to_string(mask->batch) + ", " +
                         std::to_string(mask->keys) + ") does not match context " +
                         to_string(context.shape()));
  }
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dim_ / heads_));
  Tensor q = split_heads(scale(q_(query), inv_sqrt_dh), heads_);
  Tensor k = split_heads(k_(context), heads_);
  Tensor v = split_heads(v_(context), heads_);
  Tensor weights = softmax_last(matmul(q, transpose_last2(k)), mask);
  return out_(merge_heads(matmul(weights, v)));
}

FeedForward::FeedForward(ParameterStore& store, const std::string& prefix, std::size_t dim,
                         std::size_t hidden, std::size_t out)
    : fc1(store, prefix + ".fc1", dim, hidden), fc2(store, prefix + ".fc2", hidden, out) {}

TransformerLayer::TransformerLayer(ParameterStore& store, const std::string& prefix,
                                   std::size_t dim, std::size_t heads, std::size_t mlp_ratio)
    : ln1_(store, prefix + ".ln1", dim),
      ln2_(store, prefix + ".ln2", dim),
      attn_(store, prefix + ".attn", dim, heads),
      ffn_(store, prefix + ".ffn", dim, dim * mlp_ratio, dim) {}

Tensor TransformerLayer::operator()(const Tensor& x, const KeyMask* mask) const {
  Tensor normed = ln1_(x);
  Tensor h = add(x, attn_(normed, normed, mask));
  return add(h, ffn_(ln2_(h)));
}

}  // namespace mlqa
