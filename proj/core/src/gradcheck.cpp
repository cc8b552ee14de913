#include "mlqa/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "mlqa/backbones.hpp"
#include "mlqa/errors.hpp"
#include "mlqa/ops.hpp"
#include "mlqa/rng.hpp"

namespace mlqa {

namespace {

Tensor random_tensor(Rng& rng, Shape shape, bool requires_grad, double scale = 1.0) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = scale * rng.normal();
  return Tensor::from_values(std::move(shape), v, DType::kF64, requires_grad);
}

/// Scalar probe sum(out * w) with fixed random weights, so every output element
/// contributes a distinct cotangent.
Tensor probe(const Tensor& out, const Tensor& weights) { return sum(mul(out, weights)); }

GradCheckEntry compare(const std::string& name, const std::vector<double>& analytic,
                       const std::vector<double>& numeric) {
  GradCheckEntry e;
  e.name = name;
  e.elements = analytic.size();
  double scale = kGradCheckFloor;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    e.max_abs_error = std::max(e.max_abs_error, std::abs(analytic[i] - numeric[i]));
    scale = std::max({scale, std::abs(analytic[i]), std::abs(numeric[i])});
  }
  e.max_rel_error = e.max_abs_error / scale;
  return e;
}

std::vector<double> numeric_gradient(const std::function<Tensor()>& loss, Tensor& input, double h) {
  NoGradGuard no_grad;
  std::vector<double> out(input.numel());
  auto x = input.mutable_data<double>();
  for (std::size_t k = 0; k < x.size(); ++k) {
    const double saved = x[k];
    x[k] = saved + h;
    const double plus = loss().item();
    x[k] = saved - h;
    const double minus = loss().item();
    x[k] = saved;
    out[k] = (plus - minus) / (2.0 * h);
  }
  return out;
}

}  // namespace

double GradCheckReport::max_rel_error() const {
  double m = 0.0;
  for (const auto& e : entries) m = std::max(m, e.max_rel_error);
  return m;
}

std::vector<GradCheckEntry> GradCheckReport::by_group() const {
  std::map<std::string, GradCheckEntry> groups;
  std::vector<std::string> order;
  for (const auto& e : entries) {
    const std::string g = e.name.substr(0, e.name.find('.'));
    auto [it, inserted] = groups.try_emplace(g);
    if (inserted) {
      order.push_back(g);
      it->second.name = g;
    }
    it->second.elements += e.elements;
    it->second.max_abs_error = std::max(it->second.max_abs_error, e.max_abs_error);
    it->second.max_rel_error = std::max(it->second.max_rel_error, e.max_rel_error);
  }
  std::vector<GradCheckEntry> out;
  for (const auto& g : order) out.push_back(groups.at(g));
  return out;
}

GradCheckEntry check_gradient(const std::string& name, const std::function<Tensor()>& loss, Tensor& input,
                              double h) {
  if (input.dtype() != DType::kF64) throw ContractError("check_gradient needs an f64 input");
  if (!input.requires_grad()) throw ContractError("check_gradient: input does not require grad");
  input.zero_grad();
  loss().backward();
  const std::vector<double> analytic = input.grad_vector();
  input.zero_grad();
  return compare(name, analytic, numeric_gradient(loss, input, h));
}

GradCheckReport gradcheck_primitives(std::uint64_t seed, double h) {
  Rng rng(derive_seed(seed, "gradcheck.primitives"));
  GradCheckReport report;
  auto run = [&](const std::string& name, std::vector<Tensor*> inputs, const std::function<Tensor()>& out) {
    const Tensor w = [&] {
      NoGradGuard g;
      return random_tensor(rng, out().shape(), false);
    }();
    const auto loss = [&] { return probe(out(), w); };
    for (std::size_t i = 0; i < inputs.size(); ++i) {
      const std::string label = inputs.size() == 1 ? name + ".x" : name + "." + std::string(1, static_cast<char>('a' + i));
      report.entries.push_back(check_gradient(label, loss, *inputs[i], h));
    }
  };

  {
    Tensor a = random_tensor(rng, {2, 3, 4}, true), b = random_tensor(rng, {3, 4}, true);
    run("add", {&a, &b}, [&] { return add(a, b); });
  }
  {
    Tensor a = random_tensor(rng, {2, 3, 4}, true), b = random_tensor(rng, {2, 3, 4}, true);
    run("sub", {&a, &b}, [&] { return sub(a, b); });
    run("mul", {&a, &b}, [&] { return mul(a, b); });
    run("scale", {&a}, [&] { return scale(a, -1.7); });
    run("square", {&a}, [&] { return square(a); });
    run("sum", {&a}, [&] { return sum(a); });
    run("mean", {&a}, [&] { return mean(a); });
    run("transpose", {&a}, [&] { return transpose_last2(a); });
    run("reshape", {&a}, [&] { return reshape(a, {6, 4}); });
    run("gelu", {&a}, [&] { return gelu(a); });
    run("mean_tokens", {&a}, [&] { return mean_tokens(a); });
    run("slice_tokens", {&a}, [&] { return slice_tokens(a, 1, 2); });
    Tensor label = random_tensor(rng, {2, 3, 4}, false);
    run("mse_loss", {&a}, [&] { return mse_loss(a, label); });
  }
  {
    Tensor a = random_tensor(rng, {2, 3, 4}, true), b = random_tensor(rng, {2, 4, 5}, true);
    run("matmul_batched", {&a, &b}, [&] { return matmul(a, b); });
    Tensor s = random_tensor(rng, {4, 5}, true);
    run("matmul_shared", {&a, &s}, [&] { return matmul(a, s); });
  }
  {
    Tensor a = random_tensor(rng, {2, 3, 4, 5}, true);
    run("swap_axes", {&a}, [&] { return swap_axes_1_2(a); });
  }
  {
    Tensor x = random_tensor(rng, {2, 3, 5}, true);
    KeyMask mask{2, 5, {1, 1, 0, 1, 0, 1, 1, 1, 1, 1}};
    run("softmax", {&x}, [&] { return softmax_last(x); });
    run("softmax_masked", {&x}, [&] { return softmax_last(x, &mask); });
  }
  {
    Tensor x = random_tensor(rng, {2, 3, 6}, true), g = random_tensor(rng, {6}, true), b = random_tensor(rng, {6}, true);
    run("layer_norm", {&x, &g, &b}, [&] { return layer_norm(x, g, b); });
  }
  {
    Tensor a = random_tensor(rng, {2, 2, 3}, true), b = random_tensor(rng, {2, 3, 3}, true);
    run("concat_tokens", {&a, &b}, [&] { return concat_tokens({a, b}); });
    Tensor q = random_tensor(rng, {3, 4}, true);
    run("expand_batch", {&q}, [&] { return expand_batch(q, 3); });
  }
  {
    Tensor table = random_tensor(rng, {6, 4}, true);
    const std::vector<std::int32_t> ids{0, 3, 3, 5, 1, 0};
    run("embedding", {&table}, [&] { return embedding(table, ids, 2, 3); });
  }
  {
    Tensor x = random_tensor(rng, {2, 2, 6, 6}, true), w = random_tensor(rng, {3, 18}, true, 0.3),
           b = random_tensor(rng, {3}, true);
    run("conv2d", {&x, &w, &b}, [&] { return conv2d(x, w, b, 3, 2, 1); });
    run("conv2d_stride1", {&x, &w, &b}, [&] { return conv2d(x, w, b, 3, 1, 1); });
  }
  {
    Tensor x = random_tensor(rng, {2, 2, 8, 8}, true);
    run("patchify", {&x}, [&] { return patchify(x, 4); });
    run("flatten_spatial", {&x}, [&] { return flatten_spatial(x); });
  }
  return report;
}

ModelConfig tiny_model_config(Task task, std::uint64_t seed) {
  ModelConfig cfg;
  cfg.task = task;
  cfg.dtype = DType::kF64;
  cfg.seed = seed;
  cfg.image.image_size = 16;
  cfg.image.patch_size = 8;
  cfg.image.channels = 3;
  cfg.image.depth = 4;
  cfg.image.dim = 8;
  cfg.image.heads = 2;
  cfg.image.taps = {1, 2, 3, 4};
  cfg.cnn.channels = 3;
  cfg.cnn.base_channels = 2;
  cfg.text.vocab_size = 8;
  cfg.text.dim = 8;
  cfg.text.depth = 1;
  cfg.text.heads = 2;
  cfg.text.max_tokens = 4;
  cfg.queries = 2;
  cfg.fusion_heads = 2;
  return cfg;
}

GradCheckReport gradcheck_model(const ModelConfig& cfg, std::uint64_t seed, double h) {
  if (cfg.dtype != DType::kF64) throw ConfigError("gradcheck_model needs an f64 model");
  QualityModel model(cfg);
  Rng rng(derive_seed(seed, "gradcheck.model"));
  const std::size_t s = cfg.image.image_size;
  const Tensor images = random_tensor(rng, {2, cfg.image.channels, s, s}, false);
  const Tensor target = random_tensor(rng, {2, 1}, false);
  std::optional<PromptBatch> prompts;
  if (cfg.uses_text()) {
    const auto vocab = static_cast<std::int32_t>(cfg.text.vocab_size);
    std::vector<std::vector<std::int32_t>> seqs{{1, 2 % vocab + 1}, {3 % (vocab - 1) + 1}};
    prompts = PromptBatch::from_sequences(seqs, cfg.text.max_tokens, cfg.text.pad_id);
  }
  const auto loss = [&] { return mse_loss(model.forward(images, prompts ? &*prompts : nullptr), target); };

  auto& params = model.parameters().all();
  model.parameters().zero_grad();
  loss().backward();
  std::vector<std::vector<double>> analytic;
  for (const auto& p : params) analytic.push_back(p.tensor.grad_vector());
  model.parameters().zero_grad();

  GradCheckReport report;
  for (std::size_t i = 0; i < params.size(); ++i) {
    report.entries.push_back(compare(params[i].name, analytic[i], numeric_gradient(loss, params[i].tensor, h)));
  }
  return report;
}

}  // namespace mlqa
