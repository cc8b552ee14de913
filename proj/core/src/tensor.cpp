#include "mlqa/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>

#include "mlqa/errors.hpp"

namespace mlqa {

namespace {
thread_local bool g_grad_enabled = true;
}  // namespace

const char* dtype_name(DType dt) { return dt == DType::kF32 ? "f32" : "f64"; }

DType parse_dtype(const std::string& name) {
  if (name == "f32" || name == "float32") return DType::kF32;
  if (name == "f64" || name == "float64") return DType::kF64;
  throw ConfigError("unknown dtype '" + name + "' (expected f32 or f64)");
}

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  if (shape.size() == 1) os << ',';
  os << ')';
  return os.str();
}

bool detail::Node::has_grad() const {
  return std::visit([](const auto& g) { return !g.empty(); }, grad);
}

Tensor Tensor::zeros(Shape shape, DType dtype, bool requires_grad) {
  return full(std::move(shape), 0.0, dtype, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, DType dtype, bool requires_grad) {
  for (auto e : shape) {
    if (e == 0) throw DimensionError("tensor extents must be positive, got " + to_string(shape));
  }
  auto node = std::make_shared<detail::Node>();
  const std::size_t n = mlqa::numel(shape);
  node->shape = std::move(shape);
  node->dtype = dtype;
  dispatch(dtype, [&]<class T>() { node->data = std::vector<T>(n, static_cast<T>(value)); });
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::from_values(Shape shape, const std::vector<double>& values, DType dtype,
                           bool requires_grad) {
  Tensor t = zeros(shape, dtype, requires_grad);
  if (values.size() != t.numel()) {
    throw DimensionError("from_values: shape " + to_string(shape) + " needs " +
                         std::to_string(t.numel()) + " values, got " +
                         std::to_string(values.size()));
  }
  dispatch(dtype, [&]<class T>() {
    auto out = t.mutable_data<T>();
    std::transform(values.begin(), values.end(), out.begin(),
                   [](double v) { return static_cast<T>(v); });
  });
  return t;
}

template <class T>
static Tensor from_typed(Shape shape, std::vector<T> values, bool requires_grad) {
  if (values.size() != numel(shape)) {
    throw DimensionError("from_buffer: shape " + to_string(shape) + " needs " +
                         std::to_string(numel(shape)) + " values, got " +
                         std::to_string(values.size()));
  }
  for (auto e : shape) {
    if (e == 0) throw DimensionError("tensor extents must be positive, got " + to_string(shape));
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->dtype = dtype_of<T>();
  node->data = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

template <>
Tensor Tensor::from_buffer<float>(Shape shape, std::vector<float> values, bool requires_grad) {
  return from_typed(std::move(shape), std::move(values), requires_grad);
}

template <>
Tensor Tensor::from_buffer<double>(Shape shape, std::vector<double> values, bool requires_grad) {
  return from_typed(std::move(shape), std::move(values), requires_grad);
}

const Shape& Tensor::shape() const { return node_->shape; }

std::size_t Tensor::dim(int axis) const {
  const int r = static_cast<int>(rank());
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " +
                         to_string(shape()));
  }
  return shape()[static_cast<std::size_t>(a)];
}

std::size_t Tensor::numel() const { return mlqa::numel(node_->shape); }

DType Tensor::dtype() const { return node_->dtype; }

std::vector<double> Tensor::to_vector() const {
  return std::visit([](const auto& v) { return std::vector<double>(v.begin(), v.end()); },
                    node_->data);
}

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + to_string(shape()));
  return to_vector()[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  if (index.size() != rank()) throw DimensionError("at(): index rank mismatch");
  std::size_t flat = 0;
  std::size_t i = 0;
  for (auto idx : index) {
    if (idx >= shape()[i]) throw DimensionError("at(): index out of range");
    flat = flat * shape()[i] + idx;
    ++i;
  }
  return std::visit([flat](const auto& v) { return static_cast<double>(v[flat]); }, node_->data);
}

bool Tensor::requires_grad() const { return node_->requires_grad; }

void Tensor::set_requires_grad(bool on) {
  if (!node_->is_leaf()) throw ContractError("requires_grad can only be toggled on leaves");
  node_->requires_grad = on;
}

bool Tensor::has_grad() const { return node_->has_grad(); }

std::vector<double> Tensor::grad_vector() const {
  if (!has_grad()) return std::vector<double>(numel(), 0.0);
  return std::visit([](const auto& v) { return std::vector<double>(v.begin(), v.end()); },
                    node_->grad);
}

void Tensor::zero_grad() {
  dispatch(dtype(), [&]<class T>() { node_->grad = std::vector<T>{}; });
}

Tensor Tensor::detach() const {
  auto node = std::make_shared<detail::Node>();
  node->shape = node_->shape;
  node->dtype = node_->dtype;
  node->data = node_->data;
  return Tensor(std::move(node));
}

Tensor Tensor::to(DType target) const {
  if (target == dtype()) return detach();
  return from_values(shape(), to_vector(), target);
}

void Tensor::backward() const {
  if (numel() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " + to_string(shape()));
  }
  if (!node_->requires_grad) {
    throw ContractError("backward(): loss does not depend on any tensor that requires grad");
  }

  // Post-order DFS over the recorded graph, restricted to grad-requiring nodes.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->inputs.size()) {
      detail::Node* child = n->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  for (auto* n : order) {
    if (!n->is_leaf()) {
      dispatch(n->dtype, [&]<class T>() { n->grad = std::vector<T>(mlqa::numel(n->shape), T(0)); });
    }
  }
  dispatch(node_->dtype, [&]<class T>() { node_->grads<T>()[0] += T(1); });

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if (!(*it)->is_leaf()) (*it)->backward(**it);
  }
  for (auto* n : order) {
    if (!n->is_leaf()) {
      dispatch(n->dtype, [&]<class T>() { n->grad = std::vector<T>{}; });
    }
  }
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }

}  // namespace mlqa
