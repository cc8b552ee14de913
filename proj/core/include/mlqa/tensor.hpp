#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <type_traits>
#include <utility>
#include <variant>
#include <vector>

namespace mlqa {

enum class DType : std::uint8_t { kF32 = 0, kF64 = 1 };

const char* dtype_name(DType dt);
DType parse_dtype(const std::string& name);

template <class T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? DType::kF32 : DType::kF64;
}

/// Calls `f.template operator()<T>()` with T = float or double according to `dt`.
template <class F>
decltype(auto) dispatch(DType dt, F&& f) {
  if (dt == DType::kF32) return std::forward<F>(f).template operator()<float>();
  return std::forward<F>(f).template operator()<double>();
}

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

using Buffer = std::variant<std::vector<float>, std::vector<double>>;

namespace detail {

struct Node;
using NodePtr = std::shared_ptr<Node>;

/// Graph node. Data is written once by the producing primitive; only leaves
/// (parameters) are mutated afterwards, and only by the optimizer or a loader.
struct Node {
  Shape shape;
  DType dtype = DType::kF32;
  Buffer data;
  Buffer grad;  // empty vector when no gradient is held
  bool requires_grad = false;
  std::vector<NodePtr> inputs;
  std::function<void(Node&)> backward;  // null for leaves

  bool is_leaf() const { return !backward; }
  bool has_grad() const;

  template <class T>
  std::vector<T>& values() {
    return std::get<std::vector<T>>(data);
  }
  template <class T>
  std::vector<T>& grads();  // allocates zeros on first use
};

}  // namespace detail

/// Dense row-major tensor handle. Copies share the underlying node.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(detail::NodePtr node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, DType dtype, bool requires_grad = false);
  static Tensor full(Shape shape, double value, DType dtype, bool requires_grad = false);
  /// Values are converted to `dtype`. Throws DimensionError if sizes disagree.
  static Tensor from_values(Shape shape, const std::vector<double>& values, DType dtype,
                            bool requires_grad = false);
  template <class T>
  static Tensor from_buffer(Shape shape, std::vector<T> values, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  /// Extent of axis `axis`; negative counts from the back.
  std::size_t dim(int axis) const;
  std::size_t numel() const;
  DType dtype() const;

  template <class T>
  std::span<const T> data() const {
    return std::get<std::vector<T>>(node_->data);
  }
  /// Write access for leaves only (optimizer updates, loaders, test fixtures).
  template <class T>
  std::span<T> mutable_data();

  std::vector<double> to_vector() const;
  double item() const;
  double at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const;
  void set_requires_grad(bool on);
  bool has_grad() const;
  template <class T>
  std::span<const T> grad() const {
    return std::get<std::vector<T>>(node_->grad);
  }
  std::vector<double> grad_vector() const;
  void zero_grad();

  /// Reverse-mode sweep from this scalar. Leaf gradients accumulate across calls.
  void backward() const;

  /// Same data, no graph history, requires_grad off.
  Tensor detach() const;
  /// Converts to another dtype (no graph history).
  Tensor to(DType dtype) const;

  const detail::NodePtr& node() const { return node_; }

 private:
  detail::NodePtr node_;
};

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

/// Named trainable tensor. Names are dotted paths such as "glf.level2.query".
struct Parameter {
  std::string name;
  Tensor tensor;
};

// ---------------------------------------------------------------------------

namespace detail {

template <class T>
std::vector<T>& Node::grads() {
  if (auto* g = std::get_if<std::vector<T>>(&grad); g != nullptr && g->size() == numel(shape)) {
    return *g;
  }
  grad = std::vector<T>(numel(shape), T(0));
  return std::get<std::vector<T>>(grad);
}

}  // namespace detail

template <class T>
std::span<T> Tensor::mutable_data() {
  return std::get<std::vector<T>>(node_->data);
}

template <>
Tensor Tensor::from_buffer<float>(Shape shape, std::vector<float> values, bool requires_grad);
template <>
Tensor Tensor::from_buffer<double>(Shape shape, std::vector<double> values, bool requires_grad);

}  // namespace mlqa
