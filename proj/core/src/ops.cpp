#include "mlqa/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include "mlqa/errors.hpp"

namespace mlqa {

using detail::Node;
using detail::NodePtr;

template <class T>
T pairwise_sum(std::span<const T> values) {
  constexpr std::size_t kBlock = 8;
  if (values.size() <= kBlock) {
    T acc = T(0);
    for (T v : values) acc += v;
    return acc;
  }
  const std::size_t half = values.size() / 2;
  return pairwise_sum(values.first(half)) + pairwise_sum(values.subspan(half));
}

template float pairwise_sum<float>(std::span<const float>);
template double pairwise_sum<double>(std::span<const double>);

KeyMask KeyMask::with_appended(std::size_t extra) const {
  KeyMask out;
  out.batch = batch;
  out.keys = keys + extra;
  out.valid.assign(out.batch * out.keys, 1);
  for (std::size_t b = 0; b < batch; ++b) {
    std::copy_n(valid.begin() + static_cast<std::ptrdiff_t>(b * keys), keys,
                out.valid.begin() + static_cast<std::ptrdiff_t>(b * out.keys));
  }
  return out;
}

namespace {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

template <class T>
ConstMatMap<T> cmap(const T* p, std::size_t rows, std::size_t cols) {
  return ConstMatMap<T>(p, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
template <class T>
MatMap<T> mmap(T* p, std::size_t rows, std::size_t cols) {
  return MatMap<T>(p, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

void require_same_dtype(const char* op, const Tensor& a, const Tensor& b) {
  if (a.dtype() != b.dtype()) {
    throw ContractError(std::string(op) + ": dtype mismatch (" + dtype_name(a.dtype()) + " vs " +
                        dtype_name(b.dtype()) + ")");
  }
}

template <class T>
void check_finite(const char* op, const std::vector<T>& v) {
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!std::isfinite(v[i])) {
      throw NumericalError(std::string(op) + ": non-finite value at flat index " +
                           std::to_string(i));
    }
  }
}

template <class T>
const std::vector<T>& values(const NodePtr& n) {
  return std::get<std::vector<T>>(n->data);
}

template <class T>
const std::vector<T>& out_grad(const Node& self) {
  return std::get<std::vector<T>>(self.grad);
}

/// Wraps freshly computed data into a tensor. The backward closure is recorded only
/// when graph recording is on and some input requires a gradient.
template <class T, class Backward>
Tensor make_result(const char* op, Shape shape, std::vector<T> data,
                   std::initializer_list<const Tensor*> inputs, Backward&& backward) {
  check_finite(op, data);
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->dtype = dtype_of<T>();
  node->data = std::move(data);
  bool needs = false;
  for (const Tensor* in : inputs) needs = needs || in->requires_grad();
  if (needs && grad_enabled()) {
    node->requires_grad = true;
    for (const Tensor* in : inputs) node->inputs.push_back(in->node());
    node->backward = std::forward<Backward>(backward);
  }
  return Tensor(std::move(node));
}

template <class T, class Backward>
Tensor make_result_n(const char* op, Shape shape, std::vector<T> data,
                     std::span<const Tensor> inputs, Backward&& backward) {
  check_finite(op, data);
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->dtype = dtype_of<T>();
  node->data = std::move(data);
  bool needs = false;
  for (const Tensor& in : inputs) needs = needs || in.requires_grad();
  if (needs && grad_enabled()) {
    node->requires_grad = true;
    for (const Tensor& in : inputs) node->inputs.push_back(in.node());
    node->backward = std::forward<Backward>(backward);
  }
  return Tensor(std::move(node));
}

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

constexpr double kInvSqrt2 = 0.70710678118654752440;

double gaussian_cdf(double x) { return 0.5 * std::erfc(-x * kInvSqrt2); }
double gaussian_pdf(double x) {
  return std::exp(-0.5 * x * x) * (std::numbers::inv_sqrtpi * kInvSqrt2);
}

}  // namespace

// --------------------------------------------------------------------------- elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_dtype("add", a, b);
  if (!is_suffix(b.shape(), a.shape())) {
    throw DimensionError("add: shape " + to_string(b.shape()) + " does not broadcast onto " +
                         to_string(a.shape()));
  }
  return dispatch(a.dtype(), [&]<class T>() {
    const auto& av = values<T>(a.node());
    const auto& bv = values<T>(b.node());
    const std::size_t inner = bv.size();
    const std::size_t outer = av.size() / inner;
    std::vector<T> out(av.size());
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] = av[o * inner + i] + bv[i];
    }
    return make_result<T>("add", a.shape(), std::move(out), {&a, &b},
                          [an = a.node(), bn = b.node(), inner, outer](Node& self) {
                            const auto& g = out_grad<T>(self);
                            if (an->requires_grad) {
                              auto& ga = an->grads<T>();
                              for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                            }
                            if (bn->requires_grad) {
                              auto& gb = bn->grads<T>();
                              for (std::size_t o = 0; o < outer; ++o) {
                                for (std::size_t i = 0; i < inner; ++i) gb[i] += g[o * inner + i];
                              }
                            }
                          });
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_dtype("sub", a, b);
  if (a.shape() != b.shape()) {
    throw DimensionError("sub: shapes " + to_string(a.shape()) + " and " + to_string(b.shape()) +
                         " differ");
  }
  return dispatch(a.dtype(), [&]<class T>() {
    const auto& av = values<T>(a.node());
    const auto& bv = values<T>(b.node());
    std::vector<T> out(av.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
    return make_result<T>("sub", a.shape(), std::move(out), {&a, &b},
                          [an = a.node(), bn = b.node()](Node& self) {
                            const auto& g = out_grad<T>(self);
                            if (an->requires_grad) {
                              auto& ga = an->grads<T>();
                              for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                            }
                            if (bn->requires_grad) {
                              auto& gb = bn->grads<T>();
                              for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
                            }
                          });
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_dtype("mul", a, b);
  if (a.shape() != b.shape()) {
    throw DimensionError("mul: shapes " + to_string(a.shape()) + " and " + to_string(b.shape()) +
                         " differ");
  }
  return dispatch(a.dtype(), [&]<class T>() {
    const auto& av = values<T>(a.node());
    const auto& bv = values<T>(b.node());
    std::vector<T> out(av.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
    return make_result<T>("mul", a.shape(), std::move(out), {&a, &b},
                          [an = a.node(), bn = b.node()](Node& self) {
                            const auto& g = out_grad<T>(self);
                            const auto& av = values<T>(an);
                            const auto& bv = values<T>(bn);
                            if (an->requires_grad) {
                              auto& ga = an->grads<T>();
                              for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
                            }
                            if (bn->requires_grad) {
                              auto& gb = bn->grads<T>();
                              for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
                            }
                          });
  });
}

Tensor scale(const Tensor& a, double factor) {
  return dispatch(a.dtype(), [&]<class T>() {
    const auto& av = values<T>(a.node());
    const T f = static_cast<T>(factor);
    std::vector<T> out(av.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * f;
    return make_result<T>("scale", a.shape(), std::move(out), {&a}, [an = a.node(), f](Node& self) {
      const auto& g = out_grad<T>(self);
      auto& ga = an->grads<T>();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * f;
    });
  });
}

Tensor square(const Tensor& a) {
  return dispatch(a.dtype(), [&]<class T>() {
    const auto& av = values<T>(a.node());
    std::vector<T> out(av.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * av[i];
    return make_result<T>("square", a.shape(), std::move(out), {&a}, [an = a.node()](Node& self) {
      const auto& g = out_grad<T>(self);
      const auto& av = values<T>(an);
      auto& ga = an->grads<T>();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += T(2) * av[i] * g[i];
    });
  });
}

Tensor sum(const Tensor& a) {
  return dispatch(a.dtype(), [&]<class T>() {
    const auto& av = values<T>(a.node());
    std::vector<T> out{pairwise_sum<T>(av)};
    return make_result<T>("sum", Shape{1}, std::move(out), {&a}, [an = a.node()](Node& self) {
      const T g = out_grad<T>(self)[0];
      for (auto& v : an->grads<T>()) v += g;
    });
  });
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

// --------------------------------------------------------------------------- matmul & layout

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_same_dtype("matmul", a, b);
  const auto fail = [&](const std::string& why) {
    return DimensionError("matmul: " + why + " for shapes " + to_string(a.shape()) + " and " +
                          to_string(b.shape()));
  };
  if (a.rank() < 2 || b.rank() < 2) throw fail("operands need rank >= 2");
  const std::size_t m = a.dim(-2);
  const std::size_t k = a.dim(-1);
  const std::size_t n = b.dim(-1);
  if (b.dim(-2) != k) throw fail("inner extents differ");
  const bool shared_b = b.rank() == 2;
  if (!shared_b) {
    if (b.rank() != a.rank() ||
        !std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin())) {
      throw fail("batch extents not broadcastable");
    }
  }
  Shape out_shape(a.shape().begin(), a.shape().end() - 2);
  const std::size_t batch = numel(out_shape);
  out_shape.push_back(m);
  out_shape.push_back(n);

  return dispatch(a.dtype(), [&]<class T>() {
    const auto& av = values<T>(a.node());
    const auto& bv = values<T>(b.node());
    std::vector<T> out(batch * m * n);
    if (shared_b) {
      mmap(out.data(), batch * m, n).noalias() = cmap(av.data(), batch * m, k) * cmap(bv.data(), k, n);
    } else {
      for (std::size_t i = 0; i < batch; ++i) {
        mmap(out.data() + i * m * n, m, n).noalias() =
            cmap(av.data() + i * m * k, m, k) * cmap(bv.data() + i * k * n, k, n);
      }
    }
    return make_result<T>(
        "matmul", out_shape, std::move(out), {&a, &b},
        [an = a.node(), bn = b.node(), batch, m, k, n, shared_b](Node& self) {
          const auto& g = out_grad<T>(self);
          const auto& av = values<T>(an);
          const auto& bv = values<T>(bn);
          if (shared_b) {
            if (an->requires_grad) {
              mmap(an->grads<T>().data(), batch * m, k).noalias() +=
                  cmap(g.data(), batch * m, n) * cmap(bv.data(), k, n).transpose();
            }
            if (bn->requires_grad) {
              mmap(bn->grads<T>().data(), k, n).noalias() +=
                  cmap(av.data(), batch * m, k).transpose() * cmap(g.data(), batch * m, n);
            }
            return;
          }
          for (std::size_t i = 0; i < batch; ++i) {
            const auto gi = cmap(g.data() + i * m * n, m, n);
            if (an->requires_grad) {
              mmap(an->grads<T>().data() + i * m * k, m, k).noalias() +=
                  gi * cmap(bv.data() + i * k * n, k, n).transpose();
            }
            if (bn->requires_grad) {
              mmap(bn->grads<T>().data() + i * k * n, k, n).noalias() +=
                  cmap(av.data() + i * m * k, m, k).transpose() * gi;
            }
          }
        });
  });
}

Tensor transpose_last2(const Tensor& a) {
  if (a.rank() < 2) throw DimensionError("transpose_last2: rank < 2 for " + to_string(a.shape()));
  const std::size_t r = a.dim(-2);
  const std::size_t c = a.dim(-1);
  const std::size_t batch = a.numel() / (r * c);
  Shape out_shape = a.shape();
  std::swap(out_shape[out_shape.size() - 1], out_shape[out_shape.size() - 2]);
  return dispatch(a.dtype(), [&]<class T>() {
    const auto& av = values<T>(a.node());
    std::vector<T> out(av.size());
    for (std::size_t i = 0; i < batch; ++i) {
      mmap(out.data() + i * r * c, c, r) = cmap(av.data() + i * r * c, r, c).transpose();
    }
    return make_result<T>("transpose_last2", out_shape, std::move(out), {&a},
                          [an = a.node(), batch, r, c](Node& self) {
                            const auto& g = out_grad<T>(self);
                            auto& ga = an->grads<T>();
                            for (std::size_t i = 0; i < batch; ++i) {
                              mmap(ga.data() + i * r * c, r, c) +=
                                  cmap(g.data() + i * r * c, c, r).transpose();
                            }
                          });
  });
}

Tensor swap_axes_1_2(const Tensor& a) {
  if (a.rank() != 4) throw DimensionError("swap_axes_1_2: expected rank 4, got " + to_string(a.shape()));
  const std::size_t d0 = a.dim(0), d1 = a.dim(1), d2 = a.dim(2), d3 = a.dim(3);
  return dispatch(a.dtype(), [&]<class T>() {
    const auto& av = values<T>(a.node());
    std::vector<T> out(av.size());
    for (std::size_t i = 0; i < d0; ++i) {
      for (std::size_t j = 0; j < d1; ++j) {
        for (std::size_t l = 0; l < d2; ++l) {
          const T* src = av.data() + ((i * d1 + j) * d2 + l) * d3;
          T* dst = out.data() + ((i * d2 + l) * d1 + j) * d3;
          std::copy_n(src, d3, dst);
        }
      }
    }
    return make_result<T>("swap_axes_1_2", Shape{d0, d2, d1, d3}, std::move(out), {&a},
                          [an = a.node(), d0, d1, d2, d3](Node& self) {
                            const auto& g = out_grad<T>(self);
                            auto& ga = an->grads<T>();
                            for (std::size_t i = 0; i < d0; ++i) {
                              for (std::size_t j = 0; j < d1; ++j) {
                                for (std::size_t l = 0; l < d2; ++l) {
                                  T* dst = ga.data() + ((i * d1 + j) * d2 + l) * d3;
                                  const T* src = g.data() + ((i * d2 + l) * d1 + j) * d3;
                                  for (std::size_t e = 0; e < d3; ++e) dst[e] += src[e];
                                }
                              }
                            }
                          });
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.numel()) {
    throw DimensionError("reshape: cannot view " + to_string(a.shape()) + " as " + to_string(shape));
  }
  return dispatch(a.dtype(), [&]<class T>() {
    std::vector<T> out = values<T>(a.node());
    return make_result<T>("reshape", std::move(shape), std::move(out), {&a},
                          [an = a.node()](Node& self) {
                            const auto& g = out_grad<T>(self);
                            auto& ga = an->grads<T>();
                            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                          });
  });
}

// --------------------------------------------------------------------------- normalization

Tensor softmax_last(const Tensor& x, const KeyMask* mask) {
  const std::size_t n = x.dim(-1);
  const std::size_t rows = x.numel() / n;
  std::size_t rows_per_batch = rows;
  if (mask != nullptr) {
    if (mask->keys != n || mask->batch != x.dim(0) || x.rank() < 2) {
      throw DimensionError("softmax_last: mask (" + std::to_string(mask->batch) + ", " +
                           std::to_string(mask->keys) + ") does not match scores " +
                           to_string(x.shape()));
    }
    rows_per_batch = rows / mask->batch;
  }
  return dispatch(x.dtype(), [&]<class T>() {
    const auto& xv = values<T>(x.node());
    std::vector<T> out(xv.size(), T(0));
    std::vector<T> tmp(n);
    for (std::size_t r = 0; r < rows; ++r) {
      const T* in = xv.data() + r * n;
      T* y = out.data() + r * n;
      const std::size_t b = r / rows_per_batch;
      const auto valid = [&](std::size_t j) { return mask == nullptr || mask->is_valid(b, j); };
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t j = 0; j < n; ++j) {
        if (valid(j)) mx = std::max(mx, in[j]);
      }
      if (mx == -std::numeric_limits<T>::infinity()) continue;  // fully masked row
      for (std::size_t j = 0; j < n; ++j) tmp[j] = valid(j) ? std::exp(in[j] - mx) : T(0);
      const T total = pairwise_sum<T>(tmp);
      for (std::size_t j = 0; j < n; ++j) y[j] = tmp[j] / total;
    }
    return make_result<T>("softmax_last", x.shape(), std::move(out), {&x},
                          [xn = x.node(), rows, n](Node& self) {
                            const auto& g = out_grad<T>(self);
                            const auto& y = std::get<std::vector<T>>(self.data);
                            auto& gx = xn->grads<T>();
                            for (std::size_t r = 0; r < rows; ++r) {
                              const std::size_t o = r * n;
                              T dot = T(0);
                              for (std::size_t j = 0; j < n; ++j) dot += g[o + j] * y[o + j];
                              for (std::size_t j = 0; j < n; ++j) gx[o + j] += y[o + j] * (g[o + j] - dot);
                            }
                          });
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
  require_same_dtype("layer_norm", x, gain);
  require_same_dtype("layer_norm", x, bias);
  const std::size_t d = x.dim(-1);
  if (gain.shape() != Shape{d} || bias.shape() != Shape{d}) {
    throw DimensionError("layer_norm: gain/bias " + to_string(gain.shape()) + "/" +
                         to_string(bias.shape()) + " do not match width of " + to_string(x.shape()));
  }
  const std::size_t rows = x.numel() / d;
  return dispatch(x.dtype(), [&]<class T>() {
    const auto& xv = values<T>(x.node());
    const auto& gv = values<T>(gain.node());
    const auto& bv = values<T>(bias.node());
    std::vector<T> out(xv.size());
    std::vector<T> xhat(xv.size());
    std::vector<T> rstd(rows);
    std::vector<T> tmp(d);
    for (std::size_t r = 0; r < rows; ++r) {
      const T* in = xv.data() + r * d;
      const T mu = pairwise_sum<T>(std::span<const T>(in, d)) / static_cast<T>(d);
      for (std::size_t j = 0; j < d; ++j) tmp[j] = (in[j] - mu) * (in[j] - mu);
      const T var = pairwise_sum<T>(tmp) / static_cast<T>(d);
      rstd[r] = T(1) / std::sqrt(var + static_cast<T>(kLayerNormEps));
      for (std::size_t j = 0; j < d; ++j) {
        xhat[r * d + j] = (in[j] - mu) * rstd[r];
        out[r * d + j] = xhat[r * d + j] * gv[j] + bv[j];
      }
    }
    return make_result<T>(
        "layer_norm", x.shape(), std::move(out), {&x, &gain, &bias},
        [xn = x.node(), gn = gain.node(), bn = bias.node(), xhat = std::move(xhat),
         rstd = std::move(rstd), rows, d](Node& self) {
          const auto& g = out_grad<T>(self);
          const auto& gv = values<T>(gn);
          if (gn->requires_grad) {
            auto& gg = gn->grads<T>();
            for (std::size_t r = 0; r < rows; ++r) {
              for (std::size_t j = 0; j < d; ++j) gg[j] += g[r * d + j] * xhat[r * d + j];
            }
          }
          if (bn->requires_grad) {
            auto& gb = bn->grads<T>();
            for (std::size_t r = 0; r < rows; ++r) {
              for (std::size_t j = 0; j < d; ++j) gb[j] += g[r * d + j];
            }
          }
          if (xn->requires_grad) {
            auto& gx = xn->grads<T>();
            std::vector<T> dxhat(d);
            for (std::size_t r = 0; r < rows; ++r) {
              T s1 = T(0), s2 = T(0);
              for (std::size_t j = 0; j < d; ++j) {
                dxhat[j] = g[r * d + j] * gv[j];
                s1 += dxhat[j];
                s2 += dxhat[j] * xhat[r * d + j];
              }
              s1 /= static_cast<T>(d);
              s2 /= static_cast<T>(d);
              for (std::size_t j = 0; j < d; ++j) {
                gx[r * d + j] += rstd[r] * (dxhat[j] - s1 - xhat[r * d + j] * s2);
              }
            }
          }
        });
  });
}

Tensor gelu(const Tensor& x) {
  return dispatch(x.dtype(), [&]<class T>() {
    const auto& xv = values<T>(x.node());
    std::vector<T> out(xv.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
      const double v = xv[i];
      out[i] = static_cast<T>(v * gaussian_cdf(v));
    }
    return make_result<T>("gelu", x.shape(), std::move(out), {&x}, [xn = x.node()](Node& self) {
      const auto& g = out_grad<T>(self);
      const auto& xv = values<T>(xn);
      auto& gx = xn->grads<T>();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double v = xv[i];
        gx[i] += g[i] * static_cast<T>(gaussian_cdf(v) + v * gaussian_pdf(v));
      }
    });
  });
}

// --------------------------------------------------------------------------- token ops

Tensor concat_tokens(std::span<const Tensor> parts) {
  if (parts.empty()) throw ContractError("concat_tokens: no parts");
  const Tensor& first = parts.front();
  if (first.rank() != 3) throw DimensionError("concat_tokens: parts must be (B, n, D), got " + to_string(first.shape()));
  const std::size_t b = first.dim(0);
  const std::size_t d = first.dim(2);
  std::size_t total = 0;
  std::vector<std::size_t> counts;
  for (const Tensor& p : parts) {
    require_same_dtype("concat_tokens", first, p);
    if (p.rank() != 3 || p.dim(0) != b || p.dim(2) != d) {
      throw DimensionError("concat_tokens: part " + to_string(p.shape()) +
                           " disagrees with " + to_string(first.shape()) + " on B or D");
    }
    counts.push_back(p.dim(1));
    total += p.dim(1);
  }
  return dispatch(first.dtype(), [&]<class T>() {
    std::vector<T> out(b * total * d);
    std::size_t offset = 0;
    for (std::size_t pi = 0; pi < parts.size(); ++pi) {
      const auto& pv = values<T>(parts[pi].node());
      const std::size_t n = counts[pi];
      for (std::size_t bi = 0; bi < b; ++bi) {
        std::copy_n(pv.data() + bi * n * d, n * d, out.data() + (bi * total + offset) * d);
      }
      offset += n;
    }
    std::vector<NodePtr> nodes;
    for (const Tensor& p : parts) nodes.push_back(p.node());
    return make_result_n<T>("concat_tokens", Shape{b, total, d}, std::move(out), parts,
                            [nodes = std::move(nodes), counts, b, total, d](Node& self) {
                              const auto& g = out_grad<T>(self);
                              std::size_t offset = 0;
                              for (std::size_t pi = 0; pi < nodes.size(); ++pi) {
                                const std::size_t n = counts[pi];
                                if (nodes[pi]->requires_grad) {
                                  auto& gp = nodes[pi]->grads<T>();
                                  for (std::size_t bi = 0; bi < b; ++bi) {
                                    const T* src = g.data() + (bi * total + offset) * d;
                                    T* dst = gp.data() + bi * n * d;
                                    for (std::size_t e = 0; e < n * d; ++e) dst[e] += src[e];
                                  }
                                }
                                offset += n;
                              }
                            });
  });
}

Tensor concat_tokens(std::initializer_list<Tensor> parts) {
  return concat_tokens(std::span<const Tensor>(parts.begin(), parts.size()));
}

Tensor slice_tokens(const Tensor& x, std::size_t start, std::size_t count) {
  if (x.rank() != 3 || count == 0 || start + count > x.dim(1)) {
    throw DimensionError("slice_tokens: [" + std::to_string(start) + ", " +
                         std::to_string(start + count) + ") out of range for " + to_string(x.shape()));
  }
  const std::size_t b = x.dim(0), n = x.dim(1), d = x.dim(2);
  return dispatch(x.dtype(), [&]<class T>() {
    const auto& xv = values<T>(x.node());
    std::vector<T> out(b * count * d);
    for (std::size_t bi = 0; bi < b; ++bi) {
      std::copy_n(xv.data() + (bi * n + start) * d, count * d, out.data() + bi * count * d);
    }
    return make_result<T>("slice_tokens", Shape{b, count, d}, std::move(out), {&x},
                          [xn = x.node(), b, n, d, start, count](Node& self) {
                            const auto& g = out_grad<T>(self);
                            auto& gx = xn->grads<T>();
                            for (std::size_t bi = 0; bi < b; ++bi) {
                              for (std::size_t e = 0; e < count * d; ++e) {
                                gx[(bi * n + start) * d + e] += g[bi * count * d + e];
                              }
                            }
                          });
  });
}

Tensor mean_tokens(const Tensor& x) {
  if (x.rank() != 3) throw DimensionError("mean_tokens: expected (B, N, D), got " + to_string(x.shape()));
  const std::size_t b = x.dim(0), n = x.dim(1), d = x.dim(2);
  return dispatch(x.dtype(), [&]<class T>() {
    const auto& xv = values<T>(x.node());
    std::vector<T> out(b * d);
    std::vector<T> column(n);
    for (std::size_t bi = 0; bi < b; ++bi) {
      for (std::size_t j = 0; j < d; ++j) {
        for (std::size_t t = 0; t < n; ++t) column[t] = xv[(bi * n + t) * d + j];
        out[bi * d + j] = pairwise_sum<T>(column) / static_cast<T>(n);
      }
    }
    return make_result<T>("mean_tokens", Shape{b, d}, std::move(out), {&x},
                          [xn = x.node(), b, n, d](Node& self) {
                            const auto& g = out_grad<T>(self);
                            auto& gx = xn->grads<T>();
                            const T inv = T(1) / static_cast<T>(n);
                            for (std::size_t bi = 0; bi < b; ++bi) {
                              for (std::size_t t = 0; t < n; ++t) {
                                for (std::size_t j = 0; j < d; ++j) {
                                  gx[(bi * n + t) * d + j] += g[bi * d + j] * inv;
                                }
                              }
                            }
                          });
  });
}

Tensor expand_batch(const Tensor& x, std::size_t batch) {
  if (batch == 0) throw DimensionError("expand_batch: batch must be positive");
  Shape out_shape{batch};
  out_shape.insert(out_shape.end(), x.shape().begin(), x.shape().end());
  return dispatch(x.dtype(), [&]<class T>() {
    const auto& xv = values<T>(x.node());
    std::vector<T> out;
    out.reserve(batch * xv.size());
    for (std::size_t bi = 0; bi < batch; ++bi) out.insert(out.end(), xv.begin(), xv.end());
    return make_result<T>("expand_batch", out_shape, std::move(out), {&x},
                          [xn = x.node(), batch](Node& self) {
                            const auto& g = out_grad<T>(self);
                            auto& gx = xn->grads<T>();
                            const std::size_t n = gx.size();
                            for (std::size_t bi = 0; bi < batch; ++bi) {
                              for (std::size_t i = 0; i < n; ++i) gx[i] += g[bi * n + i];
                            }
                          });
  });
}

Tensor embedding(const Tensor& table, std::span<const std::int32_t> ids, std::size_t batch,
                 std::size_t tokens) {
  if (table.rank() != 2) throw DimensionError("embedding: table must be (V, D), got " + to_string(table.shape()));
  if (ids.size() != batch * tokens) {
    throw DimensionError("embedding: " + std::to_string(ids.size()) + " ids for (" +
                         std::to_string(batch) + ", " + std::to_string(tokens) + ")");
  }
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  for (auto id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw InputError("embedding: token id " + std::to_string(id) + " outside vocabulary of " +
                       std::to_string(vocab));
    }
  }
  std::vector<std::int32_t> idv(ids.begin(), ids.end());
  return dispatch(table.dtype(), [&]<class T>() {
    const auto& tv = values<T>(table.node());
    std::vector<T> out(idv.size() * d);
    for (std::size_t i = 0; i < idv.size(); ++i) {
      std::copy_n(tv.data() + static_cast<std::size_t>(idv[i]) * d, d, out.data() + i * d);
    }
    return make_result<T>("embedding", Shape{batch, tokens, d}, std::move(out), {&table},
                          [tn = table.node(), idv = std::move(idv), d](Node& self) {
                            const auto& g = out_grad<T>(self);
                            auto& gt = tn->grads<T>();
                            for (std::size_t i = 0; i < idv.size(); ++i) {
                              T* dst = gt.data() + static_cast<std::size_t>(idv[i]) * d;
                              for (std::size_t j = 0; j < d; ++j) dst[j] += g[i * d + j];
                            }
                          });
  });
}

// --------------------------------------------------------------------------- image ops

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t kernel,
              std::size_t stride, std::size_t pad) {
  require_same_dtype("conv2d", x, weight);
  require_same_dtype("conv2d", x, bias);
  if (x.rank() != 4) throw DimensionError("conv2d: input must be (B, C, H, W), got " + to_string(x.shape()));
  const std::size_t b = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t kk = cin * kernel * kernel;
  if (weight.rank() != 2 || weight.dim(1) != kk) {
    throw DimensionError("conv2d: weight " + to_string(weight.shape()) + " incompatible with input " +
                         to_string(x.shape()) + " and kernel " + std::to_string(kernel));
  }
  const std::size_t cout = weight.dim(0);
  if (bias.shape() != Shape{cout}) throw DimensionError("conv2d: bias must be (" + std::to_string(cout) + ",)");
  if (stride == 0 || h + 2 * pad < kernel || w + 2 * pad < kernel) {
    throw DimensionError("conv2d: kernel larger than padded input " + to_string(x.shape()));
  }
  const std::size_t ho = (h + 2 * pad - kernel) / stride + 1;
  const std::size_t wo = (w + 2 * pad - kernel) / stride + 1;
  const std::size_t positions = ho * wo;

  return dispatch(x.dtype(), [&]<class T>() {
    const auto& xv = values<T>(x.node());
    const auto& wv = values<T>(weight.node());
    const auto& bv = values<T>(bias.node());
    // cols[bi] is (cin*k*k, ho*wo)
    std::vector<T> cols(b * kk * positions, T(0));
    for (std::size_t bi = 0; bi < b; ++bi) {
      T* col = cols.data() + bi * kk * positions;
      for (std::size_t c = 0; c < cin; ++c) {
        const T* plane = xv.data() + (bi * cin + c) * h * w;
        for (std::size_t ky = 0; ky < kernel; ++ky) {
          for (std::size_t kx = 0; kx < kernel; ++kx) {
            T* row = col + ((c * kernel + ky) * kernel + kx) * positions;
            for (std::size_t oy = 0; oy < ho; ++oy) {
              const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
              if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
              for (std::size_t ox = 0; ox < wo; ++ox) {
                const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
                row[oy * wo + ox] = plane[static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix)];
              }
            }
          }
        }
      }
    }
    std::vector<T> out(b * cout * positions);
    for (std::size_t bi = 0; bi < b; ++bi) {
      auto o = mmap(out.data() + bi * cout * positions, cout, positions);
      o.noalias() = cmap(wv.data(), cout, kk) * cmap(cols.data() + bi * kk * positions, kk, positions);
      for (std::size_t c = 0; c < cout; ++c) o.row(static_cast<Eigen::Index>(c)).array() += bv[c];
    }
    return make_result<T>(
        "conv2d", Shape{b, cout, ho, wo}, std::move(out), {&x, &weight, &bias},
        [xn = x.node(), wn = weight.node(), bn = bias.node(), cols = std::move(cols), b, cin, h, w,
         cout, kk, kernel, stride, pad, ho, wo, positions](Node& self) {
          const auto& g = out_grad<T>(self);
          const auto& wv = values<T>(wn);
          if (bn->requires_grad) {
            auto& gb = bn->grads<T>();
            for (std::size_t bi = 0; bi < b; ++bi) {
              for (std::size_t c = 0; c < cout; ++c) {
                const T* row = g.data() + (bi * cout + c) * positions;
                for (std::size_t p = 0; p < positions; ++p) gb[c] += row[p];
              }
            }
          }
          if (wn->requires_grad) {
            auto gw = mmap(wn->grads<T>().data(), cout, kk);
            for (std::size_t bi = 0; bi < b; ++bi) {
              gw.noalias() += cmap(g.data() + bi * cout * positions, cout, positions) *
                              cmap(cols.data() + bi * kk * positions, kk, positions).transpose();
            }
          }
          if (xn->requires_grad) {
            auto& gx = xn->grads<T>();
            RowMat<T> dcol(static_cast<Eigen::Index>(kk), static_cast<Eigen::Index>(positions));
            for (std::size_t bi = 0; bi < b; ++bi) {
              dcol.noalias() = cmap(wv.data(), cout, kk).transpose() *
                               cmap(g.data() + bi * cout * positions, cout, positions);
              for (std::size_t c = 0; c < cin; ++c) {
                T* plane = gx.data() + (bi * cin + c) * h * w;
                for (std::size_t ky = 0; ky < kernel; ++ky) {
                  for (std::size_t kx = 0; kx < kernel; ++kx) {
                    const T* row = dcol.data() + ((c * kernel + ky) * kernel + kx) * positions;
                    for (std::size_t oy = 0; oy < ho; ++oy) {
                      const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
                      if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                      for (std::size_t ox = 0; ox < wo; ++ox) {
                        const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
                        if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
                        plane[static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix)] += row[oy * wo + ox];
                      }
                    }
                  }
                }
              }
            }
          }
        });
  });
}

Tensor patchify(const Tensor& image, std::size_t patch) {
  if (image.rank() != 4) throw DimensionError("patchify: expected (B, C, H, W), got " + to_string(image.shape()));
  const std::size_t b = image.dim(0), c = image.dim(1), h = image.dim(2), w = image.dim(3);
  if (patch == 0 || h % patch != 0 || w % patch != 0) {
    throw DimensionError("patchify: " + to_string(image.shape()) + " not divisible by patch " +
                         std::to_string(patch));
  }
  const std::size_t gy = h / patch, gx = w / patch;
  const std::size_t np = gy * gx, pd = c * patch * patch;
  // index map: output flat -> input flat (a permutation)
  std::vector<std::size_t> src(b * np * pd);
  for (std::size_t bi = 0; bi < b; ++bi) {
    for (std::size_t py = 0; py < gy; ++py) {
      for (std::size_t px = 0; px < gx; ++px) {
        for (std::size_t ci = 0; ci < c; ++ci) {
          for (std::size_t dy = 0; dy < patch; ++dy) {
            for (std::size_t dx = 0; dx < patch; ++dx) {
              const std::size_t o = ((bi * np + py * gx + px) * c + ci) * patch * patch + dy * patch + dx;
              src[o] = ((bi * c + ci) * h + py * patch + dy) * w + px * patch + dx;
            }
          }
        }
      }
    }
  }
  return dispatch(image.dtype(), [&]<class T>() {
    const auto& iv = values<T>(image.node());
    std::vector<T> out(src.size());
    for (std::size_t i = 0; i < src.size(); ++i) out[i] = iv[src[i]];
    return make_result<T>("patchify", Shape{b, np, pd}, std::move(out), {&image},
                          [in = image.node(), src = std::move(src)](Node& self) {
                            const auto& g = out_grad<T>(self);
                            auto& gi = in->grads<T>();
                            for (std::size_t i = 0; i < src.size(); ++i) gi[src[i]] += g[i];
                          });
  });
}

Tensor flatten_spatial(const Tensor& x) {
  if (x.rank() != 4) throw DimensionError("flatten_spatial: expected (B, C, H, W), got " + to_string(x.shape()));
  const std::size_t b = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  return transpose_last2(reshape(x, Shape{b, c, hw}));
}

Tensor mse_loss(const Tensor& pred, const Tensor& label) {
  if (pred.shape() != label.shape()) {
    throw DimensionError("mse_loss: prediction " + to_string(pred.shape()) + " vs label " +
                         to_string(label.shape()));
  }
  return mean(square(sub(pred, label)));
}

}  // namespace mlqa
