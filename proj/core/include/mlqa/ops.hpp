#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "mlqa/tensor.hpp"

// Differentiable primitives. Every primitive checks its output for NaN/Inf and
// throws NumericalError instead of propagating non-finite values.
namespace mlqa {

/// Per-sequence key validity, shape (batch, keys). Applied along the last axis
/// of scores shaped (batch, ..., keys).
struct KeyMask {
  std::size_t batch = 0;
  std::size_t keys = 0;
  std::vector<std::uint8_t> valid;  // batch * keys, 1 = attend

  bool is_valid(std::size_t b, std::size_t k) const { return valid[b * keys + k] != 0; }
  /// Appends `extra` always-valid keys at the end of every row.
  KeyMask with_appended(std::size_t extra) const;
};

/// Elementwise a + b. `b` may omit leading axes of `a` (its shape must be a suffix
/// of `a`'s); it is then repeated over them, and its gradient is summed back.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor square(const Tensor& a);

/// Pairwise-summed total / mean over every element, returned as shape (1,).
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

/// Batched matrix product. a: (..., m, k); b: (..., k, n) with identical leading
/// axes, or b: (k, n) shared across all of a's leading axes.
Tensor matmul(const Tensor& a, const Tensor& b);
/// Swaps the last two axes.
Tensor transpose_last2(const Tensor& a);
/// (a, b, c, d) -> (a, c, b, d). Used to split and merge attention heads.
Tensor swap_axes_1_2(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

/// Softmax over the last axis with max subtraction. Masked keys get zero weight;
/// a row whose keys are all masked yields all-zero weights.
Tensor softmax_last(const Tensor& x, const KeyMask* mask = nullptr);

inline constexpr double kLayerNormEps = 1e-5;
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias);

/// x * Phi(x) with the exact Gaussian CDF.
Tensor gelu(const Tensor& x);

/// Token-axis concatenation of (B, n_j, D) parts in argument order.
Tensor concat_tokens(std::span<const Tensor> parts);
Tensor concat_tokens(std::initializer_list<Tensor> parts);
/// Tokens [start, start + count) of a (B, N, D) tensor.
Tensor slice_tokens(const Tensor& x, std::size_t start, std::size_t count);
/// Mean over the token axis: (B, N, D) -> (B, D).
Tensor mean_tokens(const Tensor& x);

/// (N, D) -> (B, N, D) by repetition; gradient sums over the batch.
Tensor expand_batch(const Tensor& x, std::size_t batch);

/// Row gather from a (V, D) table. `ids` is row-major (batch, tokens).
Tensor embedding(const Tensor& table, std::span<const std::int32_t> ids, std::size_t batch,
                 std::size_t tokens);

/// 2-D convolution, square kernel. x: (B, Cin, H, W); weight: (Cout, Cin*k*k);
/// bias: (Cout). Output spatial extent (H + 2*pad - k) / stride + 1.
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t kernel,
              std::size_t stride, std::size_t pad);

/// (B, C, H, W) -> (B, (H/p)*(W/p), C*p*p), patches in raster order.
Tensor patchify(const Tensor& image, std::size_t patch);

/// (B, C, H, W) -> (B, H*W, C): one token per spatial position.
Tensor flatten_spatial(const Tensor& x);

/// Mean squared error over all elements; shapes must match.
Tensor mse_loss(const Tensor& pred, const Tensor& label);

/// Pairwise (cascade) summation; fixed reduction tree independent of call site.
template <class T>
T pairwise_sum(std::span<const T> values);

}  // namespace mlqa
