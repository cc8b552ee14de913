#pragma once

#include <functional>
#include <string>
#include <vector>

#include "mlqa/model.hpp"
#include "mlqa/tensor.hpp"

namespace mlqa {

/// Agreement between analytic and central-difference gradients for one tensor.
/// rel_error = max|analytic - numeric| / max(max|numeric|, max|analytic|, floor).
struct GradCheckEntry {
  std::string name;
  std::size_t elements = 0;
  double max_abs_error = 0.0;
  double max_rel_error = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;

  double max_rel_error() const;
  bool passed(double tolerance) const { return max_rel_error() <= tolerance; }
  /// Worst entry per group, where a group is the name up to the first '.'
  /// (or the whole name when there is none).
  std::vector<GradCheckEntry> by_group() const;
};

inline constexpr double kGradCheckStep = 1e-5;
inline constexpr double kGradCheckTolerance = 1e-4;
inline constexpr double kGradCheckFloor = 1e-5;

/// Compares d loss / d input from backward() with central differences of step h,
/// perturbing every element of `input` (an f64 leaf that requires grad).
GradCheckEntry check_gradient(const std::string& name, const std::function<Tensor()>& loss, Tensor& input,
                              double h = kGradCheckStep);

/// One entry per primitive, each on small random f64 inputs.
GradCheckReport gradcheck_primitives(std::uint64_t seed = 0, double h = kGradCheckStep);

/// Tiny end-to-end model: D=8, ViT depth 4 tapped at layers 1..4, N_Q=2, 16x16 images, f64.
ModelConfig tiny_model_config(Task task, std::uint64_t seed = 0);

/// Checks every parameter of the tiny model on a fixed random batch of two samples.
GradCheckReport gradcheck_model(const ModelConfig& cfg, std::uint64_t seed = 0, double h = kGradCheckStep);

}  // namespace mlqa
