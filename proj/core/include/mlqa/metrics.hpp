#pragma once

#include <span>
#include <vector>

namespace mlqa {

/// Pearson linear correlation of predictions against labels.
/// Throws InputError for n < 2, unequal lengths or non-finite entries, and
/// NumericalError when either vector is constant (correlation undefined).
double plcc(std::span<const double> predictions, std::span<const double> labels);

/// Spearman rank correlation: Pearson correlation of midranks (ties share the
/// average of the ranks they span).
double srcc(std::span<const double> predictions, std::span<const double> labels);

/// 1-based average ranks.
std::vector<double> midranks(std::span<const double> values);

}  // namespace mlqa
