#include "mlqa/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "mlqa/errors.hpp"
#include "mlqa/ops.hpp"

namespace mlqa {

namespace {

void validate(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw InputError("correlation: length mismatch (" + std::to_string(a.size()) + " vs " +
                     std::to_string(b.size()) + ")");
  }
  if (a.size() < 2) throw InputError("correlation: need at least 2 pairs");
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!std::isfinite(a[i]) || !std::isfinite(b[i])) {
      throw InputError("correlation: non-finite value at index " + std::to_string(i));
    }
  }
}

double mean_of(std::span<const double> v) {
  return pairwise_sum<double>(v) / static_cast<double>(v.size());
}

double pearson(std::span<const double> x, std::span<const double> y) {
  const double mx = mean_of(x);
  const double my = mean_of(y);
  std::vector<double> sxy(x.size()), sxx(x.size()), syy(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx;
    const double dy = y[i] - my;
    sxy[i] = dx * dy;
    sxx[i] = dx * dx;
    syy[i] = dy * dy;
  }
  const double vx = pairwise_sum<double>(sxx);
  const double vy = pairwise_sum<double>(syy);
  if (vx == 0.0 || vy == 0.0) throw NumericalError("correlation undefined: constant vector");
  const double r = pairwise_sum<double>(sxy) / std::sqrt(vx * vy);
  return std::clamp(r, -1.0, 1.0);
}

}  // namespace

std::vector<double> midranks(std::span<const double> values) {
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(values.size());
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && values[order[j + 1]] == values[order[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t t = i; t <= j; ++t) ranks[order[t]] = avg;
    i = j + 1;
  }
  return ranks;
}

double plcc(std::span<const double> predictions, std::span<const double> labels) {
  validate(predictions, labels);
  return pearson(predictions, labels);
}

double srcc(std::span<const double> predictions, std::span<const double> labels) {
  validate(predictions, labels);
  const auto rp = midranks(predictions);
  const auto rl = midranks(labels);
  return pearson(rp, rl);
}

}  // namespace mlqa
