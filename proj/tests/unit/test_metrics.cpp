#include <gtest/gtest.h>

#include <cmath>

#include "mlqa/errors.hpp"
#include "mlqa/metrics.hpp"
#include "mlqa/rng.hpp"

using namespace mlqa;

namespace {

// Independent oracles: O(n^2) midranks and a two-pass long double Pearson.
std::vector<double> brute_ranks(const std::vector<double>& x) {
  std::vector<double> r(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    double less = 0.0, equal = 0.0;
    for (std::size_t j = 0; j < x.size(); ++j) {
      if (x[j] < x[i]) less += 1.0;
      if (x[j] == x[i]) equal += 1.0;
    }
    r[i] = less + (equal + 1.0) / 2.0;
  }
  return r;
}

double brute_pearson(const std::vector<double>& x, const std::vector<double>& y) {
  long double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= x.size();
  my /= y.size();
  long double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  return static_cast<double>(sxy / std::sqrt(sxx * syy));
}

std::vector<double> random_vector(Rng& rng, std::size_t n, bool ties) {
  std::vector<double> v(n);
  for (auto& x : v) x = ties ? static_cast<double>(rng.below(6)) : rng.normal();
  return v;
}

}  // namespace

TEST(Plcc, HandCases) {
  const std::vector<double> x{0.3, -1.0, 2.5, 4.0};
  std::vector<double> neg(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) neg[i] = -x[i];
  EXPECT_NEAR(plcc(x, x), 1.0, 1e-15);
  EXPECT_NEAR(plcc(x, neg), -1.0, 1e-15);
  EXPECT_NEAR(plcc(std::vector<double>{1, 2, 3}, std::vector<double>{2, 4, 6}), 1.0, 1e-15);
}

TEST(Srcc, HandCases) {
  const std::vector<double> up{1, 2, 3, 4, 5};
  EXPECT_NEAR(srcc(up, up), 1.0, 1e-15);
  // Spearman formula: 1 - 6 * 2 / (5 * 24) = 0.9.
  EXPECT_NEAR(srcc(std::vector<double>{1, 2, 3, 5, 4}, up), 0.9, 1e-12);
}

TEST(Srcc, TieFreeDataMatchesSpearmanFormula) {
  Rng rng(1);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 3 + rng.below(40);
    auto x = random_vector(rng, n, false), y = random_vector(rng, n, false);
    const auto rx = brute_ranks(x), ry = brute_ranks(y);
    double d2 = 0.0;
    for (std::size_t i = 0; i < n; ++i) d2 += (rx[i] - ry[i]) * (rx[i] - ry[i]);
    const double nn = static_cast<double>(n);
    EXPECT_NEAR(srcc(x, y), 1.0 - 6.0 * d2 / (nn * (nn * nn - 1.0)), 1e-12);
  }
}

TEST(Srcc, MatchesBruteForceRankOracleWithAndWithoutTies) {
  Rng rng(2);
  for (int trial = 0; trial < 1000; ++trial) {
    const bool ties = trial % 2 == 1;
    const std::size_t n = 5 + rng.below(60);
    auto x = random_vector(rng, n, ties), y = random_vector(rng, n, ties);
    if (brute_ranks(x) == std::vector<double>(n, (n + 1) / 2.0)) continue;
    if (brute_ranks(y) == std::vector<double>(n, (n + 1) / 2.0)) continue;
    EXPECT_NEAR(srcc(x, y), brute_pearson(brute_ranks(x), brute_ranks(y)), 1e-12);
    EXPECT_NEAR(plcc(x, y), brute_pearson(x, y), 1e-12);
  }
}

TEST(Srcc, InvariantUnderStrictlyMonotoneTransforms) {
  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 10 + rng.below(30);
    auto x = random_vector(rng, n, trial % 3 == 0), y = random_vector(rng, n, false);
    const double a = rng.uniform(0.1, 3.0), b = rng.uniform(-2.0, 2.0);
    std::vector<double> fx(n);
    for (std::size_t i = 0; i < n; ++i) fx[i] = std::exp(a * x[i]) + std::atan(x[i]) + b;
    EXPECT_NEAR(srcc(fx, y), srcc(x, y), 1e-12);
  }
}

TEST(Plcc, InvariantUnderPositiveAffineMaps) {
  Rng rng(4);
  for (int trial = 0; trial < 200; ++trial) {
    auto x = random_vector(rng, 25, false), y = random_vector(rng, 25, false);
    const double a = rng.uniform(0.01, 100.0), b = rng.uniform(-50.0, 50.0);
    std::vector<double> ax(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) ax[i] = a * x[i] + b;
    EXPECT_NEAR(plcc(ax, y), plcc(x, y), 1e-12);
  }
}

TEST(Midranks, TiesShareTheAverageRank) {
  EXPECT_EQ(midranks(std::vector<double>{10, 20, 20, 5}), (std::vector<double>{2, 3.5, 3.5, 1}));
}

TEST(Metrics, InvalidInputs) {
  const std::vector<double> a{1, 2, 3}, constant{2, 2, 2};
  EXPECT_THROW(plcc(a, constant), NumericalError);
  EXPECT_THROW(srcc(constant, a), NumericalError);
  EXPECT_THROW(plcc(std::vector<double>{1}, std::vector<double>{1}), InputError);
  EXPECT_THROW(srcc(a, std::vector<double>{1, 2}), InputError);
  EXPECT_THROW(plcc(a, std::vector<double>{1, std::nan(""), 2}), InputError);
}

TEST(Metrics, ResultsStayInRange) {
  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    auto x = random_vector(rng, 7, false);
    const double s = srcc(x, x), p = plcc(x, x);
    EXPECT_LE(s, 1.0);
    EXPECT_LE(p, 1.0);
  }
}
