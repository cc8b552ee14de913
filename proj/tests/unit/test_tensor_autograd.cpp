#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mlqa/blob_io.hpp"
#include "mlqa/errors.hpp"
#include "mlqa/gradcheck.hpp"
#include "mlqa/ops.hpp"
#include "test_util.hpp"

using namespace mlqa;
using mlqa::test::random_f64;

namespace {

Tensor f64(Shape shape, std::vector<double> v, bool rg = false) {
  return Tensor::from_values(std::move(shape), v, DType::kF64, rg);
}

Tensor weighted_sum(const Tensor& out, Rng& rng) {
  Tensor w = [&] {
    NoGradGuard g;
    return random_f64(rng, out.shape(), false);
  }();
  return sum(mul(out, w));
}

}  // namespace

TEST(Tensor, ShapeAndDataInvariants) {
  Tensor t = Tensor::zeros({2, 3}, DType::kF32);
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_EQ(t.rank(), 2u);
  EXPECT_EQ(t.dim(-1), 3u);
  EXPECT_EQ(t.data<float>().size(), 6u);
  EXPECT_FALSE(t.has_grad());
  EXPECT_THROW(Tensor::zeros({2, 0}, DType::kF32), DimensionError);
  EXPECT_THROW(f64({2, 2}, {1, 2, 3}), DimensionError);
  EXPECT_THROW((void)t.dim(2), DimensionError);
}

TEST(Tensor, DtypeConversion) {
  Tensor a = f64({3}, {1.5, -2.25, 3.0});
  Tensor b = a.to(DType::kF32);
  EXPECT_EQ(b.dtype(), DType::kF32);
  EXPECT_EQ(b.to_vector(), a.to_vector());
  EXPECT_EQ(parse_dtype("f64"), DType::kF64);
  EXPECT_THROW(parse_dtype("f16"), ConfigError);
}

TEST(Matmul, IdentityTimesMatrix) {
  Tensor eye = f64({2, 2}, {1, 0, 0, 1});
  Tensor m = f64({2, 2}, {1, 2, 3, 4});
  EXPECT_EQ(matmul(eye, m).to_vector(), (std::vector<double>{1, 2, 3, 4}));
}

TEST(Matmul, RowTimesColumn) {
  Tensor r = f64({1, 2}, {1, 2});
  Tensor c = f64({2, 1}, {3, 4});
  Tensor out = matmul(r, c);
  EXPECT_EQ(out.shape(), (Shape{1, 1}));
  EXPECT_EQ(out.item(), 11.0);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  Tensor a = Tensor::zeros({2, 3}, DType::kF64);
  Tensor b = Tensor::zeros({4, 2}, DType::kF64);
  try {
    matmul(a, b);
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("(2, 3)"), std::string::npos) << msg;
    EXPECT_NE(msg.find("(4, 2)"), std::string::npos) << msg;
  }
}

TEST(Matmul, GradientMatchesFiniteDifferences) {
  Tensor a = f64({2, 2}, {1, 0, 0, 1}, true);
  Rng rng(1);
  Tensor b = random_f64(rng, {2, 3});
  Tensor w = random_f64(rng, {2, 3}, false);
  auto loss = [&] { return sum(mul(matmul(a, b), w)); };
  EXPECT_LE(check_gradient("a", loss, a).max_rel_error, 1e-6);
  EXPECT_LE(check_gradient("b", loss, b).max_rel_error, 1e-6);
}

TEST(Matmul, BatchedMatchesPerSliceProduct) {
  Rng rng(2);
  Tensor a = random_f64(rng, {3, 2, 4}, false);
  Tensor b = random_f64(rng, {3, 4, 5}, false);
  Tensor out = matmul(a, b);
  for (std::size_t n = 0; n < 3; ++n) {
    for (std::size_t i = 0; i < 2; ++i) {
      for (std::size_t j = 0; j < 5; ++j) {
        double ref = 0.0;
        for (std::size_t k = 0; k < 4; ++k) ref += a.at({n, i, k}) * b.at({n, k, j});
        EXPECT_NEAR(out.at({n, i, j}), ref, 1e-12);
      }
    }
  }
}

TEST(Softmax, SymmetricPairIsHalf) {
  EXPECT_EQ(softmax_last(f64({2}, {0, 0})).to_vector(), (std::vector<double>{0.5, 0.5}));
}

TEST(Softmax, LargeLogitsDoNotOverflow) {
  EXPECT_EQ(softmax_last(f64({2}, {1000, 1000})).to_vector(), (std::vector<double>{0.5, 0.5}));
  Tensor f = Tensor::from_values({2}, {1000, 1000}, DType::kF32);
  EXPECT_EQ(softmax_last(f).to_vector(), (std::vector<double>{0.5, 0.5}));
}

TEST(Softmax, RowsSumToOneAndGradientMatches) {
  Rng rng(3);
  Tensor x = random_f64(rng, {5});
  double total = 0.0;
  for (double v : softmax_last(x).to_vector()) total += v;
  EXPECT_NEAR(total, 1.0, 1e-12);
  Tensor w = random_f64(rng, {5}, false);
  auto loss = [&] { return sum(mul(softmax_last(x), w)); };
  EXPECT_LE(check_gradient("x", loss, x).max_rel_error, 1e-6);

  Tensor xf = Tensor::from_values({4, 7}, random_f64(rng, {4, 7}, false).to_vector(), DType::kF32);
  const auto p = softmax_last(xf).to_vector();
  for (std::size_t r = 0; r < 4; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < 7; ++c) s += p[r * 7 + c];
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(Softmax, MaskedKeysGetZeroWeight) {
  Tensor x = f64({1, 3}, {1.0, 5.0, 2.0});
  KeyMask mask{1, 3, {1, 0, 1}};
  const auto p = softmax_last(x, &mask).to_vector();
  EXPECT_EQ(p[1], 0.0);
  EXPECT_NEAR(p[0] + p[2], 1.0, 1e-15);
  KeyMask none{1, 3, {0, 0, 0}};
  EXPECT_EQ(softmax_last(x, &none).to_vector(), (std::vector<double>{0, 0, 0}));
}

TEST(LayerNorm, ConstantRowBecomesZero) {
  Tensor x = f64({1, 4}, {3, 3, 3, 3});
  Tensor g = f64({4}, {1, 1, 1, 1}), b = f64({4}, {0, 0, 0, 0});
  for (double v : layer_norm(x, g, b).to_vector()) EXPECT_EQ(v, 0.0);
}

TEST(LayerNorm, NormalizesMeanAndVariance) {
  Tensor x = f64({1, 3}, {1, 2, 3});
  Tensor g = f64({3}, {1, 1, 1}), b = f64({3}, {0, 0, 0});
  const auto y = layer_norm(x, g, b).to_vector();
  const double mean = (y[0] + y[1] + y[2]) / 3.0;
  const double var = (y[0] * y[0] + y[1] * y[1] + y[2] * y[2]) / 3.0 - mean * mean;
  EXPECT_NEAR(mean, 0.0, 1e-12);
  // Population variance 2/3 shrinks by (2/3) / (2/3 + eps).
  EXPECT_NEAR(var, (2.0 / 3.0) / (2.0 / 3.0 + kLayerNormEps), 1e-12);
}

TEST(LayerNorm, GradientMatchesFiniteDifferences) {
  Rng rng(4);
  Tensor x = random_f64(rng, {2, 3, 6}), g = random_f64(rng, {6}), b = random_f64(rng, {6});
  auto loss = [&] { return weighted_sum(layer_norm(x, g, b), rng); };
  Rng fixed(40);
  Tensor w = random_f64(fixed, {2, 3, 6}, false);
  auto stable = [&] { return sum(mul(layer_norm(x, g, b), w)); };
  (void)loss;
  EXPECT_LE(check_gradient("x", stable, x).max_rel_error, 1e-5);
  EXPECT_LE(check_gradient("g", stable, g).max_rel_error, 1e-5);
  EXPECT_LE(check_gradient("b", stable, b).max_rel_error, 1e-5);
}

TEST(Gelu, ValuesAndAsymptotes) {
  const auto y = gelu(f64({3}, {0.0, 10.0, -10.0})).to_vector();
  EXPECT_EQ(y[0], 0.0);
  EXPECT_NEAR(y[1], 10.0, 1e-12);
  EXPECT_NEAR(y[2], 0.0, 1e-12);
  EXPECT_NEAR(gelu(f64({1}, {1.0})).item(), 0.5 * (1.0 + std::erf(1.0 / std::sqrt(2.0))), 1e-15);
}

TEST(Gelu, GradientMatchesFiniteDifferences) {
  Rng rng(5);
  Tensor x = random_f64(rng, {4, 5}, true, 2.0);
  Tensor w = random_f64(rng, {4, 5}, false);
  auto loss = [&] { return sum(mul(gelu(x), w)); };
  EXPECT_LE(check_gradient("x", loss, x).max_rel_error, 1e-6);
}

TEST(ConcatTokens, FourLevelsStackAlongTokenAxis) {
  std::vector<Tensor> parts;
  for (int i = 0; i < 4; ++i) parts.push_back(Tensor::full({2, 4, 32}, i, DType::kF32));
  Tensor cat = concat_tokens(parts);
  EXPECT_EQ(cat.shape(), (Shape{2, 16, 32}));
  EXPECT_EQ(cat.at({1, 9, 5}), 2.0);
}

TEST(ConcatTokens, SinglePartUnchangedAndSliceRecoversParts) {
  Rng rng(6);
  Tensor a = random_f64(rng, {2, 3, 4}, false), b = random_f64(rng, {2, 5, 4}, false);
  EXPECT_EQ(concat_tokens({a}).to_vector(), a.to_vector());
  Tensor cat = concat_tokens({a, b});
  EXPECT_EQ(slice_tokens(cat, 0, 3).to_vector(), a.to_vector());
  EXPECT_EQ(slice_tokens(cat, 3, 5).to_vector(), b.to_vector());
}

TEST(ConcatTokens, MismatchedWidthOrBatchThrows) {
  Tensor a = Tensor::zeros({2, 3, 4}, DType::kF32);
  EXPECT_THROW(concat_tokens({a, Tensor::zeros({2, 3, 5}, DType::kF32)}), DimensionError);
  EXPECT_THROW(concat_tokens({a, Tensor::zeros({3, 3, 4}, DType::kF32)}), DimensionError);
}

TEST(ConcatTokens, GradientSplitsBackToParts) {
  Rng rng(7);
  Tensor a = random_f64(rng, {2, 2, 3}), b = random_f64(rng, {2, 3, 3});
  Tensor w = random_f64(rng, {2, 5, 3}, false);
  auto loss = [&] { return sum(mul(concat_tokens({a, b}), w)); };
  loss().backward();
  const auto ga = a.grad_vector();
  const auto wv = w.to_vector();
  // d loss / d a is the matching slice of w.
  for (std::size_t bi = 0; bi < 2; ++bi) {
    for (std::size_t t = 0; t < 2; ++t) {
      for (std::size_t d = 0; d < 3; ++d) EXPECT_EQ(ga[(bi * 2 + t) * 3 + d], wv[(bi * 5 + t) * 3 + d]);
    }
  }
  EXPECT_LE(check_gradient("a", loss, a).max_rel_error, 1e-6);
  EXPECT_LE(check_gradient("b", loss, b).max_rel_error, 1e-6);
}

TEST(MeanTokens, ShapeAndIdenticalTokens) {
  Tensor x = Tensor::full({2, 16, 32}, 0.25, DType::kF32);
  Tensor m = mean_tokens(x);
  EXPECT_EQ(m.shape(), (Shape{2, 32}));
  for (double v : m.to_vector()) EXPECT_EQ(v, 0.25);
}

TEST(MeanTokens, TokenPermutationInvariance) {
  Rng rng(8);
  const std::size_t n = 16, d = 4;
  Tensor x = random_f64(rng, {1, n, d}, false);
  const auto base = mean_tokens(x).to_vector();
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  for (int trial = 0; trial < 50; ++trial) {
    for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
    std::vector<double> v(n * d);
    const auto src = x.to_vector();
    for (std::size_t t = 0; t < n; ++t) {
      for (std::size_t k = 0; k < d; ++k) v[t * d + k] = src[perm[t] * d + k];
    }
    const auto out = mean_tokens(f64({1, n, d}, v)).to_vector();
    for (std::size_t k = 0; k < d; ++k) EXPECT_NEAR(out[k], base[k], 1e-12);
  }
}

TEST(Backward, SumGivesOnes) {
  Tensor p = f64({3}, {4, 5, 6}, true);
  sum(p).backward();
  EXPECT_EQ(p.grad_vector(), (std::vector<double>{1, 1, 1}));
}

TEST(Backward, HalfSquaredNormGivesInput) {
  Tensor p = f64({3}, {1, 2, 3}, true);
  scale(sum(square(p)), 0.5).backward();
  EXPECT_EQ(p.grad_vector(), (std::vector<double>{1, 2, 3}));
}

TEST(Backward, RepeatedCallsAccumulateUntilZeroed) {
  Tensor p = f64({2}, {1, 2}, true);
  sum(p).backward();
  sum(p).backward();
  EXPECT_EQ(p.grad_vector(), (std::vector<double>{2, 2}));
  p.zero_grad();
  EXPECT_FALSE(p.has_grad());
  sum(p).backward();
  EXPECT_EQ(p.grad_vector(), (std::vector<double>{1, 1}));
}

TEST(Backward, SharedSubexpressionAccumulates) {
  Tensor p = f64({1}, {3}, true);
  Tensor q = mul(p, p);
  sum(add(q, q)).backward();  // d(2p^2)/dp = 4p
  EXPECT_EQ(p.grad_vector()[0], 12.0);
}

TEST(Backward, NonScalarLossIsContractError) {
  Tensor p = f64({2}, {1, 2}, true);
  EXPECT_THROW(square(p).backward(), ContractError);
  Tensor c = f64({1}, {1});
  EXPECT_THROW(c.backward(), ContractError);
}

TEST(Backward, NoGradGuardRecordsNothing) {
  Tensor p = f64({2}, {1, 2}, true);
  Tensor y;
  {
    NoGradGuard g;
    y = sum(p);
  }
  EXPECT_FALSE(y.requires_grad());
  EXPECT_TRUE(grad_enabled());
}

TEST(Numerics, NonFiniteOutputThrows) {
  Tensor big = f64({1}, {1e200});
  EXPECT_THROW(mul(big, big), NumericalError);
  Tensor nan = f64({1}, {std::nan("")});
  EXPECT_THROW(add(nan, f64({1}, {1})), NumericalError);
}

TEST(Numerics, PairwiseSumIsExactOnIntegers) {
  std::vector<double> v(1001);
  std::iota(v.begin(), v.end(), 0.0);
  EXPECT_EQ(pairwise_sum<double>(v), 500500.0);
}

TEST(Determinism, IdenticalInputsGiveBitIdenticalOutputs) {
  Rng rng(9);
  Tensor a = random_f64(rng, {3, 8, 8}, false), b = random_f64(rng, {8, 8}, false);
  EXPECT_EQ(softmax_last(matmul(a, b)).to_vector(), softmax_last(matmul(a, b)).to_vector());
}

TEST(Conv2d, OutputExtentAndHandValue) {
  Tensor x = Tensor::full({1, 1, 4, 4}, 1.0, DType::kF64);
  Tensor w = Tensor::full({1, 9}, 1.0, DType::kF64);
  Tensor b = Tensor::zeros({1}, DType::kF64);
  Tensor y = conv2d(x, w, b, 3, 2, 1);
  EXPECT_EQ(y.shape(), (Shape{1, 1, 2, 2}));
  // Top-left window covers a 2x2 block of ones inside the zero padding.
  EXPECT_EQ(y.at({0, 0, 0, 0}), 4.0);
  EXPECT_EQ(y.at({0, 0, 1, 1}), 9.0);
}

TEST(Embedding, OutOfVocabularyIsInputError) {
  Tensor table = Tensor::zeros({4, 2}, DType::kF64);
  const std::vector<std::int32_t> ids{0, 4};
  EXPECT_THROW(embedding(table, ids, 1, 2), InputError);
}

TEST(Gradients, EveryPrimitivePassesFiniteDifferenceCheck) {
  const GradCheckReport report = gradcheck_primitives(11);
  EXPECT_GE(report.entries.size(), 30u);
  for (const auto& e : report.entries) EXPECT_LE(e.max_rel_error, 1e-6) << e.name;
}

TEST(Blob, RoundTripIsBitExact) {
  Rng rng(12);
  Tensor a = random_f64(rng, {2, 3, 5}, false);
  Tensor b = Tensor::from_values({7}, {1.0f / 3.0f, -0.0, 1e-30, 3, 4, 5, 6}, DType::kF32);
  for (const Tensor& t : {a, b}) {
    const std::string bytes = encode_blob(t);
    Tensor back = decode_blob(bytes);
    EXPECT_EQ(back.shape(), t.shape());
    EXPECT_EQ(back.dtype(), t.dtype());
    EXPECT_EQ(encode_blob(back), bytes);
  }
}

TEST(Blob, HeaderLayout) {
  Tensor t = Tensor::from_values({2, 1}, {1.0, 2.0}, DType::kF32);
  const std::string bytes = encode_blob(t);
  ASSERT_EQ(bytes.size(), 4u + 1 + 1 + 2 * 4 + 2 * 4);
  EXPECT_EQ(bytes.substr(0, 4), "MLT1");
  EXPECT_EQ(bytes[4], 0);
  EXPECT_EQ(bytes[5], 2);
  EXPECT_EQ(static_cast<unsigned char>(bytes[6]), 2u);
  EXPECT_EQ(bytes[7], 0);
}

TEST(Blob, MalformedInputIsParseError) {
  const std::string good = encode_blob(Tensor::zeros({2}, DType::kF64));
  EXPECT_THROW(decode_blob("MLT2" + good.substr(4)), ParseError);
  EXPECT_THROW(decode_blob(good.substr(0, good.size() - 1)), ParseError);
  EXPECT_THROW(decode_blob(good + "x"), ParseError);
}
