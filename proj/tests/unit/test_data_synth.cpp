#include <gtest/gtest.h>

#include <array>
#include <cmath>
#include <fstream>
#include <set>

#include "mlqa/blob_io.hpp"
#include "mlqa/data.hpp"
#include "mlqa/errors.hpp"
#include "mlqa/metrics.hpp"
#include "test_util.hpp"

using namespace mlqa;

namespace {

SynthConfig small_config() {
  SynthConfig cfg;
  cfg.image_size = 16;
  return cfg;
}

bool same_pixels(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && a.to_vector() == b.to_vector();
}

// Least squares fit of y on (1, f1, f2) via the 3x3 normal equations (Cramer's rule).
std::vector<double> linear_fit(const std::vector<double>& f1, const std::vector<double>& f2,
                               const std::vector<double>& y) {
  std::array<std::array<double, 3>, 3> a{};
  std::array<double, 3> b{};
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double row[3] = {1.0, f1[i], f2[i]};
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) a[r][c] += row[r] * row[c];
      b[r] += row[r] * y[i];
    }
  }
  auto det = [](const std::array<std::array<double, 3>, 3>& m) {
    return m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) -
           m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0]) +
           m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
  };
  const double d = det(a);
  std::array<double, 3> coef{};
  for (int k = 0; k < 3; ++k) {
    auto m = a;
    for (int r = 0; r < 3; ++r) m[r][k] = b[r];
    coef[k] = det(m) / d;
  }
  std::vector<double> fit(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) fit[i] = coef[0] + coef[1] * f1[i] + coef[2] * f2[i];
  return fit;
}

}  // namespace

TEST(QualityLabel, WorkedExamples) {
  EXPECT_DOUBLE_EQ(quality_label(0.0, 0), 1.0);
  EXPECT_DOUBLE_EQ(quality_label(0.5, 4), 0.0);
  EXPECT_DOUBLE_EQ(quality_label(0.25, 2), 0.5);
  EXPECT_DOUBLE_EQ(quality_label(0.0, 4), 0.5);
  EXPECT_DOUBLE_EQ(quality_label(0.5, 0), 0.5);
  EXPECT_DOUBLE_EQ(quality_label(0.1, 1), 1.0 - (0.2 + 0.25) / 2.0);
}

TEST(QualityLabel, StrictlyDecreasingInBothFactors) {
  for (int k = 0; k <= 4; ++k) {
    double prev = 2.0;
    for (int i = 0; i <= 50; ++i) {
      const double v = quality_label(0.01 * i, k);
      EXPECT_LT(v, prev);
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
      prev = v;
    }
  }
  for (int i = 0; i <= 50; ++i) {
    for (int k = 0; k < 4; ++k) EXPECT_LT(quality_label(0.01 * i, k + 1), quality_label(0.01 * i, k));
  }
}

TEST(CorrespondenceLabel, WorkedExamples) {
  EXPECT_DOUBLE_EQ(correspondence_label(true, 0.8), 0.8);
  EXPECT_DOUBLE_EQ(correspondence_label(true, 0.0), 0.0);
  EXPECT_DOUBLE_EQ(correspondence_label(false, 0.0), 0.3);
  EXPECT_DOUBLE_EQ(correspondence_label(false, 1.0), 0.0);
  EXPECT_NEAR(correspondence_label(false, 0.5), 0.15, 1e-15);
}

TEST(QualityDataset, LabelsFollowTheirFactors) {
  const auto ds = generate_quality_dataset(200, 3, small_config());
  ASSERT_EQ(ds.size(), 200u);
  ASSERT_EQ(ds.quality_factors.size(), 200u);
  std::set<int> ks;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto& f = ds.quality_factors[i];
    EXPECT_GE(f.sigma, 0.0);
    EXPECT_LE(f.sigma, 0.5);
    ks.insert(f.scrambled);
    EXPECT_DOUBLE_EQ(ds.records[i].mos_quality, quality_label(f.sigma, f.scrambled));
    EXPECT_TRUE(ds.records[i].prompt_tokens.empty());
    EXPECT_EQ(ds.images[i].shape(), (Shape{3, 16, 16}));
    EXPECT_EQ(ds.images[i].dtype(), DType::kF32);
  }
  EXPECT_EQ(ks, (std::set<int>{0, 1, 2, 3, 4}));
}

TEST(QualityDataset, LinearModelOnFactorsRecoversLabels) {
  const auto ds = generate_quality_dataset(400, 11, small_config());
  std::vector<double> sigma, k, y;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    sigma.push_back(ds.quality_factors[i].sigma);
    k.push_back(ds.quality_factors[i].scrambled);
    y.push_back(ds.records[i].mos_quality);
  }
  EXPECT_GT(srcc(linear_fit(sigma, k, y), y), 0.99);
}

TEST(QualityDataset, NoiseLevelIsVisibleInPixels) {
  // Neighbouring-pixel differences grow with sigma on unscrambled images.
  const auto ds = generate_quality_dataset(300, 5, small_config());
  std::vector<double> sigma, roughness;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (ds.quality_factors[i].scrambled != 0) continue;
    const auto v = ds.images[i].to_vector();
    double acc = 0.0;
    for (std::size_t p = 0; p + 1 < v.size(); ++p) acc += (v[p + 1] - v[p]) * (v[p + 1] - v[p]);
    sigma.push_back(ds.quality_factors[i].sigma);
    roughness.push_back(acc);
  }
  ASSERT_GT(sigma.size(), 20u);
  EXPECT_GT(srcc(roughness, sigma), 0.8);
}

TEST(CorrespondenceDataset, PromptsAndLabelsAreConsistent) {
  auto cfg = small_config();
  const auto ds = generate_correspondence_dataset(300, 4, cfg);
  std::size_t matches = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto& f = ds.correspondence_factors[i];
    const auto& prompt = ds.records[i].prompt_tokens;
    ASSERT_GE(prompt.size(), 3u);
    ASSERT_LE(prompt.size(), cfg.max_tokens);
    std::size_t class_tokens = 0;
    for (auto t : prompt) {
      ASSERT_GE(t, 1);
      ASSERT_LT(t, static_cast<std::int32_t>(cfg.vocab_size));
      if (t <= static_cast<std::int32_t>(cfg.classes)) {
        ++class_tokens;
        EXPECT_EQ(t, f.prompt_class + 1);
      }
    }
    EXPECT_EQ(class_tokens, 1u);
    const bool match = f.image_class == f.prompt_class;
    matches += match;
    EXPECT_DOUBLE_EQ(ds.records[i].mos_correspondence, correspondence_label(match, f.weight));
  }
  EXPECT_GT(matches, 100u);
  EXPECT_LT(matches, 200u);
}

TEST(ClassPatterns, AreDistinctAndBounded) {
  for (int a = 0; a < 6; ++a) {
    Rng ra(1);
    const auto pa = render_class_pattern(a, 32, ra);
    for (float v : pa) {
      EXPECT_GE(v, -1.0f);
      EXPECT_LE(v, 1.0f);
    }
    for (int b = a + 1; b < 6; ++b) {
      Rng rb(1);
      EXPECT_NE(pa, render_class_pattern(b, 32, rb));
    }
  }
  Rng r(2);
  const auto d = render_distractor_texture(32, r);
  float peak = 0.0f;
  for (float v : d) peak = std::max(peak, std::abs(v));
  EXPECT_FLOAT_EQ(peak, 1.0f);
}

TEST(Generators, DeterministicPerSeed) {
  const auto a = generate_correspondence_dataset(20, 9, small_config());
  const auto b = generate_correspondence_dataset(20, 9, small_config());
  ASSERT_EQ(a.records, b.records);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_TRUE(same_pixels(a.images[i], b.images[i]));

  const auto q1 = generate_quality_dataset(20, 9, small_config());
  const auto q2 = generate_quality_dataset(20, 9, small_config());
  ASSERT_EQ(q1.records, q2.records);
  for (std::size_t i = 0; i < q1.size(); ++i) EXPECT_TRUE(same_pixels(q1.images[i], q2.images[i]));
}

TEST(Generators, DistinctSeedsGiveDistinctData) {
  std::set<std::vector<double>> labels;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto ds = generate_quality_dataset(10, seed, small_config());
    std::vector<double> l;
    for (const auto& r : ds.records) l.push_back(r.mos_quality);
    labels.insert(l);
  }
  EXPECT_EQ(labels.size(), 20u);
}

TEST(Generators, RejectBadArguments) {
  EXPECT_THROW(generate_quality_dataset(9, 0), InputError);
  auto cfg = small_config();
  cfg.image_size = 18;
  EXPECT_THROW(generate_quality_dataset(10, 0, cfg), ConfigError);
  cfg = small_config();
  cfg.classes = 7;
  EXPECT_THROW(generate_correspondence_dataset(10, 0, cfg), ConfigError);
  cfg = small_config();
  cfg.vocab_size = cfg.classes + 1;
  EXPECT_THROW(generate_correspondence_dataset(10, 0, cfg), ConfigError);
}

TEST(Split, SizesAndPartition) {
  const auto s10 = split(10, {0.8, 1});
  EXPECT_EQ(s10.train.size(), 8u);
  EXPECT_EQ(s10.test.size(), 2u);
  const auto s800 = split(800, {0.8, 1});
  EXPECT_EQ(s800.train.size(), 640u);
  EXPECT_EQ(s800.test.size(), 160u);
  std::set<std::size_t> all(s800.train.begin(), s800.train.end());
  all.insert(s800.test.begin(), s800.test.end());
  EXPECT_EQ(all.size(), 800u);
  EXPECT_EQ(*all.rbegin(), 799u);
  EXPECT_TRUE(std::is_sorted(s800.train.begin(), s800.train.end()));
  EXPECT_EQ(split(3, {0.99, 1}).test.size(), 1u);
  EXPECT_EQ(split(3, {0.01, 1}).train.size(), 1u);
}

TEST(Split, SeedControlsMembership) {
  EXPECT_EQ(split(100, {0.8, 5}).test, split(100, {0.8, 5}).test);
  EXPECT_NE(split(100, {0.8, 5}).test, split(100, {0.8, 6}).test);
  EXPECT_THROW(split(10, {1.0, 0}), ConfigError);
  EXPECT_THROW(split(10, {0.0, 0}), ConfigError);
}

TEST(Manifest, RoundTripPreservesRecordsAndPixels) {
  test::TempDir dir("manifest");
  auto ds = generate_correspondence_dataset(12, 2, small_config());
  assign_split(ds, {0.75, 3});
  save_manifest(ds, dir.path() / "manifest.jsonl");
  const auto back = load_manifest(dir.path() / "manifest.jsonl");
  ASSERT_EQ(back.records, ds.records);
  for (std::size_t i = 0; i < ds.size(); ++i) EXPECT_TRUE(same_pixels(back.images[i], ds.images[i]));
  EXPECT_EQ(back.indices(Split::kTest).size(), 3u);
  EXPECT_TRUE(std::filesystem::exists(dir.path() / "images" / "000011.mlt1"));
}

TEST(Manifest, TruncatedLineReportsItsLineNumber) {
  test::TempDir dir("truncated");
  auto ds = generate_quality_dataset(10, 2, small_config());
  const auto path = dir.path() / "manifest.jsonl";
  save_manifest(ds, path);
  std::string text = read_file(path);
  // Cut the file in the middle of its third line.
  std::size_t pos = 0;
  for (int i = 0; i < 2; ++i) pos = text.find('\n', pos) + 1;
  write_file(path, text.substr(0, pos + 10));
  try {
    load_manifest(path);
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 3u);
  }
}

TEST(Manifest, LabelOutOfRangeIsRejected) {
  test::TempDir dir("range");
  const auto path = dir.path() / "manifest.jsonl";
  write_file(path,
             "{\"image_ref\":\"a.mlt1\",\"prompt_tokens\":[],\"mos_quality\":1.5,"
             "\"mos_correspondence\":0.0,\"split\":\"train\"}\n");
  EXPECT_THROW(load_manifest(path), ParseError);
}

TEST(Manifest, MissingOrCorruptBlobIsAnIntegrityError) {
  test::TempDir dir("missing");
  auto ds = generate_quality_dataset(10, 2, small_config());
  const auto path = dir.path() / "manifest.jsonl";
  save_manifest(ds, path);
  write_file(dir.path() / "images" / "000004.mlt1", "MLT1");
  EXPECT_THROW(load_manifest(path), IntegrityError);
  std::filesystem::remove(dir.path() / "images" / "000004.mlt1");
  EXPECT_THROW(load_manifest(path), IntegrityError);
}

TEST(CorrespondenceDataset, ClassTokenInThePromptDeterminesTheLabel) {
  auto cfg = small_config();
  const auto ds = generate_correspondence_dataset(100, 6, cfg);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto& f = ds.correspondence_factors[i];
    std::int32_t named = 0;
    for (auto t : ds.records[i].prompt_tokens) {
      if (t <= static_cast<std::int32_t>(cfg.classes)) named = t;
    }
    // Swapping in any other class token flips a match to the partial-credit floor and back.
    for (int alt = 0; alt < static_cast<int>(cfg.classes); ++alt) {
      const double expected = alt == f.image_class ? f.weight : 0.3 * (1.0 - f.weight);
      EXPECT_DOUBLE_EQ(correspondence_label(alt == f.image_class, f.weight), expected);
    }
    EXPECT_DOUBLE_EQ(ds.records[i].mos_correspondence, correspondence_label(named == f.image_class + 1, f.weight));
  }
}
