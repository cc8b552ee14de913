#include <gtest/gtest.h>

#include "mlqa/errors.hpp"
#include "mlqa/gradcheck.hpp"
#include "mlqa/model.hpp"
#include "test_util.hpp"

using namespace mlqa;
using mlqa::test::random_f64;

namespace {

Tensor images(Rng& rng, std::size_t b, DType dt = DType::kF32) {
  return random_f64(rng, {b, 3, 32, 32}, false).to(dt);
}

}  // namespace

TEST(Aggregate, FourLevelsConcatenateThenPool) {
  Rng rng(1);
  std::vector<Tensor> q;
  for (int i = 0; i < 4; ++i) q.push_back(random_f64(rng, {2, 4, 64}, false));
  EXPECT_EQ(concat_tokens(q).shape(), (Shape{2, 16, 64}));
  Tensor f = aggregate(q);
  EXPECT_EQ(f.shape(), (Shape{2, 64}));
  // Brute-force mean over all 4 * N_Q token vectors.
  for (std::size_t b = 0; b < 2; ++b) {
    for (std::size_t d = 0; d < 64; ++d) {
      double acc = 0.0;
      for (const auto& t : q) {
        for (std::size_t n = 0; n < 4; ++n) acc += t.at({b, n, d});
      }
      EXPECT_NEAR(f.at({b, d}), acc / 16.0, 1e-12);
    }
  }
}

TEST(Aggregate, IdenticalLevelsGiveOneLevelMean) {
  Rng rng(2);
  Tensor one = random_f64(rng, {2, 4, 8}, false);
  const std::vector<Tensor> q{one, one, one, one};
  const auto f = aggregate(q).to_vector();
  const auto m = mean_tokens(one).to_vector();
  for (std::size_t i = 0; i < f.size(); ++i) EXPECT_NEAR(f[i], m[i], 1e-15);
}

TEST(Aggregate, WidthMismatchIsDimensionError) {
  const std::vector<Tensor> q{Tensor::zeros({2, 4, 8}, DType::kF32), Tensor::zeros({2, 4, 6}, DType::kF32)};
  EXPECT_THROW(aggregate(q), DimensionError);
}

TEST(RegressionHead, ZeroHeadGivesZeroAndShapeIsBx1) {
  ParameterStore store(DType::kF64, 3);
  RegressionHead head(store, "head", 16, 8);
  head.zero();
  for (std::size_t b : {1u, 3u, 7u}) {
    Tensor out = head(Tensor::zeros({b, 16}, DType::kF64));
    EXPECT_EQ(out.shape(), (Shape{b, 1}));
    for (double v : out.to_vector()) EXPECT_EQ(v, 0.0);
  }
}

TEST(RegressionHead, GradientIntoPooledFeatureMatchesFiniteDifferences) {
  ParameterStore store(DType::kF64, 4);
  RegressionHead head(store, "head", 8, 4);
  Rng rng(5);
  Tensor f = random_f64(rng, {3, 8});
  Tensor w = random_f64(rng, {3, 1}, false);
  auto loss = [&] { return sum(mul(head(f), w)); };
  EXPECT_LE(check_gradient("f", loss, f).max_rel_error, 1e-4);
}

TEST(ModelConfig, DefaultsAndValidation) {
  ModelConfig cfg;
  EXPECT_EQ(cfg.effective_queries(), 4u);
  EXPECT_EQ(cfg.effective_head_hidden(), 32u);
  cfg.task = Task::kCorrespondence;
  EXPECT_EQ(cfg.effective_queries(), 8u);
  cfg.variant = AblationVariant::kWithoutCnnFeatures;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg.task = Task::kPerceptualQuality;
  cfg.variant = AblationVariant::kWithoutPromptEmbedded;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(Mglf, DefaultModelShapesFollowTheAggregationLaw) {
  ModelConfig cfg;
  QualityModel model(cfg);
  Rng rng(6);
  ForwardTrace trace;
  Tensor out = model.forward(images(rng, 2), nullptr, &trace);
  EXPECT_EQ(out.shape(), (Shape{2, 1}));
  ASSERT_EQ(trace.global.size(), 4u);
  ASSERT_EQ(trace.local.size(), 4u);
  const std::size_t local_tokens[] = {256, 64, 16, 4};
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(trace.global[i].shape(), (Shape{2, 17, 64}));
    EXPECT_EQ(trace.local[i].shape(), (Shape{2, local_tokens[i], 64}));
    EXPECT_EQ(trace.refined[i].shape(), (Shape{2, 4, 64}));
  }
  EXPECT_EQ(trace.concatenated.shape(), (Shape{2, 16, 64}));
  EXPECT_EQ(trace.pooled.shape(), (Shape{2, 64}));
  for (double v : out.to_vector()) EXPECT_TRUE(std::isfinite(v));
}

TEST(Mglf, SingleLevelAggregatesOnlyTheLastLevel) {
  ModelConfig cfg;
  cfg.variant = AblationVariant::kSingleLevelLast;
  QualityModel model(cfg);
  Rng rng(7);
  ForwardTrace trace;
  model.forward(images(rng, 2), nullptr, &trace);
  EXPECT_EQ(trace.refined.size(), 1u);
  EXPECT_EQ(trace.concatenated.shape(), (Shape{2, 4, 64}));
  EXPECT_EQ(model.parameters().count_with_prefix("glf.level0"), 0u);
  EXPECT_GT(model.parameters().count_with_prefix("glf.level3"), 0u);
  EXPECT_THROW(model.block(0), ContractError);
}

TEST(Mglf, DuplicateImagesScoreEqually) {
  QualityModel model(ModelConfig{});
  Rng rng(8);
  auto v = images(rng, 1).to_vector();
  std::vector<double> two = v;
  two.insert(two.end(), v.begin(), v.end());
  const auto out = model.forward(Tensor::from_values({2, 3, 32, 32}, two, DType::kF32)).to_vector();
  EXPECT_EQ(out[0], out[1]);
}

TEST(Mglf, AblationsOmitTheirParameters) {
  ModelConfig cfg;
  cfg.variant = AblationVariant::kWithoutCnnFeatures;
  QualityModel no_cnn(cfg);
  EXPECT_EQ(no_cnn.parameters().count_with_prefix("cnn."), 0u);
  EXPECT_EQ(no_cnn.parameters().count_with_prefix("adapter."), 0u);
  EXPECT_EQ(no_cnn.parameters().count_with_prefix("glf.level0.stage2"), 0u);
  EXPECT_GT(no_cnn.parameters().count_with_prefix("vit."), 0u);

  cfg.variant = AblationVariant::kWithoutTransformerFeatures;
  QualityModel no_vit(cfg);
  EXPECT_EQ(no_vit.parameters().count_with_prefix("vit."), 0u);
  EXPECT_EQ(no_vit.parameters().count_with_prefix("glf.level0.stage1"), 0u);
  EXPECT_GT(no_vit.parameters().count_with_prefix("cnn."), 0u);

  Rng rng(9);
  EXPECT_EQ(no_cnn.forward(images(rng, 2)).shape(), (Shape{2, 1}));
  EXPECT_EQ(no_vit.forward(images(rng, 2)).shape(), (Shape{2, 1}));
}

TEST(Mglf, QueryCountOverride) {
  ModelConfig cfg;
  cfg.queries = 8;
  QualityModel model(cfg);
  Rng rng(10);
  ForwardTrace trace;
  model.forward(images(rng, 1), nullptr, &trace);
  EXPECT_EQ(trace.concatenated.shape(), (Shape{1, 32, 64}));
}

TEST(Mglf, ZeroedBlocksPassQueriesThrough) {
  QualityModel model(ModelConfig{});
  for (std::size_t lv = 0; lv < 4; ++lv) model.block(lv).zero_residual_branches();
  Rng rng(11);
  ForwardTrace trace;
  model.forward(images(rng, 2), nullptr, &trace);
  for (std::size_t lv = 0; lv < 4; ++lv) {
    const auto q = model.block(lv).queries().to_vector();
    const auto r = trace.refined[lv].to_vector();
    for (std::size_t b = 0; b < 2; ++b) {
      EXPECT_TRUE(std::equal(q.begin(), q.end(), r.begin() + b * q.size()));
    }
  }
}

TEST(Mpef, DefaultModelShapes) {
  ModelConfig cfg;
  cfg.task = Task::kCorrespondence;
  QualityModel model(cfg);
  Rng rng(12);
  const auto prompts = PromptBatch::from_sequences({{1, 7, 9}, {2}}, cfg.text.max_tokens, cfg.text.pad_id);
  ForwardTrace trace;
  Tensor out = model.forward(images(rng, 2), &prompts, &trace);
  EXPECT_EQ(out.shape(), (Shape{2, 1}));
  EXPECT_EQ(trace.prompt.shape(), (Shape{2, 16, 64}));
  EXPECT_EQ(trace.concatenated.shape(), (Shape{2, 32, 64}));
  EXPECT_THROW(model.forward(images(rng, 2)), ContractError);
}

TEST(Mpef, WithoutPromptSkipsStageOne) {
  ModelConfig cfg;
  cfg.task = Task::kCorrespondence;
  cfg.variant = AblationVariant::kWithoutPromptEmbedded;
  QualityModel model(cfg);
  EXPECT_EQ(model.parameters().count_with_prefix("text."), 0u);
  for (std::size_t lv = 0; lv < 4; ++lv) {
    EXPECT_EQ(model.parameters().count_with_prefix("pef.level" + std::to_string(lv) + ".stage1"), 0u);
  }
  Rng rng(13);
  EXPECT_EQ(model.forward(images(rng, 3)).shape(), (Shape{3, 1}));
}

TEST(Mpef, DifferentPromptsChangeTheScore) {
  ModelConfig cfg;
  cfg.task = Task::kCorrespondence;
  QualityModel model(cfg);
  Rng rng(14);
  auto v = images(rng, 1).to_vector();
  std::vector<double> two = v;
  two.insert(two.end(), v.begin(), v.end());
  const auto prompts = PromptBatch::from_sequences({{1, 9}, {3, 9}}, cfg.text.max_tokens, cfg.text.pad_id);
  const auto out = model.forward(Tensor::from_values({2, 3, 32, 32}, two, DType::kF32), &prompts).to_vector();
  EXPECT_NE(out[0], out[1]);
}

TEST(EndToEnd, TinyModelsPassFiniteDifferenceChecks) {
  for (Task task : {Task::kPerceptualQuality, Task::kCorrespondence}) {
    const GradCheckReport report = gradcheck_model(tiny_model_config(task, 3), 3);
    for (const auto& e : report.entries) EXPECT_LE(e.max_rel_error, kGradCheckTolerance) << e.name;
  }
}

TEST(EndToEnd, TinyAblatedModelsPassFiniteDifferenceChecks) {
  ModelConfig single = tiny_model_config(Task::kPerceptualQuality, 4);
  single.variant = AblationVariant::kSingleLevelLast;
  ModelConfig no_prompt = tiny_model_config(Task::kCorrespondence, 4);
  no_prompt.variant = AblationVariant::kWithoutPromptEmbedded;
  for (const auto& cfg : {single, no_prompt}) {
    EXPECT_LE(gradcheck_model(cfg, 4).max_rel_error(), kGradCheckTolerance);
  }
}
