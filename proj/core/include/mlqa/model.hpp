#pragma once

#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mlqa/backbones.hpp"
#include "mlqa/fusion.hpp"
#include "mlqa/layers.hpp"

namespace mlqa {

/// PerceptualQuality is served by MGLF-Net, Correspondence by MPEF-Net.
enum class Task { kPerceptualQuality, kCorrespondence };

enum class AblationVariant {
  kFull,
  kWithoutTransformerFeatures,  // MGLF: drop the G_i stage, keep CNN features
  kWithoutCnnFeatures,          // MGLF: drop the L_i stage and the CNN
  kWithoutPromptEmbedded,       // MPEF: drop the prompt stage and the text encoder
  kSingleLevelLast,             // both: only the last level feeds aggregation
};

std::string task_name(Task task);
Task parse_task(const std::string& name);
std::string variant_name(AblationVariant v);
/// Human-readable row label used in ablation reports.
std::string variant_label(AblationVariant v);
AblationVariant parse_variant(const std::string& name);
/// Throws ConfigError if `v` is not defined for `task`.
void check_variant(Task task, AblationVariant v);

struct ModelConfig {
  Task task = Task::kPerceptualQuality;
  AblationVariant variant = AblationVariant::kFull;
  ImageEncoderConfig image;
  CnnConfig cnn;
  TextEncoderConfig text;
  /// Learnable queries per level; 0 selects the task default (4 for GLF, 8 for PEF).
  std::size_t queries = 0;
  std::size_t fusion_heads = 4;
  /// Regression-head hidden width; 0 selects D/2.
  std::size_t head_hidden = 0;
  DType dtype = DType::kF32;
  std::uint64_t seed = 0;

  std::size_t effective_queries() const;
  std::size_t effective_head_hidden() const;
  /// Levels whose refined queries are aggregated: {0,1,2,3}, or {3} for single-level.
  std::vector<std::size_t> levels() const;
  bool uses_image_transformer() const;
  bool uses_cnn() const;
  bool uses_text() const;
  void validate() const;
};

/// Token-axis concatenation of the refined query sets, then the mean
/// over all tokens. Inputs (B, N_Q, D) each; output (B, D).
Tensor aggregate(std::span<const Tensor> refined);

/// MOS = MLP(F): affine D -> hidden, GELU, affine hidden -> 1.
class RegressionHead {
 public:
  RegressionHead() = default;
  RegressionHead(ParameterStore& store, const std::string& prefix, std::size_t dim, std::size_t hidden);
  Tensor operator()(const Tensor& pooled) const;
  void zero();

 private:
  FeedForward mlp_;
};

/// Intermediate values of one forward pass, for inspection and tests.
struct ForwardTrace {
  std::vector<Tensor> global;   // G_i
  std::vector<Tensor> local;    // L_i
  Tensor prompt;                // P
  std::vector<Tensor> refined;  // Q~_i for each included level
  Tensor concatenated;          // Q~_cat
  Tensor pooled;                // F_task
};

/// MGLF-Net or MPEF-Net, depending on the task, with the configured ablation.
class QualityModel {
 public:
  explicit QualityModel(const ModelConfig& cfg);
  QualityModel(const QualityModel&) = delete;
  QualityModel& operator=(const QualityModel&) = delete;

  /// images: (B, C, H, W) in any dtype (converted to the model dtype). `prompts` is
  /// required for the correspondence task. Returns scores (B, 1).
  Tensor forward(const Tensor& images, const PromptBatch* prompts = nullptr,
                 ForwardTrace* trace = nullptr) const;
  Tensor forward_mglf(const Tensor& images, ForwardTrace* trace = nullptr) const;
  Tensor forward_mpef(const Tensor& images, const PromptBatch& prompts,
                      ForwardTrace* trace = nullptr) const;

  const ModelConfig& config() const { return cfg_; }
  ParameterStore& parameters() { return store_; }
  const ParameterStore& parameters() const { return store_; }
  /// Block for level `level` (0..3); throws if that level is not part of the model.
  FusionBlock& block(std::size_t level);
  RegressionHead& head() { return head_; }

 private:
  Tensor finish(std::vector<Tensor> refined, ForwardTrace* trace) const;

  ModelConfig cfg_;
  ParameterStore store_;
  std::unique_ptr<ImageTransformer> vit_;
  std::unique_ptr<ConvBackbone> cnn_;
  std::vector<std::unique_ptr<Adapter>> adapters_;  // indexed by level, null if unused
  std::unique_ptr<TextEncoder> text_;
  std::vector<std::unique_ptr<FusionBlock>> blocks_;  // indexed by level, null if unused
  RegressionHead head_;
};

}  // namespace mlqa
