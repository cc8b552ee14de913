#include "mlqa/model.hpp"

#include "mlqa/errors.hpp"

namespace mlqa {

std::string task_name(Task task) {
  return task == Task::kPerceptualQuality ? "quality" : "correspondence";
}

Task parse_task(const std::string& name) {
  if (name == "quality" || name == "mglf") return Task::kPerceptualQuality;
  if (name == "correspondence" || name == "mpef") return Task::kCorrespondence;
  throw ConfigError("unknown task '" + name + "' (expected quality or correspondence)");
}

std::string variant_name(AblationVariant v) {
  switch (v) {
    case AblationVariant::kFull: return "full";
    case AblationVariant::kWithoutTransformerFeatures: return "wo_transformer";
    case AblationVariant::kWithoutCnnFeatures: return "wo_cnn";
    case AblationVariant::kWithoutPromptEmbedded: return "wo_prompt";
    case AblationVariant::kSingleLevelLast: return "single_level";
  }
  return "full";
}

std::string variant_label(AblationVariant v) {
  switch (v) {
    case AblationVariant::kFull: return "Full Model";
    case AblationVariant::kWithoutTransformerFeatures: return "w/o Transformer features";
    case AblationVariant::kWithoutCnnFeatures: return "w/o CNN features";
    case AblationVariant::kWithoutPromptEmbedded: return "w/o Prompt-Embedded";
    case AblationVariant::kSingleLevelLast: return "Single-Level (the last)";
  }
  return "Full Model";
}

AblationVariant parse_variant(const std::string& name) {
  for (auto v : {AblationVariant::kFull, AblationVariant::kWithoutTransformerFeatures,
                 AblationVariant::kWithoutCnnFeatures, AblationVariant::kWithoutPromptEmbedded,
                 AblationVariant::kSingleLevelLast}) {
    if (name == variant_name(v)) return v;
  }
  throw ConfigError("unknown ablation variant '" + name + "'");
}

void check_variant(Task task, AblationVariant v) {
  const bool quality = task == Task::kPerceptualQuality;
  if ((v == AblationVariant::kWithoutTransformerFeatures || v == AblationVariant::kWithoutCnnFeatures) && !quality) {
    throw ConfigError("variant " + variant_name(v) + " applies to the quality task only");
  }
  if (v == AblationVariant::kWithoutPromptEmbedded && quality) {
    throw ConfigError("variant wo_prompt applies to the correspondence task only");
  }
}

std::size_t ModelConfig::effective_queries() const {
  if (queries != 0) return queries;
  return task == Task::kPerceptualQuality ? 4 : 8;
}

std::size_t ModelConfig::effective_head_hidden() const {
  return head_hidden != 0 ? head_hidden : std::max<std::size_t>(1, image.dim / 2);
}

std::vector<std::size_t> ModelConfig::levels() const {
  if (variant == AblationVariant::kSingleLevelLast) return {kLevels - 1};
  return {0, 1, 2, 3};
}

bool ModelConfig::uses_image_transformer() const {
  return variant != AblationVariant::kWithoutTransformerFeatures;
}

bool ModelConfig::uses_cnn() const {
  return task == Task::kPerceptualQuality && variant != AblationVariant::kWithoutCnnFeatures;
}

bool ModelConfig::uses_text() const {
  return task == Task::kCorrespondence && variant != AblationVariant::kWithoutPromptEmbedded;
}

void ModelConfig::validate() const {
  check_variant(task, variant);
  image.validate();
  if (task == Task::kPerceptualQuality) {
    cnn.validate();
    if (cnn.channels != image.channels) throw ConfigError("cnn and image encoder disagree on input channels");
    if (image.image_size % (std::size_t{1} << kLevels) != 0) {
      throw ConfigError("image_size must be divisible by 16 for the four CNN stages");
    }
  } else {
    text.validate();
  }
  if (fusion_heads == 0 || image.dim % fusion_heads != 0) {
    throw ConfigError("fusion_heads must divide the embedding width");
  }
}

Tensor aggregate(std::span<const Tensor> refined) {
  return mean_tokens(concat_tokens(refined));
}

RegressionHead::RegressionHead(ParameterStore& store, const std::string& prefix, std::size_t dim,
                               std::size_t hidden)
    : mlp_(store, prefix, dim, hidden, 1) {}

Tensor RegressionHead::operator()(const Tensor& pooled) const {
  if (pooled.rank() != 2) throw DimensionError("regression head expects (B, D), got " + to_string(pooled.shape()));
  return mlp_(pooled);
}

void RegressionHead::zero() {
  mlp_.fc1.zero();
  mlp_.fc2.zero();
}

QualityModel::QualityModel(const ModelConfig& cfg) : cfg_(cfg), store_(cfg.dtype, cfg.seed) {
  cfg_.validate();
  const std::size_t d = cfg_.image.dim;
  const auto levels = cfg_.levels();
  const bool quality = cfg_.task == Task::kPerceptualQuality;

  if (cfg_.uses_image_transformer()) vit_ = std::make_unique<ImageTransformer>(store_, "vit", cfg_.image);
  if (cfg_.uses_cnn()) {
    cnn_ = std::make_unique<ConvBackbone>(store_, "cnn", cfg_.cnn);
    adapters_.resize(kLevels);
    for (auto lv : levels) {
      adapters_[lv] = std::make_unique<Adapter>(store_, "adapter.level" + std::to_string(lv),
                                                cfg_.cnn.stage_channels(lv), d);
    }
  }
  if (cfg_.uses_text()) text_ = std::make_unique<TextEncoder>(store_, "text", cfg_.text, d);

  FusionBlockConfig bc;
  bc.kind = quality ? BlockKind::kGlf : BlockKind::kPef;
  bc.dim = d;
  bc.queries = cfg_.effective_queries();
  bc.heads = cfg_.fusion_heads;
  if (quality) {
    bc.first_stage = cfg_.uses_image_transformer();
    bc.second_stage = cfg_.uses_cnn();
  } else {
    bc.first_stage = cfg_.uses_text();
    bc.second_stage = true;
  }
  blocks_.resize(kLevels);
  for (auto lv : levels) {
    blocks_[lv] = std::make_unique<FusionBlock>(
        store_, std::string(block_kind_name(bc.kind)) + ".level" + std::to_string(lv), bc);
  }
  head_ = RegressionHead(store_, "head", d, cfg_.effective_head_hidden());
}

FusionBlock& QualityModel::block(std::size_t level) {
  if (level >= blocks_.size() || !blocks_[level]) {
    throw ContractError("model has no fusion block at level " + std::to_string(level));
  }
  return *blocks_[level];
}

Tensor QualityModel::forward(const Tensor& images, const PromptBatch* prompts, ForwardTrace* trace) const {
  if (cfg_.task == Task::kPerceptualQuality) return forward_mglf(images, trace);
  if (prompts == nullptr) {
    if (cfg_.uses_text()) throw ContractError("correspondence model needs prompts");
    PromptBatch empty;
    return forward_mpef(images, empty, trace);
  }
  return forward_mpef(images, *prompts, trace);
}

Tensor QualityModel::finish(std::vector<Tensor> refined, ForwardTrace* trace) const {
  Tensor cat = concat_tokens(refined);
  Tensor pooled = mean_tokens(cat);
  Tensor score = head_(pooled);
  if (trace != nullptr) {
    trace->refined = std::move(refined);
    trace->concatenated = cat;
    trace->pooled = pooled;
  }
  return score;
}

Tensor QualityModel::forward_mglf(const Tensor& images, ForwardTrace* trace) const {
  if (cfg_.task != Task::kPerceptualQuality) throw ContractError("forward_mglf on a correspondence model");
  const Tensor x = images.dtype() == cfg_.dtype ? images : images.to(cfg_.dtype);
  if (x.rank() != 4) throw DimensionError("images must be (B, C, H, W), got " + to_string(x.shape()));
  const std::size_t batch = x.dim(0);

  std::vector<Tensor> global, local;
  if (vit_) global = vit_->encode(x);
  if (cnn_) {
    auto maps = cnn_->encode(x);
    local.resize(kLevels);
    for (std::size_t lv = 0; lv < kLevels; ++lv) {
      if (adapters_[lv]) local[lv] = (*adapters_[lv])(maps[lv]);
    }
  }
  std::vector<Tensor> refined;
  for (auto lv : cfg_.levels()) {
    const Tensor* g = global.empty() ? nullptr : &global[lv];
    const Tensor* l = local.empty() ? nullptr : &local[lv];
    refined.push_back(blocks_[lv]->glf(g, l, batch));
  }
  if (trace != nullptr) {
    trace->global = global;
    trace->local = local;
  }
  return finish(std::move(refined), trace);
}

Tensor QualityModel::forward_mpef(const Tensor& images, const PromptBatch& prompts,
                                  ForwardTrace* trace) const {
  if (cfg_.task != Task::kCorrespondence) throw ContractError("forward_mpef on a quality model");
  const Tensor x = images.dtype() == cfg_.dtype ? images : images.to(cfg_.dtype);
  if (x.rank() != 4) throw DimensionError("images must be (B, C, H, W), got " + to_string(x.shape()));
  const std::size_t batch = x.dim(0);

  std::vector<Tensor> global = vit_->encode(x);
  Tensor prompt;
  if (text_) {
    if (prompts.batch != batch) {
      throw DimensionError("prompt batch " + std::to_string(prompts.batch) + " vs image batch " +
                           std::to_string(batch));
    }
    prompt = text_->encode(prompts);
  }
  std::vector<Tensor> refined;
  for (auto lv : cfg_.levels()) {
    refined.push_back(blocks_[lv]->pef(text_ ? &prompt : nullptr, text_ ? &prompts.mask : nullptr,
                                       &global[lv], batch));
  }
  if (trace != nullptr) {
    trace->global = global;
    trace->prompt = prompt;
  }
  return finish(std::move(refined), trace);
}

}  // namespace mlqa
