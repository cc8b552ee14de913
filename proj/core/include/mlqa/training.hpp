#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mlqa/data.hpp"
#include "mlqa/model.hpp"
#include "mlqa/tensor.hpp"

namespace mlqa {

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 16;
  double learning_rate = 1e-3;
  double weight_decay = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t seed = 0;
  /// Inference batch for evaluation passes.
  std::size_t eval_batch_size = 64;

  void validate() const;
};

/// Decoupled-weight-decay Adam. Moments are kept in the parameter dtype; the
/// update itself is evaluated in double.
class AdamW {
 public:
  explicit AdamW(const TrainConfig& cfg);

  /// theta <- theta * (1 - lr*wd), then theta <- theta - lr * m_hat / (sqrt(v_hat) + eps).
  /// Throws ContractError if a parameter holds no gradient and NumericalError
  /// (naming the parameter) if an update turns non-finite.
  void step(std::vector<Parameter>& params);

  std::uint64_t steps() const { return step_; }
  std::vector<Tensor>& first_moments() { return m_; }
  std::vector<Tensor>& second_moments() { return v_; }
  const std::vector<Tensor>& first_moments() const { return m_; }
  const std::vector<Tensor>& second_moments() const { return v_; }
  void set_state(std::uint64_t steps, std::vector<Tensor> m, std::vector<Tensor> v);

 private:
  double lr_, wd_, beta1_, beta2_, eps_;
  std::uint64_t step_ = 0;
  std::vector<Tensor> m_, v_;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

/// Snapshot of training state.
///
/// Layout (little-endian): "MLCK", u32 version, u64 epoch, u64 rng_state,
/// u32 config length + config bytes, u32 parameter count, then per parameter
/// u32 name length, name, u8 dtype, u8 rank, u32 extents, scalars; then u64 adam
/// step, u8 has_moments and, if set, the first and second moments of every
/// parameter in the same order (u8 dtype, u8 rank, u32 extents, scalars).
struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  std::uint64_t epoch = 0;
  std::uint64_t rng_state = 0;
  /// Resolved run configuration (JSON text), empty when unknown.
  std::string config;
  std::vector<NamedTensor> parameters;
  std::uint64_t adam_step = 0;
  std::vector<Tensor> first_moments;
  std::vector<Tensor> second_moments;
};

std::string encode_checkpoint(const Checkpoint& ck);
/// Throws ParseError on malformed input.
Checkpoint decode_checkpoint(std::string_view bytes);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Deep copy of the model parameters (and optimizer moments when given).
Checkpoint capture(const QualityModel& model, const AdamW* optimizer, std::uint64_t epoch,
                   std::uint64_t rng_state, std::string config = {});
/// Copies checkpoint values into `model` (and `optimizer` when given). Throws
/// IntegrityError when names, shapes or dtypes do not line up.
void restore(const Checkpoint& ck, QualityModel& model, AdamW* optimizer = nullptr);

/// Builds the (B, C, H, W) image batch and, when the task needs it, the prompt batch.
struct Batch {
  Tensor images;
  std::optional<PromptBatch> prompts;
  Tensor labels;  // (B, 1), model dtype
};
Batch make_batch(const QualityModel& model, const Dataset& dataset, std::span<const std::size_t> indices);

/// Correlation metrics over pooled scores. A metric failure (for example a
/// constant prediction vector) is reported in `error` instead of being thrown.
struct Evaluation {
  std::vector<double> predictions;
  std::vector<double> labels;
  double loss = 0.0;
  std::optional<double> srcc;
  std::optional<double> plcc;
  std::string error;

  bool ok() const { return error.empty(); }
};

Evaluation score_predictions(std::vector<double> predictions, std::vector<double> labels);
/// Inference-only scores for the given records.
std::vector<double> predict(const QualityModel& model, const Dataset& dataset,
                            std::span<const std::size_t> indices, std::size_t batch_size);
/// Throws InputError for fewer than two records.
Evaluation evaluate(const QualityModel& model, const Dataset& dataset,
                    std::span<const std::size_t> indices, std::size_t batch_size);

struct EpochRecord {
  std::size_t epoch = 0;
  Split split = Split::kTrain;
  double loss = 0.0;
  std::optional<double> srcc;
  std::optional<double> plcc;
  std::string error;
};

/// One JSON object per line: epoch, split, loss, srcc, plcc (null when undefined).
std::string history_to_jsonl(std::span<const EpochRecord> history);
std::vector<EpochRecord> history_from_jsonl(std::string_view text);

struct TrainResult {
  Checkpoint last;
  Checkpoint best;
  std::size_t best_epoch = 0;
  std::vector<EpochRecord> history;

  /// Test-split record of the final epoch.
  const EpochRecord& final_test() const;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Trains every parameter end-to-end on the records marked train, evaluating on
/// the test split after each epoch. Deterministic in (cfg, dataset, model init).
/// A non-finite value aborts with NumericalError naming the first offending parameter.
TrainResult train(QualityModel& model, const Dataset& dataset, const TrainConfig& cfg,
                  const EpochCallback& on_epoch = {}, std::string config_text = {});

// --------------------------------------------------------------------------- ablation

struct AblationSpec {
  AblationVariant variant = AblationVariant::kFull;
  /// 0 keeps the base configuration's query count.
  std::size_t queries = 0;

  std::string label() const;
};

/// Variant rows for a task: MGLF {Full, w/o Transformer, w/o CNN, Single-Level,
/// N_Q=4, N_Q=8}; MPEF {Full, w/o Prompt-Embedded, Single-Level, N_Q=4, N_Q=8}.
std::vector<AblationSpec> default_ablation_specs(Task task);

struct AblationRow {
  std::string variant;  // short name, e.g. "single_level"
  std::string label;    // report label, e.g. "Single-Level (the last)"
  std::size_t queries = 0;
  std::optional<double> srcc;
  std::optional<double> plcc;
  std::string error;

  bool operator==(const AblationRow&) const = default;
};

struct AblationReport {
  Task task = Task::kPerceptualQuality;
  std::vector<AblationRow> rows;

  /// First line {"task": ...}, then one object per row.
  std::string to_jsonl() const;
  static AblationReport from_jsonl(std::string_view text);
  /// Fixed-width text table with SRCC and PLCC columns.
  std::string to_table() const;
  const AblationRow* find(std::string_view variant, std::size_t queries = 0) const;
};

using AblationCallback = std::function<void(const AblationRow&)>;

/// Trains each spec from the same seeds and reports final-epoch test metrics.
/// Throws ConfigError for a variant that does not apply to the base task.
AblationReport ablate(const Dataset& dataset, const ModelConfig& base, const TrainConfig& cfg,
                      std::span<const AblationSpec> specs, const AblationCallback& on_row = {});

}  // namespace mlqa
