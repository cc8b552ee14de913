#include "mlqa/training.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <nlohmann/json.hpp>
#include <sstream>

#include "mlqa/blob_io.hpp"
#include "mlqa/errors.hpp"
#include "mlqa/metrics.hpp"
#include "mlqa/rng.hpp"

namespace mlqa {

namespace {

constexpr char kCheckpointMagic[4] = {'M', 'L', 'C', 'K'};

bool all_finite(const Tensor& t) {
  for (double v : t.to_vector()) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

bool grad_finite(const Tensor& t) {
  if (!t.has_grad()) return true;
  for (double v : t.grad_vector()) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

std::string first_offending_parameter(const std::vector<Parameter>& params) {
  for (const auto& p : params) {
    if (!all_finite(p.tensor)) return p.name + " (non-finite value)";
    if (!grad_finite(p.tensor)) return p.name + " (non-finite gradient)";
  }
  return {};
}

void write_tensor(ByteWriter& w, const Tensor& t) {
  w.u8(static_cast<std::uint8_t>(t.dtype()));
  w.u8(static_cast<std::uint8_t>(t.rank()));
  for (auto e : t.shape()) w.u32(static_cast<std::uint32_t>(e));
  w.scalars(t);
}

Tensor read_tensor(ByteReader& r) {
  const std::uint8_t code = r.u8();
  if (code > 1) throw ParseError("checkpoint: unknown dtype code " + std::to_string(code));
  const std::uint8_t rank = r.u8();
  Shape shape(rank);
  for (auto& e : shape) {
    e = r.u32();
    if (e == 0) throw ParseError("checkpoint: zero extent");
  }
  return r.scalars(shape, static_cast<DType>(code));
}

void copy_into(Tensor& dst, const Tensor& src) {
  dispatch(dst.dtype(), [&]<class T>() {
    auto out = dst.mutable_data<T>();
    auto in = src.data<T>();
    std::copy(in.begin(), in.end(), out.begin());
  });
}

nlohmann::json optional_json(const std::optional<double>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

std::optional<double> optional_from(const nlohmann::json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return j.at(key).get<double>();
}

}  // namespace

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be at least 1");
  if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
  if (eval_batch_size < 1) throw ConfigError("eval_batch_size must be at least 1");
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
    throw ConfigError("learning_rate must be finite and non-negative");
  }
  if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay)) {
    throw ConfigError("weight_decay must be finite and non-negative");
  }
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw ConfigError("betas must lie in [0, 1)");
  }
  if (!(eps > 0.0)) throw ConfigError("eps must be positive");
}

// --------------------------------------------------------------------------- AdamW

AdamW::AdamW(const TrainConfig& cfg)
    : lr_(cfg.learning_rate), wd_(cfg.weight_decay), beta1_(cfg.beta1), beta2_(cfg.beta2), eps_(cfg.eps) {}

void AdamW::set_state(std::uint64_t steps, std::vector<Tensor> m, std::vector<Tensor> v) {
  if (m.size() != v.size()) throw ContractError("AdamW: moment lists differ in length");
  step_ = steps;
  m_ = std::move(m);
  v_ = std::move(v);
}

void AdamW::step(std::vector<Parameter>& params) {
  for (const auto& p : params) {
    if (!p.tensor.has_grad()) throw ContractError("AdamW: parameter '" + p.name + "' has no gradient");
  }
  if (m_.empty()) {
    for (const auto& p : params) {
      m_.push_back(Tensor::zeros(p.tensor.shape(), p.tensor.dtype()));
      v_.push_back(Tensor::zeros(p.tensor.shape(), p.tensor.dtype()));
    }
  }
  if (m_.size() != params.size()) throw ContractError("AdamW: parameter count changed between steps");

  ++step_;
  const double decay = 1.0 - lr_ * wd_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(step_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(step_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& theta = params[i].tensor;
    bool finite = true;
    dispatch(theta.dtype(), [&]<class T>() {
      auto x = theta.mutable_data<T>();
      auto g = theta.grad<T>();
      auto m = m_[i].mutable_data<T>();
      auto v = v_[i].mutable_data<T>();
      for (std::size_t k = 0; k < x.size(); ++k) {
        const double gk = g[k];
        const double mk = beta1_ * static_cast<double>(m[k]) + (1.0 - beta1_) * gk;
        const double vk = beta2_ * static_cast<double>(v[k]) + (1.0 - beta2_) * gk * gk;
        m[k] = static_cast<T>(mk);
        v[k] = static_cast<T>(vk);
        const double decayed = static_cast<double>(x[k]) * decay;
        const double next = decayed - lr_ * (mk / c1) / (std::sqrt(vk / c2) + eps_);
        if (!std::isfinite(next)) finite = false;
        x[k] = static_cast<T>(next);
      }
    });
    if (!finite) {
      throw NumericalError("AdamW step " + std::to_string(step_) + " produced a non-finite value in parameter '" +
                           params[i].name + "'");
    }
  }
}

// --------------------------------------------------------------------------- checkpoint

std::string encode_checkpoint(const Checkpoint& ck) {
  ByteWriter w;
  w.bytes(std::string_view(kCheckpointMagic, 4));
  w.u32(Checkpoint::kVersion);
  w.u64(ck.epoch);
  w.u64(ck.rng_state);
  w.u32(static_cast<std::uint32_t>(ck.config.size()));
  w.bytes(ck.config);
  w.u32(static_cast<std::uint32_t>(ck.parameters.size()));
  for (const auto& p : ck.parameters) {
    w.u32(static_cast<std::uint32_t>(p.name.size()));
    w.bytes(p.name);
    write_tensor(w, p.tensor);
  }
  w.u64(ck.adam_step);
  const bool has_moments = !ck.first_moments.empty();
  if (has_moments && (ck.first_moments.size() != ck.parameters.size() ||
                      ck.second_moments.size() != ck.parameters.size())) {
    throw ContractError("checkpoint: moment count does not match parameter count");
  }
  w.u8(has_moments ? 1 : 0);
  if (has_moments) {
    for (const auto& t : ck.first_moments) write_tensor(w, t);
    for (const auto& t : ck.second_moments) write_tensor(w, t);
  }
  return w.take();
}

Checkpoint decode_checkpoint(std::string_view bytes) {
  ByteReader r(bytes);
  if (r.bytes(4) != std::string_view(kCheckpointMagic, 4)) throw ParseError("checkpoint: bad magic");
  const std::uint32_t version = r.u32();
  if (version != Checkpoint::kVersion) {
    throw ParseError("checkpoint: unsupported version " + std::to_string(version));
  }
  Checkpoint ck;
  ck.epoch = r.u64();
  ck.rng_state = r.u64();
  ck.config = std::string(r.bytes(r.u32()));
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor p;
    p.name = std::string(r.bytes(r.u32()));
    p.tensor = read_tensor(r);
    ck.parameters.push_back(std::move(p));
  }
  ck.adam_step = r.u64();
  const std::uint8_t has_moments = r.u8();
  if (has_moments > 1) throw ParseError("checkpoint: bad moment flag");
  if (has_moments) {
    for (std::uint32_t i = 0; i < count; ++i) ck.first_moments.push_back(read_tensor(r));
    for (std::uint32_t i = 0; i < count; ++i) ck.second_moments.push_back(read_tensor(r));
  }
  if (r.remaining() != 0) throw ParseError("checkpoint: trailing bytes");
  return ck;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  write_file(path, encode_checkpoint(ck));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file(path)); }

Checkpoint capture(const QualityModel& model, const AdamW* optimizer, std::uint64_t epoch,
                   std::uint64_t rng_state, std::string config) {
  Checkpoint ck;
  ck.epoch = epoch;
  ck.rng_state = rng_state;
  ck.config = std::move(config);
  for (const auto& p : model.parameters().all()) ck.parameters.push_back({p.name, p.tensor.detach()});
  if (optimizer != nullptr) {
    ck.adam_step = optimizer->steps();
    for (const auto& t : optimizer->first_moments()) ck.first_moments.push_back(t.detach());
    for (const auto& t : optimizer->second_moments()) ck.second_moments.push_back(t.detach());
  }
  return ck;
}

void restore(const Checkpoint& ck, QualityModel& model, AdamW* optimizer) {
  auto& params = model.parameters().all();
  if (params.size() != ck.parameters.size()) {
    throw IntegrityError("checkpoint holds " + std::to_string(ck.parameters.size()) + " parameters, model has " +
                         std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& src = ck.parameters[i];
    auto& dst = params[i];
    if (src.name != dst.name || src.tensor.shape() != dst.tensor.shape() || src.tensor.dtype() != dst.tensor.dtype()) {
      throw IntegrityError("checkpoint entry '" + src.name + "' " + to_string(src.tensor.shape()) +
                           " does not match model parameter '" + dst.name + "' " + to_string(dst.tensor.shape()));
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) copy_into(params[i].tensor, ck.parameters[i].tensor);
  if (optimizer != nullptr) {
    std::vector<Tensor> m, v;
    for (const auto& t : ck.first_moments) m.push_back(t.detach());
    for (const auto& t : ck.second_moments) v.push_back(t.detach());
    optimizer->set_state(ck.adam_step, std::move(m), std::move(v));
  }
}

// --------------------------------------------------------------------------- batches and evaluation

Batch make_batch(const QualityModel& model, const Dataset& dataset, std::span<const std::size_t> indices) {
  if (indices.empty()) throw ContractError("make_batch: empty index list");
  const auto& cfg = model.config();
  const Shape& item = dataset.images.at(indices[0]).shape();
  std::vector<float> pixels;
  pixels.reserve(indices.size() * numel(item));
  std::vector<double> labels;
  std::vector<std::vector<std::int32_t>> prompts;
  for (auto i : indices) {
    const Tensor& img = dataset.images.at(i);
    if (img.shape() != item) throw DimensionError("make_batch: images differ in shape");
    const Tensor f = img.dtype() == DType::kF32 ? img : img.to(DType::kF32);
    auto d = f.data<float>();
    pixels.insert(pixels.end(), d.begin(), d.end());
    labels.push_back(dataset.label(i, cfg.task));
    prompts.push_back(dataset.records[i].prompt_tokens);
  }
  Shape shape{indices.size()};
  shape.insert(shape.end(), item.begin(), item.end());
  Batch b;
  b.images = Tensor::from_buffer<float>(shape, std::move(pixels));
  if (cfg.uses_text()) {
    b.prompts = PromptBatch::from_sequences(prompts, cfg.text.max_tokens, cfg.text.pad_id);
  }
  b.labels = Tensor::from_values({indices.size(), 1}, labels, cfg.dtype);
  return b;
}

Evaluation score_predictions(std::vector<double> predictions, std::vector<double> labels) {
  Evaluation e;
  e.predictions = std::move(predictions);
  e.labels = std::move(labels);
  if (e.predictions.size() != e.labels.size()) throw InputError("score_predictions: length mismatch");
  double sq = 0.0;
  for (std::size_t i = 0; i < e.labels.size(); ++i) {
    const double d = e.predictions[i] - e.labels[i];
    sq += d * d;
  }
  e.loss = e.labels.empty() ? 0.0 : sq / static_cast<double>(e.labels.size());
  try {
    e.srcc = srcc(e.predictions, e.labels);
    e.plcc = plcc(e.predictions, e.labels);
  } catch (const Error& err) {
    e.srcc.reset();
    e.plcc.reset();
    e.error = err.what();
  }
  return e;
}

std::vector<double> predict(const QualityModel& model, const Dataset& dataset,
                            std::span<const std::size_t> indices, std::size_t batch_size) {
  NoGradGuard no_grad;
  std::vector<double> out;
  out.reserve(indices.size());
  for (std::size_t start = 0; start < indices.size(); start += batch_size) {
    const auto chunk = indices.subspan(start, std::min(batch_size, indices.size() - start));
    const Batch b = make_batch(model, dataset, chunk);
    const Tensor scores = model.forward(b.images, b.prompts ? &*b.prompts : nullptr);
    const auto v = scores.to_vector();
    out.insert(out.end(), v.begin(), v.end());
  }
  return out;
}

Evaluation evaluate(const QualityModel& model, const Dataset& dataset, std::span<const std::size_t> indices,
                    std::size_t batch_size) {
  if (indices.size() < 2) throw InputError("evaluate needs at least 2 records");
  std::vector<double> labels;
  for (auto i : indices) labels.push_back(dataset.label(i, model.config().task));
  return score_predictions(predict(model, dataset, indices, batch_size), std::move(labels));
}

// --------------------------------------------------------------------------- history

std::string history_to_jsonl(std::span<const EpochRecord> history) {
  std::string out;
  for (const auto& r : history) {
    nlohmann::ordered_json j;
    j["epoch"] = r.epoch;
    j["split"] = split_name(r.split);
    j["loss"] = r.loss;
    j["srcc"] = optional_json(r.srcc);
    j["plcc"] = optional_json(r.plcc);
    if (!r.error.empty()) j["error"] = r.error;
    out += j.dump();
    out += '\n';
  }
  return out;
}

std::vector<EpochRecord> history_from_jsonl(std::string_view text) {
  std::vector<EpochRecord> out;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      EpochRecord r;
      r.epoch = j.at("epoch").get<std::size_t>();
      r.split = parse_split(j.at("split").get<std::string>());
      r.loss = j.at("loss").get<double>();
      r.srcc = optional_from(j, "srcc");
      r.plcc = optional_from(j, "plcc");
      if (j.contains("error")) r.error = j.at("error").get<std::string>();
      out.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(std::string("history: ") + e.what(), line_no);
    } catch (const InputError& e) {
      throw ParseError(e.what(), line_no);
    }
  }
  return out;
}

// --------------------------------------------------------------------------- training loop

const EpochRecord& TrainResult::final_test() const {
  for (auto it = history.rbegin(); it != history.rend(); ++it) {
    if (it->split == Split::kTest) return *it;
  }
  throw ContractError("training history has no test record");
}

TrainResult train(QualityModel& model, const Dataset& dataset, const TrainConfig& cfg,
                  const EpochCallback& on_epoch, std::string config_text) {
  cfg.validate();
  if (dataset.images.size() != dataset.records.size()) {
    throw ContractError("train: dataset images and records differ in count");
  }
  std::vector<std::size_t> order = dataset.indices(Split::kTrain);
  const std::vector<std::size_t> test = dataset.indices(Split::kTest);
  if (order.empty()) throw InputError("train: no training records");

  auto& params = model.parameters().all();
  AdamW optimizer(cfg);
  Rng rng(derive_seed(cfg.seed, "shuffle"));
  TrainResult result;
  std::optional<double> best_srcc;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);

    double loss_sum = 0.0;
    for (std::size_t start = 0, step = 0; start < order.size(); start += cfg.batch_size, ++step) {
      const std::span<const std::size_t> chunk(order.data() + start, std::min(cfg.batch_size, order.size() - start));
      const Batch b = make_batch(model, dataset, chunk);
      model.parameters().zero_grad();
      try {
        const Tensor pred = model.forward(b.images, b.prompts ? &*b.prompts : nullptr);
        const Tensor loss = mse_loss(pred, b.labels);
        loss_sum += loss.item() * static_cast<double>(chunk.size());
        loss.backward();
        optimizer.step(params);
      } catch (const NumericalError& e) {
        std::string where = first_offending_parameter(params);
        if (where.empty()) where = "none (all parameters and gradients finite)";
        throw NumericalError("epoch " + std::to_string(epoch) + ", step " + std::to_string(step) + ": " +
                             e.what() + "; first offending parameter: " + where);
      }
    }
    model.parameters().zero_grad();

    EpochRecord train_rec;
    train_rec.epoch = epoch;
    train_rec.split = Split::kTrain;
    train_rec.loss = loss_sum / static_cast<double>(order.size());
    result.history.push_back(train_rec);
    if (on_epoch) on_epoch(train_rec);

    EpochRecord test_rec;
    test_rec.epoch = epoch;
    test_rec.split = Split::kTest;
    if (test.size() >= 2) {
      const Evaluation ev = evaluate(model, dataset, test, cfg.eval_batch_size);
      test_rec.loss = ev.loss;
      test_rec.srcc = ev.srcc;
      test_rec.plcc = ev.plcc;
      test_rec.error = ev.error;
    } else {
      test_rec.error = "fewer than 2 test records";
    }
    result.history.push_back(test_rec);
    if (on_epoch) on_epoch(test_rec);

    result.last = capture(model, &optimizer, epoch, rng.state(), config_text);
    if (epoch == 1 || (test_rec.srcc && (!best_srcc || *test_rec.srcc > *best_srcc))) {
      if (test_rec.srcc) best_srcc = test_rec.srcc;
      result.best = result.last;
      result.best_epoch = epoch;
    }
  }
  return result;
}

// --------------------------------------------------------------------------- ablation

std::string AblationSpec::label() const {
  if (queries == 0) return variant_label(variant);
  return variant_label(variant) + " (N_Q=" + std::to_string(queries) + ")";
}

std::vector<AblationSpec> default_ablation_specs(Task task) {
  if (task == Task::kPerceptualQuality) {
    return {{AblationVariant::kFull, 0},
            {AblationVariant::kWithoutTransformerFeatures, 0},
            {AblationVariant::kWithoutCnnFeatures, 0},
            {AblationVariant::kSingleLevelLast, 0},
            {AblationVariant::kFull, 4},
            {AblationVariant::kFull, 8}};
  }
  return {{AblationVariant::kFull, 0},
          {AblationVariant::kWithoutPromptEmbedded, 0},
          {AblationVariant::kSingleLevelLast, 0},
          {AblationVariant::kFull, 4},
          {AblationVariant::kFull, 8}};
}

std::string AblationReport::to_jsonl() const {
  nlohmann::ordered_json head;
  head["task"] = task_name(task);
  std::string out = head.dump() + "\n";
  for (const auto& r : rows) {
    nlohmann::ordered_json j;
    j["variant"] = r.variant;
    j["label"] = r.label;
    j["queries"] = r.queries;
    j["srcc"] = optional_json(r.srcc);
    j["plcc"] = optional_json(r.plcc);
    j["error"] = r.error;
    out += j.dump();
    out += '\n';
  }
  return out;
}

AblationReport AblationReport::from_jsonl(std::string_view text) {
  AblationReport report;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t line_no = 0;
  bool have_head = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      if (!have_head) {
        report.task = parse_task(j.at("task").get<std::string>());
        have_head = true;
        continue;
      }
      AblationRow r;
      r.variant = j.at("variant").get<std::string>();
      r.label = j.at("label").get<std::string>();
      r.queries = j.at("queries").get<std::size_t>();
      r.srcc = optional_from(j, "srcc");
      r.plcc = optional_from(j, "plcc");
      r.error = j.value("error", std::string{});
      report.rows.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(std::string("ablation report: ") + e.what(), line_no);
    } catch (const ConfigError& e) {
      throw ParseError(e.what(), line_no);
    }
  }
  if (!have_head) throw ParseError("ablation report: missing task header", line_no);
  return report;
}

std::string AblationReport::to_table() const {
  std::size_t width = 7;
  for (const auto& r : rows) width = std::max(width, r.label.size());
  std::ostringstream os;
  os << "task: " << task_name(task) << '\n';
  os << std::left << std::setw(static_cast<int>(width)) << "Variant" << "    SRCC    PLCC\n";
  os << std::fixed << std::setprecision(4);
  for (const auto& r : rows) {
    os << std::left << std::setw(static_cast<int>(width)) << r.label << std::right;
    if (r.srcc && r.plcc) {
      os << "  " << std::setw(6) << *r.srcc << "  " << std::setw(6) << *r.plcc;
    } else {
      os << "  failed: " << r.error;
    }
    os << '\n';
  }
  return os.str();
}

const AblationRow* AblationReport::find(std::string_view variant, std::size_t queries) const {
  for (const auto& r : rows) {
    if (r.variant == variant && r.queries == queries) return &r;
  }
  return nullptr;
}

AblationReport ablate(const Dataset& dataset, const ModelConfig& base, const TrainConfig& cfg,
                      std::span<const AblationSpec> specs, const AblationCallback& on_row) {
  for (const auto& s : specs) check_variant(base.task, s.variant);
  AblationReport report;
  report.task = base.task;
  for (const auto& s : specs) {
    ModelConfig mc = base;
    mc.variant = s.variant;
    if (s.queries != 0) mc.queries = s.queries;
    QualityModel model(mc);
    const TrainResult res = train(model, dataset, cfg);
    const EpochRecord& last = res.final_test();
    AblationRow row;
    row.variant = variant_name(s.variant);
    row.label = s.label();
    row.queries = s.queries;
    row.srcc = last.srcc;
    row.plcc = last.plcc;
    row.error = last.error;
    if (on_row) on_row(row);
    report.rows.push_back(std::move(row));
  }
  return report;
}

}  // namespace mlqa
