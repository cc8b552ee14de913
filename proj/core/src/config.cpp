#include "mlqa/config.hpp"

#include <functional>
#include <nlohmann/json.hpp>
#include <map>

#include "mlqa/blob_io.hpp"
#include "mlqa/errors.hpp"
#include "mlqa/rng.hpp"

namespace mlqa {

namespace {

using Json = nlohmann::ordered_json;

struct Field {
  std::function<void(RunConfig&, const Json&)> set;
  std::function<Json(const RunConfig&)> get;
};

template <class T>
T typed(const Json& v, const std::string& key) {
  try {
    if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError("");
    } else if constexpr (std::is_same_v<T, double>) {
      if (!v.is_number()) throw ConfigError("");
    } else if constexpr (std::is_unsigned_v<T>) {
      if (!v.is_number_unsigned()) throw ConfigError("");
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw ConfigError("");
    }
    return v.get<T>();
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "' has the wrong type: " + v.dump());
  }
}

#define MLQA_FIELD(key, type, member)                                                   \
  {                                                                                     \
    key, Field {                                                                        \
      [](RunConfig& c, const Json& v) { c.member = typed<type>(v, key); },              \
          [](const RunConfig& c) { return Json(c.member); }                             \
    }                                                                                   \
  }

const std::map<std::string, Field>& fields() {
  static const std::map<std::string, Field> table = {
      {"task", {[](RunConfig& c, const Json& v) { c.model.task = parse_task(typed<std::string>(v, "task")); },
                [](const RunConfig& c) { return Json(task_name(c.model.task)); }}},
      {"variant",
       {[](RunConfig& c, const Json& v) { c.model.variant = parse_variant(typed<std::string>(v, "variant")); },
        [](const RunConfig& c) { return Json(variant_name(c.model.variant)); }}},
      {"dtype", {[](RunConfig& c, const Json& v) { c.model.dtype = parse_dtype(typed<std::string>(v, "dtype")); },
                 [](const RunConfig& c) { return Json(dtype_name(c.model.dtype)); }}},
      MLQA_FIELD("seed", std::uint64_t, seed),
      MLQA_FIELD("samples", std::size_t, samples),
      MLQA_FIELD("split_ratio", double, split.ratio),
      {"image_size", {[](RunConfig& c, const Json& v) {
                        c.model.image.image_size = c.synth.image_size = typed<std::size_t>(v, "image_size");
                      },
                      [](const RunConfig& c) { return Json(c.model.image.image_size); }}},
      MLQA_FIELD("patch_size", std::size_t, model.image.patch_size),
      {"channels", {[](RunConfig& c, const Json& v) {
                      c.model.image.channels = c.model.cnn.channels = c.synth.channels =
                          typed<std::size_t>(v, "channels");
                    },
                    [](const RunConfig& c) { return Json(c.model.image.channels); }}},
      MLQA_FIELD("vit_depth", std::size_t, model.image.depth),
      MLQA_FIELD("dim", std::size_t, model.image.dim),
      MLQA_FIELD("vit_heads", std::size_t, model.image.heads),
      {"taps", {[](RunConfig& c, const Json& v) {
                  if (!v.is_array() || v.size() != kLevels) {
                    throw ConfigError("config key 'taps' must be an array of 4 layer indices");
                  }
                  for (std::size_t i = 0; i < kLevels; ++i) c.model.image.taps[i] = typed<std::size_t>(v[i], "taps");
                },
                [](const RunConfig& c) {
                  Json a = Json::array();
                  for (auto t : c.model.image.taps) a.push_back(t);
                  return a;
                }}},
      MLQA_FIELD("cnn_base_channels", std::size_t, model.cnn.base_channels),
      {"vocab_size", {[](RunConfig& c, const Json& v) {
                        c.model.text.vocab_size = c.synth.vocab_size = typed<std::size_t>(v, "vocab_size");
                      },
                      [](const RunConfig& c) { return Json(c.model.text.vocab_size); }}},
      {"max_tokens", {[](RunConfig& c, const Json& v) {
                        c.model.text.max_tokens = c.synth.max_tokens = typed<std::size_t>(v, "max_tokens");
                      },
                      [](const RunConfig& c) { return Json(c.model.text.max_tokens); }}},
      MLQA_FIELD("text_dim", std::size_t, model.text.dim),
      MLQA_FIELD("text_depth", std::size_t, model.text.depth),
      MLQA_FIELD("text_heads", std::size_t, model.text.heads),
      MLQA_FIELD("queries", std::size_t, model.queries),
      MLQA_FIELD("fusion_heads", std::size_t, model.fusion_heads),
      MLQA_FIELD("head_hidden", std::size_t, model.head_hidden),
      MLQA_FIELD("classes", std::size_t, synth.classes),
      MLQA_FIELD("epochs", std::size_t, train.epochs),
      MLQA_FIELD("batch_size", std::size_t, train.batch_size),
      MLQA_FIELD("eval_batch_size", std::size_t, train.eval_batch_size),
      MLQA_FIELD("learning_rate", double, train.learning_rate),
      MLQA_FIELD("weight_decay", double, train.weight_decay),
      MLQA_FIELD("beta1", double, train.beta1),
      MLQA_FIELD("beta2", double, train.beta2),
      MLQA_FIELD("eps", double, train.eps),
  };
  return table;
}

#undef MLQA_FIELD

Json parse_object(std::string_view text) {
  Json j;
  try {
    j = Json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  return j;
}

}  // namespace

std::uint64_t RunConfig::model_seed() const { return derive_seed(seed, "model"); }
std::uint64_t RunConfig::train_seed() const { return derive_seed(seed, "train"); }
std::uint64_t RunConfig::data_seed() const { return derive_seed(seed, "data"); }
std::uint64_t RunConfig::split_seed() const { return derive_seed(seed, "split"); }

RunConfig& RunConfig::resolve() {
  model.seed = model_seed();
  train.seed = train_seed();
  split.seed = split_seed();
  validate();
  return *this;
}

void RunConfig::validate() const {
  if (samples < 10) throw ConfigError("samples must be at least 10");
  model.validate();
  train.validate();
  synth.validate();
  split.validate();
  if (synth.image_size != model.image.image_size || synth.channels != model.image.channels ||
      synth.vocab_size != model.text.vocab_size || synth.max_tokens != model.text.max_tokens) {
    throw ConfigError("synthetic data and model disagree on image or prompt geometry");
  }
}

void apply_overrides(RunConfig& cfg, std::string_view json_text) {
  const Json j = parse_object(json_text);
  const auto& table = fields();
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!table.contains(it.key())) throw ConfigError("unknown config key '" + it.key() + "'");
  }
  // Depth first so that default taps can follow it when taps are not given.
  if (j.contains("vit_depth")) {
    table.at("vit_depth").set(cfg, j.at("vit_depth"));
    if (!j.contains("taps")) cfg.model.image.taps = ImageEncoderConfig::default_taps(cfg.model.image.depth);
  }
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (it.key() != "vit_depth") table.at(it.key()).set(cfg, it.value());
  }
}

RunConfig parse_run_config(std::string_view json_text) {
  RunConfig cfg;
  apply_overrides(cfg, json_text);
  return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) { return parse_run_config(read_file(path)); }

std::string to_json(const RunConfig& cfg) {
  Json j = Json::object();
  for (const auto& [key, field] : fields()) j[key] = field.get(cfg);
  return j.dump(2) + "\n";
}

}  // namespace mlqa
