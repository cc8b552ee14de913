#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include "mlqa/data.hpp"
#include "mlqa/model.hpp"
#include "mlqa/training.hpp"

namespace mlqa {

/// Everything a run needs, resolved from one flat JSON object. All randomness
/// derives from `seed` through labeled sub-seeds.
struct RunConfig {
  std::uint64_t seed = 0;
  ModelConfig model;
  TrainConfig train;
  SynthConfig synth;
  SplitSpec split;
  std::size_t samples = 800;

  /// Sub-seeds for each consumer, derived from `seed`.
  std::uint64_t model_seed() const;
  std::uint64_t train_seed() const;
  std::uint64_t data_seed() const;
  std::uint64_t split_seed() const;

  /// Copies the derived sub-seeds into the nested configs and checks every value.
  RunConfig& resolve();
  void validate() const;
};

/// Parses a flat JSON object; keys not listed in the README throw ConfigError,
/// as do wrongly typed values. Missing keys keep their defaults.
RunConfig parse_run_config(std::string_view json_text);
RunConfig load_run_config(const std::filesystem::path& path);
/// Overrides individual keys of `cfg` from another flat JSON object.
void apply_overrides(RunConfig& cfg, std::string_view json_text);
/// Pretty-printed JSON of every key, suitable for parse_run_config.
std::string to_json(const RunConfig& cfg);

}  // namespace mlqa
