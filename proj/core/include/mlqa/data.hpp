#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mlqa/model.hpp"
#include "mlqa/rng.hpp"
#include "mlqa/tensor.hpp"

namespace mlqa {

enum class Split { kTrain, kTest };

std::string split_name(Split s);
Split parse_split(const std::string& name);

/// One dataset row. `image_ref` is relative to the manifest's directory.
struct SampleRecord {
  std::string image_ref;
  std::vector<std::int32_t> prompt_tokens;
  double mos_quality = 0.0;
  double mos_correspondence = 0.0;
  Split split = Split::kTrain;

  bool operator==(const SampleRecord&) const = default;
};

/// Generation parameters behind a quality label.
struct QualityFactors {
  double sigma = 0.0;     // additive noise level, [0, 0.5]
  int scrambled = 0;      // pixel-scrambled blocks, 0..4
};

/// Generation parameters behind a correspondence label.
struct CorrespondenceFactors {
  int image_class = 0;    // rendered class c
  int prompt_class = 0;   // class named by the prompt
  double weight = 0.0;    // mixing weight w of image_class against the unnamed texture
};

struct SynthConfig {
  std::size_t image_size = 32;
  std::size_t channels = 3;
  /// Pattern classes for the correspondence set (4..6).
  std::size_t classes = 4;
  /// Must match the text encoder: id 0 is pad, 1..classes name a class,
  /// the rest are distractors.
  std::size_t vocab_size = 32;
  std::size_t max_tokens = 16;

  void validate() const;
};

/// Records plus their in-memory images (f32, (C, H, W)). Factors are filled by the
/// generators and empty for datasets loaded from disk.
struct Dataset {
  std::vector<SampleRecord> records;
  std::vector<Tensor> images;
  std::vector<QualityFactors> quality_factors;
  std::vector<CorrespondenceFactors> correspondence_factors;

  std::size_t size() const { return records.size(); }
  std::vector<std::size_t> indices(Split s) const;
  double label(std::size_t i, Task task) const;
};

/// mos_quality = 1 - (sigma/0.5 + k/4)/2, clipped to [0, 1].
double quality_label(double sigma, int scrambled);
/// w when the prompt names the rendered class, else 0.3 * (1 - w).
double correspondence_label(bool prompt_matches, double weight);

/// Gratings corrupted by Gaussian noise (global) and block pixel scrambling (local).
Dataset generate_quality_dataset(std::size_t n, std::uint64_t seed, const SynthConfig& cfg = {});
/// A class pattern mixed with weight w against an unnamed blob texture. Half of
/// the prompts name the rendered class, the rest name a class absent from the image.
Dataset generate_correspondence_dataset(std::size_t n, std::uint64_t seed, const SynthConfig& cfg = {});

/// Renders class `cls` (0..5) as a (H, W) pattern in [-1, 1].
std::vector<float> render_class_pattern(int cls, std::size_t size, Rng& rng);
/// Smooth random blobs in [-1, 1], belonging to no nameable class.
std::vector<float> render_distractor_texture(std::size_t size, Rng& rng);

struct SplitSpec {
  double ratio = 0.8;
  std::uint64_t seed = 0;

  void validate() const;
};

struct SplitIndices {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

/// Seeded shuffle (records ordered by splitmix64 of (seed, index)) then prefix split
/// with round(ratio * n) training records, at least one record on each side.
SplitIndices split(std::size_t n, const SplitSpec& spec);
/// Writes the split membership into every record.
void assign_split(Dataset& dataset, const SplitSpec& spec);

/// Line-delimited JSON manifest plus one MLT1 blob per image under `images/`.
void save_manifest(const Dataset& dataset, const std::filesystem::path& manifest_path);
/// Throws ParseError (with line number) on malformed lines and IntegrityError when
/// an image_ref does not resolve to a readable blob.
Dataset load_manifest(const std::filesystem::path& manifest_path);

}  // namespace mlqa
