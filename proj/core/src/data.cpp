#include "mlqa/data.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <nlohmann/json.hpp>
#include <numbers>
#include <numeric>
#include <sstream>

#include "mlqa/blob_io.hpp"
#include "mlqa/errors.hpp"

namespace mlqa {

namespace {

constexpr double kMaxSigma = 0.5;
constexpr int kMaxScrambled = 4;
constexpr std::size_t kBlockGrid = 4;  // 4 x 4 grid of scramble blocks
constexpr std::size_t kMaxClasses = 6;
constexpr double kCorrespondenceNoise = 0.05;
constexpr double kClassCycles = 3.0;
constexpr double kDistractorAmplitude = 0.5;
constexpr double kInvSqrt2 = 0.70710678118654752440;

void check_n(std::size_t n) {
  if (n < 10) throw InputError("dataset generation needs n >= 10, got " + std::to_string(n));
}

std::string image_ref_for(std::size_t i) {
  std::ostringstream os;
  os << "images/" << std::setw(6) << std::setfill('0') << i << ".mlt1";
  return os.str();
}

std::vector<double> channel_gains(Rng& rng, std::size_t channels) {
  std::vector<double> g(channels);
  for (auto& v : g) v = rng.uniform(0.6, 1.0);
  return g;
}

}  // namespace

std::string split_name(Split s) { return s == Split::kTrain ? "train" : "test"; }

Split parse_split(const std::string& name) {
  if (name == "train") return Split::kTrain;
  if (name == "test") return Split::kTest;
  throw InputError("unknown split '" + name + "'");
}

void SynthConfig::validate() const {
  if (image_size == 0 || image_size % kBlockGrid != 0) {
    throw ConfigError("synth: image_size must be a positive multiple of 4");
  }
  if (channels == 0) throw ConfigError("synth: channels must be positive");
  if (classes < 4 || classes > kMaxClasses) throw ConfigError("synth: classes must be in [4, 6]");
  if (vocab_size < classes + 2) throw ConfigError("synth: vocab_size must exceed classes + 1");
  if (max_tokens < 3) throw ConfigError("synth: max_tokens must be at least 3");
}

std::vector<std::size_t> Dataset::indices(Split s) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < records.size(); ++i) {
    if (records[i].split == s) out.push_back(i);
  }
  return out;
}

double Dataset::label(std::size_t i, Task task) const {
  return task == Task::kPerceptualQuality ? records[i].mos_quality : records[i].mos_correspondence;
}

double quality_label(double sigma, int scrambled) {
  const double v = 1.0 - (sigma / kMaxSigma + static_cast<double>(scrambled) / kMaxScrambled) / 2.0;
  return std::clamp(v, 0.0, 1.0);
}

double correspondence_label(bool prompt_matches, double weight) {
  return prompt_matches ? weight : (1.0 - weight) * 0.3;
}

// --------------------------------------------------------------------------- quality

Dataset generate_quality_dataset(std::size_t n, std::uint64_t seed, const SynthConfig& cfg) {
  check_n(n);
  cfg.validate();
  const std::size_t s = cfg.image_size;
  const std::size_t block = s / kBlockGrid;
  Dataset ds;
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng(derive_seed(seed, "quality", i));
    // Clean image: two oriented gratings, amplitude 1 and 0.5, normalized to [-1, 1].
    std::vector<double> pattern(s * s, 0.0);
    const double amps[2] = {1.0, 0.5};
    for (double amp : amps) {
      const double theta = rng.uniform(0.0, std::numbers::pi);
      const double freq = rng.uniform(1.5, 4.0);
      const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
      const double cx = std::cos(theta), cy = std::sin(theta);
      for (std::size_t y = 0; y < s; ++y) {
        for (std::size_t x = 0; x < s; ++x) {
          const double u = (static_cast<double>(x) * cx + static_cast<double>(y) * cy) / static_cast<double>(s);
          pattern[y * s + x] += amp * std::sin(2.0 * std::numbers::pi * freq * u + phase) / 1.5;
        }
      }
    }
    // Local corruption: shuffle the pixels inside k distinct blocks.
    const int k = static_cast<int>(rng.below(kMaxScrambled + 1));
    std::vector<std::size_t> blocks(kBlockGrid * kBlockGrid);
    std::iota(blocks.begin(), blocks.end(), 0);
    for (std::size_t j = 0; j < static_cast<std::size_t>(k); ++j) {
      std::swap(blocks[j], blocks[j + rng.below(blocks.size() - j)]);
    }
    // Pixel-position permutation per scrambled block, shared across channels.
    std::vector<std::size_t> source(s * s);
    std::iota(source.begin(), source.end(), 0);
    for (std::size_t j = 0; j < static_cast<std::size_t>(k); ++j) {
      const std::size_t by = blocks[j] / kBlockGrid, bx = blocks[j] % kBlockGrid;
      std::vector<std::size_t> cells;
      for (std::size_t y = 0; y < block; ++y) {
        for (std::size_t x = 0; x < block; ++x) cells.push_back((by * block + y) * s + bx * block + x);
      }
      std::vector<std::size_t> perm = cells;
      for (std::size_t t = perm.size(); t > 1; --t) std::swap(perm[t - 1], perm[rng.below(t)]);
      for (std::size_t t = 0; t < cells.size(); ++t) source[cells[t]] = perm[t];
    }
    const double sigma = rng.uniform(0.0, kMaxSigma);
    const auto gains = channel_gains(rng, cfg.channels);

    std::vector<float> pixels(cfg.channels * s * s);
    for (std::size_t c = 0; c < cfg.channels; ++c) {
      for (std::size_t p = 0; p < s * s; ++p) {
        pixels[c * s * s + p] = static_cast<float>(gains[c] * pattern[source[p]] + sigma * rng.normal());
      }
    }

    SampleRecord rec;
    rec.image_ref = image_ref_for(i);
    rec.mos_quality = quality_label(sigma, k);
    rec.mos_correspondence = 0.0;
    ds.records.push_back(std::move(rec));
    ds.images.push_back(Tensor::from_buffer<float>({cfg.channels, s, s}, std::move(pixels)));
    ds.quality_factors.push_back({sigma, k});
  }
  return ds;
}

// --------------------------------------------------------------------------- correspondence

std::vector<float> render_class_pattern(int cls, std::size_t size, Rng& rng) {
  const double s = static_cast<double>(size);
  const double freq = kClassCycles;
  const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double phase2 = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double cx = rng.uniform(0.35, 0.65) * s, cy = rng.uniform(0.35, 0.65) * s;
  const double w = 2.0 * std::numbers::pi * freq / s;
  std::vector<float> out(size * size);
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      const double fx = static_cast<double>(x), fy = static_cast<double>(y);
      double v = 0.0;
      switch (cls) {
        case 0: v = std::sin(w * fy + phase); break;                                  // horizontal stripes
        case 1: v = std::sin(w * fx + phase); break;                                  // vertical stripes
        case 2: v = std::sin(w * fx + phase) * std::sin(w * fy + phase2); break;      // checkerboard
        case 3: v = std::sin(w * std::hypot(fx - cx, fy - cy) + phase); break;        // rings
        case 4: v = std::sin(w * (fx + fy) * kInvSqrt2 + phase); break;  // diagonal
        default: v = std::sin(w * (fx - fy) * kInvSqrt2 + phase); break; // anti-diagonal
      }
      out[y * size + x] = static_cast<float>(v);
    }
  }
  return out;
}

std::vector<float> render_distractor_texture(std::size_t size, Rng& rng) {
  const double s = static_cast<double>(size);
  std::vector<double> acc(size * size, 0.0);
  for (int blob = 0; blob < 6; ++blob) {
    const double bx = rng.uniform(0.0, s), by = rng.uniform(0.0, s);
    const double radius = rng.uniform(0.12, 0.3) * s;
    const double sign = rng.below(2) == 0 ? 1.0 : -1.0;
    for (std::size_t y = 0; y < size; ++y) {
      for (std::size_t x = 0; x < size; ++x) {
        const double dx = static_cast<double>(x) - bx, dy = static_cast<double>(y) - by;
        acc[y * size + x] += sign * std::exp(-(dx * dx + dy * dy) / (2.0 * radius * radius));
      }
    }
  }
  double peak = 1e-12;
  for (double v : acc) peak = std::max(peak, std::abs(v));
  std::vector<float> out(size * size);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(acc[i] / peak);
  return out;
}

Dataset generate_correspondence_dataset(std::size_t n, std::uint64_t seed, const SynthConfig& cfg) {
  check_n(n);
  cfg.validate();
  const std::size_t s = cfg.image_size;
  const auto classes = static_cast<std::uint64_t>(cfg.classes);
  const auto first_distractor = static_cast<std::int32_t>(cfg.classes + 1);
  const auto distractors = static_cast<std::uint64_t>(cfg.vocab_size) - classes - 1;
  const std::size_t max_len = std::max<std::size_t>(3, cfg.max_tokens / 2);
  Dataset ds;
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng(derive_seed(seed, "correspondence", i));
    const int c = static_cast<int>(rng.below(classes));
    const double w = rng.uniform();
    const bool match = rng.below(2) == 0;
    int target = c;
    if (!match) {
      target = static_cast<int>(rng.below(classes - 1));
      if (target >= c) ++target;
    }

    const auto a = render_class_pattern(c, s, rng);
    const auto b = render_distractor_texture(s, rng);
    const auto gains = channel_gains(rng, cfg.channels);
    std::vector<float> pixels(cfg.channels * s * s);
    for (std::size_t ch = 0; ch < cfg.channels; ++ch) {
      for (std::size_t p = 0; p < s * s; ++p) {
        const double mix = w * a[p] + (1.0 - w) * kDistractorAmplitude * b[p];
        pixels[ch * s * s + p] = static_cast<float>(gains[ch] * mix + kCorrespondenceNoise * rng.normal());
      }
    }

    const std::size_t len = 3 + rng.below(max_len - 2);
    std::vector<std::int32_t> prompt(len);
    for (auto& t : prompt) t = first_distractor + static_cast<std::int32_t>(rng.below(distractors));
    prompt[rng.below(len)] = static_cast<std::int32_t>(target + 1);

    SampleRecord rec;
    rec.image_ref = image_ref_for(i);
    rec.prompt_tokens = std::move(prompt);
    rec.mos_quality = 0.0;
    rec.mos_correspondence = correspondence_label(match, w);
    ds.records.push_back(std::move(rec));
    ds.images.push_back(Tensor::from_buffer<float>({cfg.channels, s, s}, std::move(pixels)));
    ds.correspondence_factors.push_back({c, target, w});
  }
  return ds;
}

// --------------------------------------------------------------------------- split

void SplitSpec::validate() const {
  if (!(ratio > 0.0 && ratio < 1.0)) throw ConfigError("split ratio must lie in (0, 1)");
}

SplitIndices split(std::size_t n, const SplitSpec& spec) {
  spec.validate();
  if (n == 0) throw InputError("split: empty dataset");
  const std::uint64_t base = derive_seed(spec.seed, "split");
  std::vector<std::pair<std::uint64_t, std::size_t>> keyed(n);
  for (std::size_t i = 0; i < n; ++i) {
    keyed[i] = {splitmix64_mix(base + 0x9E3779B97F4A7C15ULL * (i + 1)), i};
  }
  std::sort(keyed.begin(), keyed.end());
  std::size_t n_train = static_cast<std::size_t>(std::llround(spec.ratio * static_cast<double>(n)));
  if (n >= 2) n_train = std::clamp<std::size_t>(n_train, 1, n - 1);
  SplitIndices out;
  for (std::size_t j = 0; j < n; ++j) (j < n_train ? out.train : out.test).push_back(keyed[j].second);
  std::sort(out.train.begin(), out.train.end());
  std::sort(out.test.begin(), out.test.end());
  return out;
}

void assign_split(Dataset& dataset, const SplitSpec& spec) {
  const auto s = split(dataset.size(), spec);
  for (auto i : s.train) dataset.records[i].split = Split::kTrain;
  for (auto i : s.test) dataset.records[i].split = Split::kTest;
}

// --------------------------------------------------------------------------- manifest

void save_manifest(const Dataset& dataset, const std::filesystem::path& manifest_path) {
  if (dataset.images.size() != dataset.records.size()) {
    throw ContractError("save_manifest: image count does not match record count");
  }
  const auto root = manifest_path.parent_path();
  std::string text;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const auto& r = dataset.records[i];
    nlohmann::ordered_json j;
    j["image_ref"] = r.image_ref;
    j["prompt_tokens"] = r.prompt_tokens;
    j["mos_quality"] = r.mos_quality;
    j["mos_correspondence"] = r.mos_correspondence;
    j["split"] = split_name(r.split);
    text += j.dump();
    text += '\n';
    save_blob(root / r.image_ref, dataset.images[i]);
  }
  write_file(manifest_path, text);
}

namespace {

SampleRecord parse_record(const std::string& line, std::size_t line_no) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("malformed record: ") + e.what(), line_no);
  }
  if (!j.is_object()) throw ParseError("record is not a JSON object", line_no);
  SampleRecord r;
  try {
    r.image_ref = j.at("image_ref").get<std::string>();
    r.prompt_tokens = j.at("prompt_tokens").get<std::vector<std::int32_t>>();
    r.mos_quality = j.at("mos_quality").get<double>();
    r.mos_correspondence = j.at("mos_correspondence").get<double>();
    r.split = parse_split(j.at("split").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("bad field: ") + e.what(), line_no);
  } catch (const InputError& e) {
    throw ParseError(e.what(), line_no);
  }
  for (double v : {r.mos_quality, r.mos_correspondence}) {
    if (!(v >= 0.0 && v <= 1.0)) throw ParseError("label outside [0, 1]", line_no);
  }
  if (r.image_ref.empty()) throw ParseError("empty image_ref", line_no);
  return r;
}

}  // namespace

Dataset load_manifest(const std::filesystem::path& manifest_path) {
  const std::string text = read_file(manifest_path);
  const auto root = manifest_path.parent_path();
  Dataset ds;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    const std::size_t end = text.find('\n', pos);
    const bool terminated = end != std::string::npos;
    std::string line = text.substr(pos, terminated ? end - pos : std::string::npos);
    pos = terminated ? end + 1 : text.size();
    ++line_no;
    if (line.empty() && terminated) continue;
    ds.records.push_back(parse_record(line, line_no));
  }
  for (const auto& r : ds.records) {
    const auto path = root / r.image_ref;
    if (!std::filesystem::is_regular_file(path)) {
      throw IntegrityError("manifest references missing image blob " + path.string());
    }
    try {
      ds.images.push_back(load_blob(path));
    } catch (const ParseError& e) {
      throw IntegrityError("image blob " + path.string() + " is unreadable: " + e.what());
    }
  }
  return ds;
}

}  // namespace mlqa
