#pragma once

#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "mlqa/rng.hpp"
#include "mlqa/tensor.hpp"

namespace mlqa::test {

inline Tensor random_f64(Rng& rng, Shape shape, bool requires_grad = true, double scale = 1.0) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = scale * rng.normal();
  return Tensor::from_values(std::move(shape), v, DType::kF64, requires_grad);
}

/// Fresh empty directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() /
            ("mlqa_" + tag + "_" + std::to_string(std::random_device{}()));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace mlqa::test
