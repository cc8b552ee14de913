#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include "mlqa/tensor.hpp"

namespace mlqa {

/// Little-endian byte sink used by the blob and checkpoint writers.
class ByteWriter {
 public:
  void u8(std::uint8_t v) { out_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void bytes(std::string_view s) { out_.append(s); }
  /// Raw scalars of `t` in row-major order.
  void scalars(const Tensor& t);

  const std::string& str() const { return out_; }
  std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

/// Bounds-checked little-endian reader; throws ParseError on truncation.
class ByteReader {
 public:
  explicit ByteReader(std::string_view data) : data_(data) {}

  std::uint8_t u8();
  std::uint32_t u32();
  std::uint64_t u64();
  std::string_view bytes(std::size_t n);
  Tensor scalars(const Shape& shape, DType dtype);

  std::size_t remaining() const { return data_.size() - pos_; }
  std::size_t position() const { return pos_; }

 private:
  void need(std::size_t n) const;

  std::string_view data_;
  std::size_t pos_ = 0;
};

/// Tensor blob: "MLT1", u8 dtype code (0 = f32, 1 = f64), u8 rank,
/// rank x u32 extents, raw scalars. All integers and scalars little-endian.
std::string encode_blob(const Tensor& t);
Tensor decode_blob(std::string_view bytes);

void save_blob(const std::filesystem::path& path, const Tensor& t);
Tensor load_blob(const std::filesystem::path& path);

std::string read_file(const std::filesystem::path& path);
/// Writes via a temporary sibling then renames, so readers never see partial files.
void write_file(const std::filesystem::path& path, std::string_view bytes);

}  // namespace mlqa
