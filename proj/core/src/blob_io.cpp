#include "mlqa/blob_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "mlqa/errors.hpp"

namespace mlqa {

namespace {
constexpr std::string_view kBlobMagic = "MLT1";
}  // namespace

void ByteWriter::u32(std::uint32_t v) {
  for (int i = 0; i < 4; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
}

void ByteWriter::u64(std::uint64_t v) {
  for (int i = 0; i < 8; ++i) u8(static_cast<std::uint8_t>(v >> (8 * i)));
}

void ByteWriter::scalars(const Tensor& t) {
  dispatch(t.dtype(), [&]<class T>() {
    for (T v : t.data<T>()) {
      if constexpr (sizeof(T) == 4) {
        u32(std::bit_cast<std::uint32_t>(v));
      } else {
        u64(std::bit_cast<std::uint64_t>(v));
      }
    }
  });
}

void ByteReader::need(std::size_t n) const {
  if (remaining() < n) {
    throw ParseError("truncated input: need " + std::to_string(n) + " bytes at offset " +
                     std::to_string(pos_) + ", have " + std::to_string(remaining()));
  }
}

std::uint8_t ByteReader::u8() {
  need(1);
  return static_cast<std::uint8_t>(data_[pos_++]);
}

std::uint32_t ByteReader::u32() {
  need(4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= std::uint32_t{static_cast<std::uint8_t>(data_[pos_++])} << (8 * i);
  return v;
}

std::uint64_t ByteReader::u64() {
  need(8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= std::uint64_t{static_cast<std::uint8_t>(data_[pos_++])} << (8 * i);
  return v;
}

std::string_view ByteReader::bytes(std::size_t n) {
  need(n);
  auto s = data_.substr(pos_, n);
  pos_ += n;
  return s;
}

Tensor ByteReader::scalars(const Shape& shape, DType dtype) {
  const std::size_t n = numel(shape);
  return dispatch(dtype, [&]<class T>() {
    need(n * sizeof(T));
    std::vector<T> values(n);
    for (auto& v : values) {
      if constexpr (sizeof(T) == 4) {
        v = std::bit_cast<T>(u32());
      } else {
        v = std::bit_cast<T>(u64());
      }
    }
    return Tensor::from_buffer<T>(shape, std::move(values));
  });
}

std::string encode_blob(const Tensor& t) {
  ByteWriter w;
  w.bytes(kBlobMagic);
  w.u8(static_cast<std::uint8_t>(t.dtype()));
  w.u8(static_cast<std::uint8_t>(t.rank()));
  for (auto e : t.shape()) w.u32(static_cast<std::uint32_t>(e));
  w.scalars(t);
  return w.take();
}

Tensor decode_blob(std::string_view bytes) {
  ByteReader r(bytes);
  if (r.bytes(4) != kBlobMagic) throw ParseError("blob: bad magic (expected MLT1)");
  const std::uint8_t code = r.u8();
  if (code > 1) throw ParseError("blob: unknown dtype code " + std::to_string(code));
  const std::uint8_t rank = r.u8();
  Shape shape(rank);
  for (auto& e : shape) {
    e = r.u32();
    if (e == 0) throw ParseError("blob: zero extent");
  }
  Tensor t = r.scalars(shape, static_cast<DType>(code));
  if (r.remaining() != 0) throw ParseError("blob: " + std::to_string(r.remaining()) + " trailing bytes");
  return t;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw IoError("read failed: " + path.string());
  return ss.str();
}

void write_file(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
    if (ec) throw IoError("cannot create directory " + path.parent_path().string() + ": " + ec.message());
  }
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed: " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + " -> " + path.string() + ": " + ec.message());
}

void save_blob(const std::filesystem::path& path, const Tensor& t) { write_file(path, encode_blob(t)); }

Tensor load_blob(const std::filesystem::path& path) { return decode_blob(read_file(path)); }

}  // namespace mlqa
