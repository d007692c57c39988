#ifndef VOLMIL_BINARY_IO_HPP_
#define VOLMIL_BINARY_IO_HPP_

#include "volmil/errors.hpp"
#include "volmil/tensor.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>

namespace volmil {

inline void put_u8(std::string& out, std::uint8_t v) { out.push_back(static_cast<char>(v)); }

template <typename U>
void put_le(std::string& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline void put_f32(std::string& out, float f) { put_le(out, std::bit_cast<std::uint32_t>(f)); }

/// Bounds-checked little-endian reader.
class ByteReader {
 public:
  ByteReader(const std::string& bytes, std::string source) : bytes_(bytes), source_(std::move(source)) {}

  template <typename U>
  U le() {
    need(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i)
      v |= static_cast<U>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += sizeof(U);
    return v;
  }
  float f32() { return std::bit_cast<float>(le<std::uint32_t>()); }
  std::string str(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw IoError("truncated data in " + source_);
  }
  const std::string& bytes_;
  std::string source_;
  std::size_t pos_ = 0;
};

template <typename T>
std::string encode_f32_le(const T* data, Index n) {
  std::string out;
  out.reserve(static_cast<std::size_t>(n) * 4);
  for (Index i = 0; i < n; ++i) put_f32(out, static_cast<float>(data[i]));
  return out;
}

template <typename T>
void decode_f32_le(const std::string& bytes, T* out, Index n, const std::string& source) {
  if (bytes.size() != static_cast<std::size_t>(n) * 4)
    throw IoError(source + ": expected " + std::to_string(n * 4) + " bytes, found " + std::to_string(bytes.size()));
  ByteReader r(bytes, source);
  for (Index i = 0; i < n; ++i) out[i] = static_cast<T>(r.f32());
}

inline void write_binary_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write failed: " + path.string());
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  write_binary_file(path, text);
}

inline std::string read_binary_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

inline std::string read_text_file(const std::filesystem::path& path) { return read_binary_file(path); }

}  // namespace volmil

#endif  // VOLMIL_BINARY_IO_HPP_
