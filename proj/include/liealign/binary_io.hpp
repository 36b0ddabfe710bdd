#pragma once

// Little-endian binary primitives shared by the bundle and checkpoint formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "liealign/error.hpp"

namespace liealign::binary {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

class Writer {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u32(std::uint32_t v) { raw(&v, sizeof v); }
  void f32(float v) { raw(&v, sizeof v); }
  void bytes(std::string_view s) { raw(s.data(), s.size()); }
  void f32s(std::span<const float> v) { raw(v.data(), v.size_bytes()); }
  void u8s(std::span<const std::uint8_t> v) { raw(v.data(), v.size()); }

  [[nodiscard]] const std::vector<std::uint8_t>& buffer() const noexcept { return buf_; }

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::io, "cannot open '" + path + "' for writing");
    out.write(reinterpret_cast<const char*>(buf_.data()), static_cast<std::streamsize>(buf_.size()));
    if (!out) throw Error(ErrorCode::io, "write failed for '" + path + "'");
  }

 private:
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }

  std::vector<std::uint8_t> buf_;
};

inline std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::io, "cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Bounds-checked cursor; every read names the section it belongs to so a
/// truncated file reports what is missing.
class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> data) : data_(data) {}

  std::uint8_t u8(const char* section) {
    std::uint8_t v;
    raw(&v, 1, section);
    return v;
  }
  std::uint32_t u32(const char* section) {
    std::uint32_t v;
    raw(&v, sizeof v, section);
    return v;
  }
  float f32(const char* section) {
    float v;
    raw(&v, sizeof v, section);
    return v;
  }
  std::string bytes(std::size_t n, const char* section) {
    std::string s(n, '\0');
    raw(s.data(), n, section);
    return s;
  }
  void f32s(std::span<float> out, const char* section) { raw(out.data(), out.size_bytes(), section); }
  void u8s(std::span<std::uint8_t> out, const char* section) { raw(out.data(), out.size(), section); }

  [[nodiscard]] std::size_t remaining() const noexcept { return data_.size() - pos_; }

 private:
  void raw(void* dst, std::size_t n, const char* section) {
    if (n > remaining()) {
      throw Error(ErrorCode::format, std::string("truncated file: missing ") + section + " (need " +
                                         std::to_string(n) + " bytes, " + std::to_string(remaining()) + " left)");
    }
    std::memcpy(dst, data_.data() + pos_, n);
    pos_ += n;
  }

  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
};

/// 64-bit FNV-1a, used to fingerprint checkpoints.
inline std::uint64_t fnv1a(std::span<const std::uint8_t> bytes) {
  std::uint64_t h = 1469598103934665603ULL;
  for (std::uint8_t b : bytes) {
    h ^= b;
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace liealign::binary
