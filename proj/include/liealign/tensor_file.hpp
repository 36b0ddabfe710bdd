#pragma once

// Named-tensor table ("SJWT"): magic, version u32, tensor count u32, then per
// tensor: name length u32, name bytes, rank u32, dims u32[rank], float32
// payload. Little-endian throughout.

#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "liealign/binary_io.hpp"
#include "liealign/error.hpp"

namespace liealign {

inline constexpr char kTensorMagic[4] = {'S', 'J', 'W', 'T'};
inline constexpr std::uint32_t kTensorVersion = 1;

struct NamedTensor {
  std::string name;
  std::vector<std::uint32_t> dims;
  std::vector<float> values;

  [[nodiscard]] std::size_t element_count() const {
    return std::accumulate(dims.begin(), dims.end(), std::size_t{1},
                           [](std::size_t a, std::uint32_t b) { return a * b; });
  }
};

inline std::vector<std::uint8_t> encode_tensors(std::span<const NamedTensor> tensors) {
  binary::Writer w;
  w.bytes(std::string_view(kTensorMagic, 4));
  w.u32(kTensorVersion);
  w.u32(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    if (t.values.size() != t.element_count()) {
      throw Error(ErrorCode::shape_mismatch, "tensor '" + t.name + "' payload does not match its dims");
    }
    w.u32(static_cast<std::uint32_t>(t.name.size()));
    w.bytes(t.name);
    w.u32(static_cast<std::uint32_t>(t.dims.size()));
    for (auto d : t.dims) w.u32(d);
    w.f32s(t.values);
  }
  return w.buffer();
}

inline void write_tensor_file(const std::string& path, std::span<const NamedTensor> tensors) {
  binary::Writer w;
  w.u8s(encode_tensors(tensors));
  w.save(path);
}

inline std::vector<NamedTensor> decode_tensors(std::span<const std::uint8_t> bytes) {
  binary::Reader r(bytes);
  if (r.bytes(4, "magic") != std::string_view(kTensorMagic, 4)) {
    throw Error(ErrorCode::format, "bad magic: not a tensor file (expected SJWT)");
  }
  if (const auto v = r.u32("version"); v != kTensorVersion) {
    throw Error(ErrorCode::format, "unsupported tensor file version " + std::to_string(v));
  }
  const std::uint32_t count = r.u32("tensor count");
  std::vector<NamedTensor> out;
  out.reserve(count);
  for (std::uint32_t k = 0; k < count; ++k) {
    NamedTensor t;
    t.name = r.bytes(r.u32("tensor name length"), "tensor name");
    const std::uint32_t rank = r.u32("tensor rank");
    if (rank > 8) throw Error(ErrorCode::format, "tensor '" + t.name + "' has implausible rank");
    for (std::uint32_t d = 0; d < rank; ++d) t.dims.push_back(r.u32("tensor dims"));
    t.values.resize(t.element_count());
    r.f32s(t.values, "tensor payload");
    out.push_back(std::move(t));
  }
  return out;
}

inline std::vector<NamedTensor> read_tensor_file(const std::string& path) {
  const auto bytes = binary::read_file(path);
  return decode_tensors(bytes);
}

inline const NamedTensor& find_tensor(std::span<const NamedTensor> tensors, const std::string& name) {
  for (const auto& t : tensors) {
    if (t.name == name) return t;
  }
  throw Error(ErrorCode::format, "tensor '" + name + "' missing from file");
}

inline bool has_tensor(std::span<const NamedTensor> tensors, const std::string& name) {
  for (const auto& t : tensors) {
    if (t.name == name) return true;
  }
  return false;
}

}  // namespace liealign
