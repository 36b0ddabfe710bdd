#pragma once

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include "liealign/error.hpp"
#include "liealign/feature_map.hpp"

namespace liealign::tools {

inline void write_png_rgb(const std::string& path, int width, int height, const std::vector<std::uint8_t>& rgb) {
  FILE* fp = std::fopen(path.c_str(), "wb");
  if (fp == nullptr) throw Error(ErrorCode::io, "cannot open '" + path + "' for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png != nullptr ? png_create_info_struct(png) : nullptr;
  if (png == nullptr || info == nullptr || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw Error(ErrorCode::io, "libpng failed writing '" + path + "'");
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8, PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < height; ++y) {
    png_write_row(png, const_cast<png_bytep>(rgb.data() + static_cast<std::size_t>(y) * width * 3));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

/// Per-channel min/max of the first three channels over a set of maps.
struct RgbRange {
  double lo[3] = {HUGE_VAL, HUGE_VAL, HUGE_VAL};
  double hi[3] = {-HUGE_VAL, -HUGE_VAL, -HUGE_VAL};
};

inline RgbRange rgb_range(const std::vector<FeatureMap<float>>& maps) {
  RgbRange r;
  for (const auto& m : maps) {
    for (int c = 0; c < 3 && c < m.channels(); ++c) {
      for (float v : m.plane(c)) {
        r.lo[c] = std::min<double>(r.lo[c], v);
        r.hi[c] = std::max<double>(r.hi[c], v);
      }
    }
  }
  return r;
}

/// First three channels as RGB, nearest-neighbour upscaled by `scale`.
inline void write_feature_png(const std::string& path, const FeatureMap<float>& f, const RgbRange& range, int scale) {
  const int w = f.width() * scale, h = f.height() * scale;
  std::vector<std::uint8_t> rgb(static_cast<std::size_t>(w) * h * 3, 0);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < 3 && c < f.channels(); ++c) {
        const double span = range.hi[c] - range.lo[c];
        const double v = span > 0 ? (f(c, y / scale, x / scale) - range.lo[c]) / span : 0.0;
        rgb[(static_cast<std::size_t>(y) * w + x) * 3 + c] =
            static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
      }
    }
  }
  write_png_rgb(path, w, h, rgb);
}

}  // namespace liealign::tools
