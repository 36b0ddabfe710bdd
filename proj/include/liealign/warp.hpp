#pragma once

// Projective warping of feature maps in normalized coordinates.
//
// Pixel centers map to [-1, 1] with the extreme centers at ±1. A grid built
// from transform T samples the input at T·x for every output location x, so
// the aligned map is (F ∘ T)(x) = F(T·x). Reads outside the input are zero.

#include <array>
#include <cmath>
#include <span>
#include <vector>

#include "liealign/error.hpp"
#include "liealign/feature_map.hpp"
#include "liealign/lie.hpp"

namespace liealign {

enum class FlipConfig { identity = 0, horizontal = 1 };

inline constexpr std::array<FlipConfig, 2> kFlipConfigs = {FlipConfig::identity, FlipConfig::horizontal};

inline const char* to_string(FlipConfig k) { return k == FlipConfig::identity ? "identity" : "horizontal"; }

/// Matrix form of a flip, used only when it has to be fused into a chain.
inline Mat3 flip_matrix(FlipConfig k) {
  Mat3 m = Mat3::Identity();
  if (k == FlipConfig::horizontal) m(0, 0) = -1.0;
  return m;
}

struct Point2 {
  double x = 0.0;
  double y = 0.0;
};

inline double to_normalized(double pixel, int extent) {
  return extent > 1 ? 2.0 * pixel / static_cast<double>(extent - 1) - 1.0 : 0.0;
}

inline double to_pixel(double normalized, int extent) {
  return (normalized + 1.0) * static_cast<double>(extent - 1) * 0.5;
}

/// Normalized sampling locations, (x, y) interleaved, one pair per output pixel.
struct SampleGrid {
  int height = 0;
  int width = 0;
  std::vector<double> coords;

  [[nodiscard]] double x(int row, int col) const { return coords[2 * (static_cast<std::size_t>(row) * width + col)]; }
  [[nodiscard]] double y(int row, int col) const {
    return coords[2 * (static_cast<std::size_t>(row) * width + col) + 1];
  }
};

inline constexpr double kMinPerspectiveDepth = 1e-8;

inline SampleGrid make_grid(const Mat3& t, int height, int width) {
  SampleGrid g{height, width, std::vector<double>(2 * static_cast<std::size_t>(height) * width)};
  for (int r = 0; r < height; ++r) {
    const double yn = to_normalized(r, height);
    for (int c = 0; c < width; ++c) {
      const double xn = to_normalized(c, width);
      const double px = t(0, 0) * xn + t(0, 1) * yn + t(0, 2);
      const double py = t(1, 0) * xn + t(1, 1) * yn + t(1, 2);
      const double pz = t(2, 0) * xn + t(2, 1) * yn + t(2, 2);
      if (!(std::abs(pz) >= kMinPerspectiveDepth)) {
        throw Error(ErrorCode::degenerate_grid, "perspective divide by |z| < 1e-8 at pixel (" +
                                                    std::to_string(c) + ", " + std::to_string(r) + ")");
      }
      const std::size_t k = 2 * (static_cast<std::size_t>(r) * width + c);
      g.coords[k] = px / pz;
      g.coords[k + 1] = py / pz;
    }
  }
  return g;
}

inline SampleGrid make_grid(const GroupTransform& t, int height, int width) { return make_grid(t.t, height, width); }

/// Gradient of a loss w.r.t. the grid's generating matrix, given its
/// gradient w.r.t. the grid coordinates.
inline Mat3 grid_backward(const Mat3& t, int height, int width, std::span<const double> d_coords) {
  Mat3 d = Mat3::Zero();
  for (int r = 0; r < height; ++r) {
    const double yn = to_normalized(r, height);
    for (int c = 0; c < width; ++c) {
      const std::size_t k = 2 * (static_cast<std::size_t>(r) * width + c);
      const double gx = d_coords[k];
      const double gy = d_coords[k + 1];
      if (gx == 0.0 && gy == 0.0) continue;
      const double xn = to_normalized(c, width);
      const double px = t(0, 0) * xn + t(0, 1) * yn + t(0, 2);
      const double py = t(1, 0) * xn + t(1, 1) * yn + t(1, 2);
      const double pz = t(2, 0) * xn + t(2, 1) * yn + t(2, 2);
      const double inv_z = 1.0 / pz;
      const double dpx = gx * inv_z;
      const double dpy = gy * inv_z;
      const double dpz = -(gx * px + gy * py) * inv_z * inv_z;
      const Vec3 v(xn, yn, 1.0);
      d.row(0) += dpx * v.transpose();
      d.row(1) += dpy * v.transpose();
      d.row(2) += dpz * v.transpose();
    }
  }
  return d;
}

namespace detail {

// Fractions this close to a pixel center snap onto it, which makes the
// identity grid reproduce its input exactly.
inline constexpr double kSnap = 1e-9;

/// The four bilinear taps of one sampling location; index -1 marks a tap
/// outside the input (zero padding).
struct BilinearTaps {
  std::array<std::ptrdiff_t, 4> index{-1, -1, -1, -1};  // (x0,y0) (x1,y0) (x0,y1) (x1,y1)
  std::array<double, 4> weight{};
  double fx = 0.0;
  double fy = 0.0;
};

inline BilinearTaps bilinear_taps(double gx, double gy, int height, int width) {
  BilinearTaps t;
  const double ix = to_pixel(gx, width);
  const double iy = to_pixel(gy, height);
  double x0f = std::floor(ix);
  double y0f = std::floor(iy);
  double fx = ix - x0f;
  double fy = iy - y0f;
  if (fx < kSnap) {
    fx = 0.0;
  } else if (fx > 1.0 - kSnap) {
    fx = 0.0;
    x0f += 1.0;
  }
  if (fy < kSnap) {
    fy = 0.0;
  } else if (fy > 1.0 - kSnap) {
    fy = 0.0;
    y0f += 1.0;
  }
  t.fx = fx;
  t.fy = fy;
  // Anything this far out touches no pixel; also guards the integer cast.
  if (!(x0f > -2.0 && x0f < width + 1.0 && y0f > -2.0 && y0f < height + 1.0)) return t;
  const int x0 = static_cast<int>(x0f);
  const int y0 = static_cast<int>(y0f);
  const std::array<int, 4> xs{x0, x0 + 1, x0, x0 + 1};
  const std::array<int, 4> ys{y0, y0, y0 + 1, y0 + 1};
  const std::array<double, 4> ws{(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy};
  for (int k = 0; k < 4; ++k) {
    if (xs[k] >= 0 && xs[k] < width && ys[k] >= 0 && ys[k] < height) {
      t.index[k] = static_cast<std::ptrdiff_t>(ys[k]) * width + xs[k];
    }
    t.weight[k] = ws[k];
  }
  return t;
}

template <typename T>
inline double tap_value(std::span<const T> plane, std::ptrdiff_t index) {
  return index < 0 ? 0.0 : static_cast<double>(plane[static_cast<std::size_t>(index)]);
}

}  // namespace detail

/// Bilinear sampling of `f` at every grid location.
template <typename T>
FeatureMap<T> sample(const FeatureMap<T>& f, const SampleGrid& g) {
  FeatureMap<T> out(f.channels(), g.height, g.width);
  const std::size_t n = static_cast<std::size_t>(g.height) * g.width;
  for (std::size_t p = 0; p < n; ++p) {
    const auto taps = detail::bilinear_taps(g.coords[2 * p], g.coords[2 * p + 1], f.height(), f.width());
    for (int c = 0; c < f.channels(); ++c) {
      const auto plane = f.plane(c);
      double v = 0.0;
      for (int k = 0; k < 4; ++k) {
        if (taps.index[k] >= 0 && taps.weight[k] != 0.0) v += taps.weight[k] * detail::tap_value(plane, taps.index[k]);
      }
      out.values()[c * n + p] = static_cast<T>(v);
    }
  }
  return out;
}

/// Backward pass of `sample`. Either output pointer may be null.
/// `d_input` accumulates; `d_coords` is overwritten (size 2·H·W).
template <typename T>
void sample_backward(const FeatureMap<T>& f, const SampleGrid& g, const FeatureMap<T>& d_out,
                     FeatureMap<T>* d_input, std::vector<double>* d_coords) {
  const std::size_t n = static_cast<std::size_t>(g.height) * g.width;
  if (d_out.channels() != f.channels() || d_out.plane_size() != n) {
    throw Error(ErrorCode::shape_mismatch, "sample_backward: upstream gradient shape");
  }
  if (d_input != nullptr) d_input->require_same_shape(f, "sample_backward");
  if (d_coords != nullptr) d_coords->assign(2 * n, 0.0);
  const double sx = 0.5 * (f.width() - 1);
  const double sy = 0.5 * (f.height() - 1);
  for (std::size_t p = 0; p < n; ++p) {
    const auto taps = detail::bilinear_taps(g.coords[2 * p], g.coords[2 * p + 1], f.height(), f.width());
    double gix = 0.0;
    double giy = 0.0;
    for (int c = 0; c < f.channels(); ++c) {
      const double up = static_cast<double>(d_out.values()[c * n + p]);
      if (up == 0.0) continue;
      if (d_input != nullptr) {
        auto plane = d_input->plane(c);
        for (int k = 0; k < 4; ++k) {
          if (taps.index[k] >= 0) plane[static_cast<std::size_t>(taps.index[k])] += static_cast<T>(up * taps.weight[k]);
        }
      }
      if (d_coords != nullptr) {
        const auto plane = f.plane(c);
        const double v00 = detail::tap_value(plane, taps.index[0]);
        const double v10 = detail::tap_value(plane, taps.index[1]);
        const double v01 = detail::tap_value(plane, taps.index[2]);
        const double v11 = detail::tap_value(plane, taps.index[3]);
        gix += up * ((1 - taps.fy) * (v10 - v00) + taps.fy * (v11 - v01));
        giy += up * ((1 - taps.fx) * (v01 - v00) + taps.fx * (v11 - v10));
      }
    }
    if (d_coords != nullptr) {
      (*d_coords)[2 * p] = gix * sx;
      (*d_coords)[2 * p + 1] = giy * sy;
    }
  }
}

template <typename T>
FeatureMap<T> warp(const FeatureMap<T>& f, const Mat3& t) {
  return sample(f, make_grid(t, f.height(), f.width()));
}

template <typename T>
FeatureMap<T> warp(const FeatureMap<T>& f, const GroupTransform& t) {
  return warp(f, t.t);
}

/// Left fold of `compose` over a cascade.
inline GroupTransform compose_all(std::span<const GroupTransform> transforms) {
  if (transforms.empty()) throw Error(ErrorCode::invalid_input, "empty transform cascade");
  GroupTransform acc = transforms.front();
  for (std::size_t k = 1; k < transforms.size(); ++k) acc = compose(acc, transforms[k]);
  return acc;
}

/// Composes the whole cascade first, then interpolates once.
template <typename T>
FeatureMap<T> warp_cascade(const FeatureMap<T>& f, std::span<const GroupTransform> transforms) {
  return warp(f, compose_all(transforms));
}

/// Exact column reversal; no resampling.
template <typename T>
FeatureMap<T> flip(const FeatureMap<T>& f, FlipConfig k) {
  if (k == FlipConfig::identity) return f;
  FeatureMap<T> out(f.channels(), f.height(), f.width());
  for (int c = 0; c < f.channels(); ++c) {
    for (int y = 0; y < f.height(); ++y) {
      for (int x = 0; x < f.width(); ++x) out(c, y, x) = f(c, y, f.width() - 1 - x);
    }
  }
  return out;
}

inline Point2 apply_homography(const Mat3& t, Point2 p) {
  const Vec3 q = t * Vec3(p.x, p.y, 1.0);
  if (!(std::abs(q.z()) >= kMinPerspectiveDepth)) {
    throw Error(ErrorCode::degenerate_grid, "point transfer hit a degenerate perspective divide");
  }
  return {q.x() / q.z(), q.y() / q.z()};
}

/// Maps a pixel location of image i to image j: p_j = t_j · t_i⁻¹ · p_i.
/// Content of image i at q sits at atlas coordinate t_i⁻¹·q under the
/// output-to-input sampling convention.
inline Point2 transfer_point(Point2 p, const Mat3& t_i, const Mat3& t_j, int height, int width) {
  const Point2 n{to_normalized(p.x, width), to_normalized(p.y, height)};
  const Point2 q = apply_homography(t_j * t_i.inverse(), n);
  return {to_pixel(q.x, width), to_pixel(q.y, height)};
}

inline Point2 transfer_point(Point2 p, const GroupTransform& t_i, const GroupTransform& t_j, int height, int width) {
  return transfer_point(p, t_i.t, t_j.t, height, width);
}

}  // namespace liealign
