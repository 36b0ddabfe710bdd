#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "liealign/error.hpp"

namespace liealign {

/// Dense C×H×W array, channel-major (C-order).
template <typename T>
class FeatureMap {
 public:
  using value_type = T;

  FeatureMap() = default;
  FeatureMap(int channels, int height, int width, T fill = T(0))
      : channels_(channels), height_(height), width_(width),
        data_(static_cast<std::size_t>(channels) * height * width, fill) {
    if (channels < 0 || height < 0 || width < 0) {
      throw Error(ErrorCode::shape_mismatch, "negative feature map extent");
    }
  }

  [[nodiscard]] int channels() const noexcept { return channels_; }
  [[nodiscard]] int height() const noexcept { return height_; }
  [[nodiscard]] int width() const noexcept { return width_; }
  [[nodiscard]] std::size_t plane_size() const noexcept {
    return static_cast<std::size_t>(height_) * width_;
  }
  [[nodiscard]] std::size_t size() const noexcept { return data_.size(); }
  [[nodiscard]] bool empty() const noexcept { return data_.empty(); }

  [[nodiscard]] T& operator()(int c, int y, int x) {
    return data_[(static_cast<std::size_t>(c) * height_ + y) * width_ + x];
  }
  [[nodiscard]] const T& operator()(int c, int y, int x) const {
    return data_[(static_cast<std::size_t>(c) * height_ + y) * width_ + x];
  }

  [[nodiscard]] std::span<T> plane(int c) { return {data_.data() + c * plane_size(), plane_size()}; }
  [[nodiscard]] std::span<const T> plane(int c) const {
    return {data_.data() + c * plane_size(), plane_size()};
  }

  [[nodiscard]] std::vector<T>& values() noexcept { return data_; }
  [[nodiscard]] const std::vector<T>& values() const noexcept { return data_; }
  [[nodiscard]] T* data() noexcept { return data_.data(); }
  [[nodiscard]] const T* data() const noexcept { return data_.data(); }

  [[nodiscard]] bool same_shape(const FeatureMap& o) const noexcept {
    return channels_ == o.channels_ && height_ == o.height_ && width_ == o.width_;
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  FeatureMap& operator+=(const FeatureMap& o) {
    require_same_shape(o, "operator+=");
    for (std::size_t k = 0; k < data_.size(); ++k) data_[k] += o.data_[k];
    return *this;
  }

  FeatureMap& operator*=(T s) {
    for (auto& v : data_) v *= s;
    return *this;
  }

  [[nodiscard]] bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  void require_same_shape(const FeatureMap& o, const char* where) const {
    if (!same_shape(o)) {
      throw Error(ErrorCode::shape_mismatch, std::string(where) + ": shape " + shape_string() + " vs " +
                                                 o.shape_string());
    }
  }

  [[nodiscard]] std::string shape_string() const {
    return std::to_string(channels_) + "x" + std::to_string(height_) + "x" + std::to_string(width_);
  }

  template <typename U>
  [[nodiscard]] FeatureMap<U> cast() const {
    FeatureMap<U> out(channels_, height_, width_);
    std::transform(data_.begin(), data_.end(), out.values().begin(), [](T v) { return static_cast<U>(v); });
    return out;
  }

 private:
  int channels_ = 0;
  int height_ = 0;
  int width_ = 0;
  std::vector<T> data_;
};

template <typename T>
double squared_distance(const FeatureMap<T>& a, const FeatureMap<T>& b) {
  a.require_same_shape(b, "squared_distance");
  double acc = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    const double d = static_cast<double>(a.values()[k]) - static_cast<double>(b.values()[k]);
    acc += d * d;
  }
  return acc;
}

template <typename T>
double squared_norm(const FeatureMap<T>& a) {
  double acc = 0.0;
  for (T v : a.values()) acc += static_cast<double>(v) * static_cast<double>(v);
  return acc;
}

}  // namespace liealign
