#pragma once

// Feature bundles (precomputed deep features + masks + optional keypoints),
// PCA channel reduction and masking.
//
// Bundle layout, little-endian:
//   "SJAM" | version u32 = 1 | N u32 | d u32 | H u32 | W u32 | flags u32 (bit0: keypoints)
//   per image: V as d·H·W float32 (channel-major) | M as H·W uint8
//              [if flagged: kp_count u32 | kp_count × (f32 x, f32 y, u8 visible)]
// A JSON sidecar with the same basename carries file names and original sizes.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "liealign/binary_io.hpp"
#include "liealign/error.hpp"
#include "liealign/feature_map.hpp"
#include "liealign/tensor_file.hpp"

namespace liealign {

inline constexpr char kBundleMagic[4] = {'S', 'J', 'A', 'M'};
inline constexpr std::uint32_t kBundleVersion = 1;
inline constexpr std::uint32_t kFlagKeypoints = 1U;

struct Keypoint {
  float x = 0.0F;
  float y = 0.0F;
  bool visible = false;
};

struct BoundingBox {
  double height = 0.0;
  double width = 0.0;
};

struct FeatureBundle {
  FeatureMap<float> features;      // d×H×W
  std::vector<std::uint8_t> mask;  // H×W, values in {0, 1}
  std::vector<Keypoint> keypoints;
  std::string source;              // sidecar: image file name
  int original_width = 0;
  int original_height = 0;
  std::optional<BoundingBox> bbox;  // sidecar, feature-map pixels

  [[nodiscard]] int height() const { return features.height(); }
  [[nodiscard]] int width() const { return features.width(); }
};

struct Collection {
  std::vector<FeatureBundle> images;
  bool has_keypoints = false;

  [[nodiscard]] std::size_t size() const { return images.size(); }
  [[nodiscard]] int channels() const { return images.empty() ? 0 : images.front().features.channels(); }
  [[nodiscard]] int height() const { return images.empty() ? 0 : images.front().height(); }
  [[nodiscard]] int width() const { return images.empty() ? 0 : images.front().width(); }
};

inline std::string sidecar_path(const std::string& bundle_path) {
  return std::filesystem::path(bundle_path).replace_extension(".json").string();
}

/// Shape, finiteness, mask and keypoint checks; each failure has its own message.
inline void validate_collection(const Collection& col) {
  if (col.size() < 2) {
    throw Error(ErrorCode::validation, "collection needs at least 2 images, got " + std::to_string(col.size()));
  }
  const auto& first = col.images.front().features;
  if (first.height() < 2 || first.width() < 2) throw Error(ErrorCode::validation, "feature maps must be at least 2x2");
  for (std::size_t i = 0; i < col.size(); ++i) {
    const auto& b = col.images[i];
    if (!b.features.same_shape(first)) {
      throw Error(ErrorCode::shape_mismatch, "image " + std::to_string(i) + " has shape " +
                                                 b.features.shape_string() + ", expected " + first.shape_string());
    }
    if (b.mask.size() != b.features.plane_size()) {
      throw Error(ErrorCode::shape_mismatch, "image " + std::to_string(i) + " mask size mismatch");
    }
    if (!b.features.all_finite()) {
      throw Error(ErrorCode::non_finite, "image " + std::to_string(i) + " has non-finite feature values");
    }
    for (auto m : b.mask) {
      if (m > 1) throw Error(ErrorCode::validation, "non-binary mask in image " + std::to_string(i));
    }
    for (const auto& kp : b.keypoints) {
      if (!std::isfinite(kp.x) || !std::isfinite(kp.y)) {
        throw Error(ErrorCode::non_finite, "image " + std::to_string(i) + " has a non-finite keypoint");
      }
      if (kp.x < 0.0F || kp.x >= static_cast<float>(b.width()) || kp.y < 0.0F ||
          kp.y >= static_cast<float>(b.height())) {
        throw Error(ErrorCode::validation, "keypoint outside the feature map in image " + std::to_string(i));
      }
    }
  }
}

inline std::vector<std::uint8_t> encode_bundle(const Collection& col) {
  validate_collection(col);
  binary::Writer w;
  w.bytes(std::string_view(kBundleMagic, 4));
  w.u32(kBundleVersion);
  w.u32(static_cast<std::uint32_t>(col.size()));
  w.u32(static_cast<std::uint32_t>(col.channels()));
  w.u32(static_cast<std::uint32_t>(col.height()));
  w.u32(static_cast<std::uint32_t>(col.width()));
  w.u32(col.has_keypoints ? kFlagKeypoints : 0U);
  for (const auto& b : col.images) {
    w.f32s(b.features.values());
    w.u8s(b.mask);
    if (col.has_keypoints) {
      w.u32(static_cast<std::uint32_t>(b.keypoints.size()));
      for (const auto& kp : b.keypoints) {
        w.f32(kp.x);
        w.f32(kp.y);
        w.u8(kp.visible ? 1 : 0);
      }
    }
  }
  return w.buffer();
}

inline Collection decode_bundle(std::span<const std::uint8_t> bytes) {
  binary::Reader r(bytes);
  if (r.bytes(4, "magic") != std::string_view(kBundleMagic, 4)) {
    throw Error(ErrorCode::format, "bad magic: not a feature bundle (expected SJAM)");
  }
  if (const auto v = r.u32("version"); v != kBundleVersion) {
    throw Error(ErrorCode::format, "unsupported bundle version " + std::to_string(v));
  }
  const std::uint32_t n = r.u32("header N");
  const std::uint32_t d = r.u32("header d");
  const std::uint32_t h = r.u32("header H");
  const std::uint32_t w = r.u32("header W");
  const std::uint32_t flags = r.u32("header flags");
  const std::size_t payload = static_cast<std::size_t>(d) * h * w;
  if (payload == 0 || d > (1U << 16) || h > (1U << 14) || w > (1U << 14)) {
    throw Error(ErrorCode::format, "implausible bundle dimensions");
  }
  Collection col;
  col.has_keypoints = (flags & kFlagKeypoints) != 0;
  col.images.reserve(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    FeatureBundle b;
    b.features = FeatureMap<float>(static_cast<int>(d), static_cast<int>(h), static_cast<int>(w));
    r.f32s(b.features.values(), "image features");
    b.mask.resize(static_cast<std::size_t>(h) * w);
    r.u8s(b.mask, "image mask");
    if (col.has_keypoints) {
      const std::uint32_t count = r.u32("keypoint count");
      b.keypoints.reserve(count);
      for (std::uint32_t k = 0; k < count; ++k) {
        Keypoint kp;
        kp.x = r.f32("keypoint x");
        kp.y = r.f32("keypoint y");
        kp.visible = r.u8("keypoint visibility") != 0;
        b.keypoints.push_back(kp);
      }
    }
    col.images.push_back(std::move(b));
  }
  if (r.remaining() != 0) {
    throw Error(ErrorCode::format, std::to_string(r.remaining()) + " trailing bytes after the last image");
  }
  validate_collection(col);
  return col;
}

inline void apply_sidecar(Collection& col, const nlohmann::json& j) {
  if (!j.contains("images")) return;
  const auto& arr = j.at("images");
  for (std::size_t i = 0; i < arr.size() && i < col.size(); ++i) {
    auto& b = col.images[i];
    const auto& e = arr[i];
    b.source = e.value("file", std::string{});
    b.original_width = e.value("width", 0);
    b.original_height = e.value("height", 0);
    if (e.contains("bbox")) b.bbox = BoundingBox{e.at("bbox").at(0).get<double>(), e.at("bbox").at(1).get<double>()};
  }
}

inline nlohmann::json make_sidecar(const Collection& col) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& b : col.images) {
    nlohmann::json e{{"file", b.source}, {"width", b.original_width}, {"height", b.original_height}};
    if (b.bbox) e["bbox"] = {b.bbox->height, b.bbox->width};
    arr.push_back(e);
  }
  return {{"images", arr}, {"feature_height", col.height()}, {"feature_width", col.width()}};
}

inline Collection load_bundle(const std::string& path) {
  Collection col = decode_bundle(binary::read_file(path));
  if (const auto side = sidecar_path(path); std::filesystem::exists(side)) {
    std::ifstream in(side);
    apply_sidecar(col, nlohmann::json::parse(in));
  }
  return col;
}

inline void save_bundle(const std::string& path, const Collection& col) {
  binary::Writer w;
  w.u8s(encode_bundle(col));
  w.save(path);
  std::ofstream side(sidecar_path(path));
  side << make_sidecar(col).dump(2) << '\n';
}

/// Mean-centred projection onto the leading principal directions.
struct PcaModel {
  Eigen::VectorXd mean;               // d
  Eigen::MatrixXd components;         // K×d, orthonormal rows
  Eigen::VectorXd explained_variance;  // K, non-increasing

  [[nodiscard]] int k() const { return static_cast<int>(components.rows()); }
  [[nodiscard]] int d() const { return static_cast<int>(components.cols()); }
};

inline constexpr int kDefaultPcaChannels = 25;

/// Fit on the pooled foreground pixel vectors of the whole collection, via
/// an exact eigendecomposition of the d×d covariance.
inline PcaModel fit_pca(const Collection& col, int k = kDefaultPcaChannels) {
  const int d = col.channels();
  if (k < 1 || k > d) {
    throw Error(ErrorCode::invalid_input, "PCA channel count " + std::to_string(k) + " must lie in [1, " +
                                              std::to_string(d) + "]");
  }
  std::size_t count = 0;
  for (const auto& b : col.images) {
    for (auto m : b.mask) count += m;
  }
  if (count < static_cast<std::size_t>(k)) {
    throw Error(ErrorCode::rank_deficient, "only " + std::to_string(count) + " foreground pixels for K=" +
                                               std::to_string(k));
  }
  Eigen::MatrixXd x(static_cast<Eigen::Index>(count), d);
  Eigen::Index row = 0;
  for (const auto& b : col.images) {
    const std::size_t plane = b.features.plane_size();
    for (std::size_t p = 0; p < plane; ++p) {
      if (b.mask[p] == 0) continue;
      for (int c = 0; c < d; ++c) x(row, c) = b.features.values()[c * plane + p];
      ++row;
    }
  }
  PcaModel model;
  model.mean = x.colwise().mean().transpose();
  x.rowwise() -= model.mean.transpose();
  const double denom = count > 1 ? static_cast<double>(count - 1) : 1.0;
  const Eigen::MatrixXd cov = (x.transpose() * x) / denom;
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  if (eig.info() != Eigen::Success) throw Error(ErrorCode::rank_deficient, "covariance eigendecomposition failed");

  // Eigen returns ascending eigenvalues.
  const Eigen::VectorXd values = eig.eigenvalues().reverse();
  const double largest = std::max(values(0), 0.0);
  int nonzero = 0;
  for (Eigen::Index i = 0; i < values.size(); ++i) {
    if (values(i) > 1e-10 * largest && values(i) > 0.0) ++nonzero;
  }
  if (nonzero < k) {
    throw Error(ErrorCode::rank_deficient, "features have only " + std::to_string(nonzero) +
                                               " nonzero principal directions; use K <= " + std::to_string(nonzero));
  }
  model.components.resize(k, d);
  model.explained_variance.resize(k);
  for (int i = 0; i < k; ++i) {
    Eigen::VectorXd v = eig.eigenvectors().col(d - 1 - i);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;  // sign fixed for reproducibility
    model.components.row(i) = v.transpose();
    model.explained_variance(i) = values(i);
  }
  return model;
}

/// Ṽ = PCA(V) ⊙ M: per-pixel centred projection, zeroed on the background.
inline FeatureMap<float> reduce_and_mask(const FeatureBundle& bundle, const PcaModel& pca) {
  const int d = bundle.features.channels();
  if (d != pca.d()) {
    throw Error(ErrorCode::shape_mismatch, "bundle has d=" + std::to_string(d) + " but PCA expects " +
                                               std::to_string(pca.d()));
  }
  const std::size_t plane = bundle.features.plane_size();
  FeatureMap<float> out(pca.k(), bundle.height(), bundle.width());
  Eigen::VectorXd v(d);
  for (std::size_t p = 0; p < plane; ++p) {
    if (bundle.mask[p] == 0) continue;
    for (int c = 0; c < d; ++c) v(c) = static_cast<double>(bundle.features.values()[c * plane + p]) - pca.mean(c);
    const Eigen::VectorXd z = pca.components * v;
    for (int c = 0; c < pca.k(); ++c) out.values()[c * plane + p] = static_cast<float>(z(c));
  }
  return out;
}

inline std::vector<FeatureMap<float>> reduce_collection(const Collection& col, const PcaModel& pca) {
  std::vector<FeatureMap<float>> out;
  out.reserve(col.size());
  for (const auto& b : col.images) out.push_back(reduce_and_mask(b, pca));
  return out;
}

inline std::vector<NamedTensor> pca_tensors(const PcaModel& pca) {
  NamedTensor mean{"pca.mean", {static_cast<std::uint32_t>(pca.d())}, {}};
  NamedTensor comp{"pca.components", {static_cast<std::uint32_t>(pca.k()), static_cast<std::uint32_t>(pca.d())}, {}};
  NamedTensor var{"pca.explained_variance", {static_cast<std::uint32_t>(pca.k())}, {}};
  for (int c = 0; c < pca.d(); ++c) mean.values.push_back(static_cast<float>(pca.mean(c)));
  for (int r = 0; r < pca.k(); ++r) {
    for (int c = 0; c < pca.d(); ++c) comp.values.push_back(static_cast<float>(pca.components(r, c)));
    var.values.push_back(static_cast<float>(pca.explained_variance(r)));
  }
  return {mean, comp, var};
}

inline PcaModel pca_from_tensors(std::span<const NamedTensor> tensors) {
  const auto& mean = find_tensor(tensors, "pca.mean");
  const auto& comp = find_tensor(tensors, "pca.components");
  if (comp.dims.size() != 2 || mean.dims.size() != 1 || comp.dims[1] != mean.dims[0]) {
    throw Error(ErrorCode::format, "inconsistent PCA tensor shapes");
  }
  PcaModel pca;
  const int k = static_cast<int>(comp.dims[0]);
  const int d = static_cast<int>(comp.dims[1]);
  pca.mean.resize(d);
  pca.components.resize(k, d);
  pca.explained_variance = Eigen::VectorXd::Zero(k);
  for (int c = 0; c < d; ++c) pca.mean(c) = mean.values[c];
  for (int r = 0; r < k; ++r) {
    for (int c = 0; c < d; ++c) pca.components(r, c) = comp.values[static_cast<std::size_t>(r) * d + c];
  }
  if (has_tensor(tensors, "pca.explained_variance")) {
    const auto& var = find_tensor(tensors, "pca.explained_variance");
    for (int r = 0; r < k && r < static_cast<int>(var.values.size()); ++r) pca.explained_variance(r) = var.values[r];
  }
  return pca;
}

/// Object extent (h, w) in feature pixels: the sidecar box when present,
/// otherwise the mask's bounding box.
inline BoundingBox object_extent(const FeatureBundle& b) {
  if (b.bbox) return *b.bbox;
  int x0 = b.width(), x1 = -1, y0 = b.height(), y1 = -1;
  for (int y = 0; y < b.height(); ++y) {
    for (int x = 0; x < b.width(); ++x) {
      if (b.mask[static_cast<std::size_t>(y) * b.width() + x] == 0) continue;
      x0 = std::min(x0, x);
      x1 = std::max(x1, x);
      y0 = std::min(y0, y);
      y1 = std::max(y1, y);
    }
  }
  if (x1 < 0) return {static_cast<double>(b.height()), static_cast<double>(b.width())};
  return {static_cast<double>(y1 - y0 + 1), static_cast<double>(x1 - x0 + 1)};
}

}  // namespace liealign
