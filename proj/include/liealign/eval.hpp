#pragma once

// Atlas construction, keypoint-transfer PCK, result serialisation and the
// synthetic ground-truth benchmark.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "liealign/error.hpp"
#include "liealign/feature_map.hpp"
#include "liealign/features.hpp"
#include "liealign/lie.hpp"
#include "liealign/training.hpp"
#include "liealign/warp.hpp"

namespace liealign {

// ---------------------------------------------------------------------------
// AlignmentResult JSON
// ---------------------------------------------------------------------------

namespace detail {

inline nlohmann::json mat_json(const Mat3& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (int r = 0; r < 3; ++r) rows.push_back({m(r, 0), m(r, 1), m(r, 2)});
  return rows;
}

inline Mat3 mat_from_json(const nlohmann::json& j) {
  Mat3 m;
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) m(r, c) = j.at(r).at(c).get<double>();
  }
  return m;
}

}  // namespace detail

inline nlohmann::json to_json(const AlignmentResult& r) {
  nlohmann::json images = nlohmann::json::array();
  for (std::size_t i = 0; i < r.images.size(); ++i) {
    const auto& img = r.images[i];
    nlohmann::json thetas = nlohmann::json::array();
    for (const auto& th : img.thetas) {
      nlohmann::json v = nlohmann::json::array();
      for (double x : th.theta()) v.push_back(x);
      thetas.push_back(v);
    }
    images.push_back({{"index", i},
                      {"transform", detail::mat_json(img.transform.t)},
                      {"inverse", detail::mat_json(img.inverse)},
                      {"flip", to_string(img.flip)},
                      {"thetas", thetas},
                      {"loss", img.loss}});
  }
  return {{"family", std::string(to_string(r.family))},
          {"recurrences", r.recurrences},
          {"flips", r.flips},
          {"model_hash", r.model_hash},
          {"images", images}};
}

inline AlignmentResult alignment_from_json(const nlohmann::json& j) {
  AlignmentResult r;
  try {
    r.family = parse_family(j.at("family").get<std::string>());
    r.recurrences = j.value("recurrences", 0);
    r.flips = j.value("flips", false);
    r.model_hash = j.value("model_hash", std::string{});
    for (const auto& e : j.at("images")) {
      ImageAlignment img;
      img.transform = {detail::mat_from_json(e.at("transform")), r.family};
      img.inverse = detail::mat_from_json(e.at("inverse"));
      img.flip = e.at("flip").get<std::string>() == "horizontal" ? FlipConfig::horizontal : FlipConfig::identity;
      for (const auto& th : e.value("thetas", nlohmann::json::array())) {
        Params8 p{};
        for (int k = 0; k < 8; ++k) p[k] = th.at(k).get<double>();
        img.thetas.emplace_back(p, r.family);
      }
      img.loss = e.value("loss", 0.0);
      if (std::abs(img.transform.t.determinant()) < 1e-12) {
        throw Error(ErrorCode::validation, "alignment transform is not invertible");
      }
      r.images.push_back(std::move(img));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::format, std::string("malformed alignment JSON: ") + e.what());
  }
  return r;
}

// ---------------------------------------------------------------------------
// Atlas
// ---------------------------------------------------------------------------

/// Mean of the aligned maps: (1/N) Σ warp(F^{k_i} X_i, T_i).
inline FeatureMap<float> build_atlas(std::span<const FeatureMap<float>> maps, const AlignmentResult& r) {
  if (maps.size() != r.images.size() || maps.empty()) {
    throw Error(ErrorCode::shape_mismatch, "atlas: collection and alignment sizes differ");
  }
  FeatureMap<double> acc(maps.front().channels(), maps.front().height(), maps.front().width());
  for (std::size_t i = 0; i < maps.size(); ++i) {
    maps[i].require_same_shape(maps.front(), "atlas");
    const FeatureMap<float> w = warp(flip(maps[i], r.images[i].flip), r.images[i].transform.t);
    for (std::size_t k = 0; k < w.size(); ++k) acc.values()[k] += w.values()[k];
  }
  FeatureMap<float> out(acc.channels(), acc.height(), acc.width());
  const double inv_n = 1.0 / static_cast<double>(maps.size());
  for (std::size_t k = 0; k < out.size(); ++k) out.values()[k] = static_cast<float>(acc.values()[k] * inv_n);
  return out;
}

/// The aligned maps themselves, in collection order.
inline std::vector<FeatureMap<float>> aligned_maps(std::span<const FeatureMap<float>> maps, const AlignmentResult& r) {
  std::vector<FeatureMap<float>> out;
  for (std::size_t i = 0; i < maps.size(); ++i) out.push_back(warp(flip(maps[i], r.images[i].flip), r.images[i].transform.t));
  return out;
}

/// Mean over pixels and channels of the across-image variance.
inline double stack_variance(std::span<const FeatureMap<float>> maps) {
  if (maps.empty()) return 0.0;
  const std::size_t m = maps.front().size();
  double total = 0.0;
  for (std::size_t k = 0; k < m; ++k) {
    double s = 0.0, s2 = 0.0;
    for (const auto& f : maps) {
      const double v = f.values()[k];
      s += v;
      s2 += v * v;
    }
    const double mean = s / static_cast<double>(maps.size());
    total += s2 / static_cast<double>(maps.size()) - mean * mean;
  }
  return total / static_cast<double>(m);
}

// ---------------------------------------------------------------------------
// PCK transfer
// ---------------------------------------------------------------------------

struct KeypointAnnotation {
  std::vector<Keypoint> keypoints;  // feature-map pixels
  BoundingBox bbox;
};

inline constexpr double kDefaultPckAlpha = 0.1;

struct PckScore {
  int hits = 0;
  int total = 0;
  [[nodiscard]] double score() const { return static_cast<double>(hits) / total; }
};

/// Transfers every keypoint visible in both images with p_dst = t_dst·t_src⁻¹·p_src.
/// `t_*` are the effective sampling transforms on the unflipped maps.
inline PckScore pck_transfer(const KeypointAnnotation& src, const KeypointAnnotation& dst, const Mat3& t_src,
                             const Mat3& t_dst, int height, int width, double alpha = kDefaultPckAlpha) {
  if (src.keypoints.size() != dst.keypoints.size()) {
    throw Error(ErrorCode::validation, "pck: keypoint identity counts differ between the pair");
  }
  if (!(dst.bbox.height > 0.0 && dst.bbox.width > 0.0)) throw Error(ErrorCode::validation, "pck: bbox must be positive");
  const double threshold = alpha * std::max(dst.bbox.height, dst.bbox.width);
  PckScore s;
  for (std::size_t k = 0; k < src.keypoints.size(); ++k) {
    const auto& a = src.keypoints[k];
    const auto& b = dst.keypoints[k];
    if (!a.visible || !b.visible) continue;
    ++s.total;
    const Point2 p = transfer_point({a.x, a.y}, t_src, t_dst, height, width);
    if (std::hypot(p.x - b.x, p.y - b.y) <= threshold) ++s.hits;
  }
  if (s.total == 0) throw Error(ErrorCode::undefined_score, "pck: no shared visible keypoints");
  return s;
}

struct PairScore {
  std::size_t src = 0;
  std::size_t dst = 0;
  PckScore pck;
};

struct PckReport {
  std::vector<PairScore> pairs;  // defined pairs only
  double mean = 0.0;             // per-pair mean
  double alpha = kDefaultPckAlpha;
  std::size_t images = 0;
};

inline std::vector<KeypointAnnotation> annotations(const Collection& col) {
  if (!col.has_keypoints) throw Error(ErrorCode::invalid_input, "collection carries no keypoint annotations");
  std::vector<KeypointAnnotation> out;
  for (const auto& b : col.images) out.push_back({b.keypoints, object_extent(b)});
  return out;
}

/// Scores every ordered pair; pairs without shared visible keypoints are
/// left out of the mean.
inline PckReport evaluate_collection(std::span<const KeypointAnnotation> ann, std::span<const Mat3> effective,
                                     int height, int width, double alpha = kDefaultPckAlpha) {
  if (ann.size() != effective.size()) throw Error(ErrorCode::shape_mismatch, "pck: annotation/result count mismatch");
  PckReport rep;
  rep.alpha = alpha;
  rep.images = ann.size();
  double sum = 0.0;
  for (std::size_t i = 0; i < ann.size(); ++i) {
    for (std::size_t j = 0; j < ann.size(); ++j) {
      if (i == j) continue;
      try {
        const PckScore s = pck_transfer(ann[i], ann[j], effective[i], effective[j], height, width, alpha);
        rep.pairs.push_back({i, j, s});
        sum += s.score();
      } catch (const Error& e) {
        if (e.code() != ErrorCode::undefined_score) throw;
      }
    }
  }
  if (rep.pairs.empty()) throw Error(ErrorCode::undefined_score, "pck: every pair is undefined");
  rep.mean = sum / static_cast<double>(rep.pairs.size());
  return rep;
}

inline std::vector<Mat3> effective_transforms(const AlignmentResult& r) {
  std::vector<Mat3> out;
  for (const auto& img : r.images) out.push_back(img.effective());
  return out;
}

inline PckReport evaluate_collection(const Collection& col, const AlignmentResult& r,
                                     double alpha = kDefaultPckAlpha) {
  const auto ann = annotations(col);
  const auto eff = effective_transforms(r);
  return evaluate_collection(ann, eff, col.height(), col.width(), alpha);
}

inline std::string pck_csv(const PckReport& rep) {
  std::ostringstream o;
  o << "src,dst,hits,total,score\n";
  o.precision(17);
  for (const auto& p : rep.pairs) {
    o << p.src << ',' << p.dst << ',' << p.pck.hits << ',' << p.pck.total << ',' << p.pck.score() << '\n';
  }
  return o.str();
}

inline nlohmann::json pck_summary(const PckReport& rep) {
  return {{"mean", rep.mean},
          {"alpha", rep.alpha},
          {"N", rep.images},
          {"pairs", rep.pairs.size()},
          {"averaging", "per-pair mean over pairs with shared visible keypoints"}};
}

// ---------------------------------------------------------------------------
// Synthetic benchmark
// ---------------------------------------------------------------------------

struct SyntheticOptions {
  std::size_t n = 8;
  int height = 32;
  int width = 32;
  int feature_dim = 32;
  GroupFamily family = GroupFamily::SE2;
  double magnitude = 1.0;
  double max_rotation_deg = 20.0;
  double max_translation = 0.2;
  double max_affine = 0.1;
  double max_projective = 0.05;
  double noise = 0.03;  // smooth per-channel detail keeping the lifted features full rank
  bool mirror_half = false;
  int bumps = 7;
  std::uint64_t seed = 0;
};

struct SyntheticSet {
  Collection collection;
  std::vector<Mat3> ground_truth;  // E_i: image_i(q) = base(E_i · q), normalised coordinates
  std::vector<FlipConfig> mirrored;
};

namespace detail {

struct Bump {
  double x, y, sigma, amplitude;
};

inline double bump_sum(const std::vector<Bump>& bumps, double x, double y) {
  double v = 0.0;
  for (const auto& b : bumps) {
    const double dx = x - b.x, dy = y - b.y;
    v += b.amplitude * std::exp(-(dx * dx + dy * dy) / (2.0 * b.sigma * b.sigma));
  }
  return v;
}

inline constexpr double kEllipseA = 0.7;
inline constexpr double kEllipseB = 0.5;

/// Each coefficient has |value| in [bound/2, bound] with a random sign, so
/// every view is a clear displacement while staying inside the bounds.
inline Mat3 random_element(GroupFamily family, const SyntheticOptions& o, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> mag(0.5, 1.0);
  std::bernoulli_distribution sign(0.5);
  const auto u = [&](std::mt19937_64& r) { return (sign(r) ? 1.0 : -1.0) * mag(r); };
  const double m = o.magnitude;
  const double a = u(rng) * o.max_rotation_deg * m * M_PI / 180.0;
  Mat3 g = Mat3::Identity();
  g(0, 0) = std::cos(a);
  g(0, 1) = -std::sin(a);
  g(1, 0) = std::sin(a);
  g(1, 1) = std::cos(a);
  g(0, 2) = u(rng) * o.max_translation * m;
  g(1, 2) = u(rng) * o.max_translation * m;
  if (family != GroupFamily::SE2) {
    Mat3 aff = Mat3::Identity();
    for (int r = 0; r < 2; ++r) {
      for (int c = 0; c < 2; ++c) aff(r, c) += u(rng) * o.max_affine * m;
    }
    g = g * aff;
  }
  if (family == GroupFamily::SL3) {
    g(2, 0) = u(rng) * o.max_projective * m;
    g(2, 1) = u(rng) * o.max_projective * m;
    g /= std::cbrt(g.determinant());
  }
  return g;
}

}  // namespace detail

/// Renders N views of one analytic object. Every value is evaluated at the
/// exact warped coordinate, so no interpolation error enters the data.
inline SyntheticSet make_synthetic(const SyntheticOptions& o) {
  if (o.n < 2) throw Error(ErrorCode::invalid_input, "make_synthetic needs N >= 2");
  if (o.height < 2 || o.width < 2 || o.feature_dim < 1) throw Error(ErrorCode::invalid_input, "bad synthetic extent");
  std::mt19937_64 rng(o.seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);

  std::array<std::vector<detail::Bump>, 3> latent;
  for (auto& ch : latent) {
    for (int k = 0; k < o.bumps; ++k) {
      ch.push_back({u(rng) * detail::kEllipseA, u(rng) * detail::kEllipseB, 0.18 + 0.1 * (u(rng) + 1.0), u(rng)});
    }
  }
  std::vector<std::vector<detail::Bump>> detail_bumps(static_cast<std::size_t>(o.feature_dim));
  for (auto& ch : detail_bumps) {
    for (int k = 0; k < 3; ++k) ch.push_back({u(rng) * 0.8, u(rng) * 0.6, 0.15 + 0.1 * (u(rng) + 1.0), u(rng)});
  }
  std::vector<double> lift(static_cast<std::size_t>(o.feature_dim) * 3);
  for (auto& v : lift) v = gauss(rng);

  // Keypoint lattice inside the ellipse, in base coordinates.
  std::vector<Point2> lattice;
  for (int gy = -2; gy <= 2; ++gy) {
    for (int gx = -2; gx <= 2; ++gx) {
      const Point2 b{gx * 0.25, gy * 0.17};
      const double e = (b.x * b.x) / (detail::kEllipseA * detail::kEllipseA) +
                       (b.y * b.y) / (detail::kEllipseB * detail::kEllipseB);
      if (e < 0.9) lattice.push_back(b);
    }
  }

  SyntheticSet set;
  set.collection.has_keypoints = true;
  for (std::size_t i = 0; i < o.n; ++i) {
    const Mat3 g = o.magnitude == 0.0 ? Mat3::Identity() : detail::random_element(o.family, o, rng);
    const FlipConfig mirrored = (o.mirror_half && i % 2 == 1) ? FlipConfig::horizontal : FlipConfig::identity;
    const Mat3 e = g * flip_matrix(mirrored);
    set.ground_truth.push_back(e);
    set.mirrored.push_back(mirrored);

    FeatureBundle b;
    b.features = FeatureMap<float>(o.feature_dim, o.height, o.width);
    b.mask.assign(static_cast<std::size_t>(o.height) * o.width, 0);
    b.source = "synthetic_" + std::to_string(i);
    b.original_width = o.width;
    b.original_height = o.height;
    for (int y = 0; y < o.height; ++y) {
      for (int x = 0; x < o.width; ++x) {
        const Point2 q{to_normalized(x, o.width), to_normalized(y, o.height)};
        const Point2 base = apply_homography(e, q);
        std::array<double, 3> s{};
        for (int c = 0; c < 3; ++c) s[c] = detail::bump_sum(latent[c], base.x, base.y);
        for (int d = 0; d < o.feature_dim; ++d) {
          double v = 0.0;
          for (int c = 0; c < 3; ++c) v += lift[static_cast<std::size_t>(d) * 3 + c] * s[c];
          v += o.noise * detail::bump_sum(detail_bumps[static_cast<std::size_t>(d)], base.x, base.y);
          b.features(d, y, x) = static_cast<float>(v);
        }
        const double ell = (base.x * base.x) / (detail::kEllipseA * detail::kEllipseA) +
                           (base.y * base.y) / (detail::kEllipseB * detail::kEllipseB);
        b.mask[static_cast<std::size_t>(y) * o.width + x] = ell <= 1.0 ? 1 : 0;
      }
    }
    const Mat3 e_inv = e.inverse();
    for (const auto& lp : lattice) {
      const Point2 qn = apply_homography(e_inv, lp);
      const Point2 q{to_pixel(qn.x, o.width), to_pixel(qn.y, o.height)};
      Keypoint kp{static_cast<float>(q.x), static_cast<float>(q.y), false};
      const bool inside = q.x >= 0.0 && q.x <= o.width - 1 && q.y >= 0.0 && q.y <= o.height - 1;
      if (inside) {
        const int px = static_cast<int>(std::lround(q.x));
        const int py = static_cast<int>(std::lround(q.y));
        kp.visible = b.mask[static_cast<std::size_t>(py) * o.width + px] != 0;
      } else {
        kp.x = std::clamp(kp.x, 0.0F, static_cast<float>(o.width - 1));
        kp.y = std::clamp(kp.y, 0.0F, static_cast<float>(o.height - 1));
      }
      b.keypoints.push_back(kp);
    }
    set.collection.images.push_back(std::move(b));
  }
  return set;
}

/// Model-side transforms that align the synthetic set perfectly: t_i = E_i⁻¹.
inline std::vector<Mat3> ideal_transforms(const SyntheticSet& s) {
  std::vector<Mat3> out;
  for (const auto& e : s.ground_truth) out.push_back(e.inverse());
  return out;
}

/// Mean over ordered pairs and the four frame corners of the distance
/// between predicted and true point transfer, in pixels.
inline double corner_error(std::span<const Mat3> predicted, std::span<const Mat3> ground_truth, int height, int width) {
  if (predicted.size() != ground_truth.size()) throw Error(ErrorCode::shape_mismatch, "corner_error: size mismatch");
  const std::array<Point2, 4> corners{Point2{0.0, 0.0}, Point2{width - 1.0, 0.0}, Point2{0.0, height - 1.0},
                                      Point2{width - 1.0, height - 1.0}};
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    for (std::size_t j = 0; j < predicted.size(); ++j) {
      if (i == j) continue;
      const Mat3 ti = ground_truth[i].inverse();
      const Mat3 tj = ground_truth[j].inverse();
      for (const auto& c : corners) {
        const Point2 p = transfer_point(c, predicted[i], predicted[j], height, width);
        const Point2 g = transfer_point(c, ti, tj, height, width);
        total += std::hypot(p.x - g.x, p.y - g.y);
        ++count;
      }
    }
  }
  return total / static_cast<double>(count);
}

/// Fraction of images whose selected flip matches the mirroring, up to one
/// global flip of the whole collection.
inline double flip_accuracy(std::span<const FlipConfig> selected, std::span<const FlipConfig> truth) {
  if (selected.size() != truth.size() || selected.empty()) throw Error(ErrorCode::shape_mismatch, "flip_accuracy");
  std::size_t same = 0;
  for (std::size_t i = 0; i < selected.size(); ++i) same += selected[i] == truth[i] ? 1 : 0;
  const std::size_t best = std::max(same, selected.size() - same);
  return static_cast<double>(best) / static_cast<double>(selected.size());
}

}  // namespace liealign
