#pragma once

// Matrix Lie algebras se(2) ⊂ aff(2) ⊂ sl(3), their groups, and a
// differentiable 3x3 matrix exponential.
//
// Parameter vector convention (0-based indices 0..7 stand for θ1..θ8):
//
//   se(2)  [ 0   θ2  θ3 ]   aff(2) [ θ1 θ2 θ3 ]   sl(3) [ θ1 θ2 θ3          ]
//          [-θ2  0   θ6 ]          [ θ4 θ5 θ6 ]         [ θ4 θ5 θ6          ]
//          [ 0   0   0  ]          [ 0  0  0  ]         [ θ7 θ8 -(θ1 + θ5)  ]
//
// All internal math is double precision regardless of the network scalar.

#include <Eigen/Core>
#include <Eigen/LU>

#include <array>
#include <cmath>
#include <string>
#include <string_view>
#include <vector>

#include "liealign/error.hpp"

namespace liealign {

using Mat3 = Eigen::Matrix3d;
using Vec3 = Eigen::Vector3d;
using Params8 = std::array<double, 8>;
using Mask8 = std::array<double, 8>;

enum class GroupFamily { SE2 = 0, AFF2 = 1, SL3 = 2 };

inline std::string_view to_string(GroupFamily family) {
  switch (family) {
    case GroupFamily::SE2: return "se2";
    case GroupFamily::AFF2: return "aff2";
    case GroupFamily::SL3: return "sl3";
  }
  return "?";
}

inline GroupFamily parse_family(std::string_view name) {
  if (name == "se2" || name == "SE2") return GroupFamily::SE2;
  if (name == "aff2" || name == "AFF2") return GroupFamily::AFF2;
  if (name == "sl3" || name == "SL3") return GroupFamily::SL3;
  throw Error(ErrorCode::config, "unknown group family '" + std::string(name) + "'");
}

/// Binary mask over θ1..θ8 of the coefficients a family keeps free.
inline Mask8 curriculum_mask(GroupFamily family) {
  switch (family) {
    case GroupFamily::SE2: return {0, 1, 1, 0, 0, 1, 0, 0};
    case GroupFamily::AFF2: return {1, 1, 1, 1, 1, 1, 0, 0};
    case GroupFamily::SL3: return {1, 1, 1, 1, 1, 1, 1, 1};
  }
  return {};
}

inline int degrees_of_freedom(GroupFamily family) {
  switch (family) {
    case GroupFamily::SE2: return 3;
    case GroupFamily::AFF2: return 6;
    case GroupFamily::SL3: return 8;
  }
  return 0;
}

/// The smallest family containing both arguments (nesting).
inline GroupFamily promote(GroupFamily a, GroupFamily b) {
  return static_cast<int>(a) >= static_cast<int>(b) ? a : b;
}

inline bool nested_in(GroupFamily inner, GroupFamily outer) {
  return static_cast<int>(inner) <= static_cast<int>(outer);
}

inline Params8 apply_mask(const Params8& theta, const Mask8& mask) {
  Params8 out{};
  for (std::size_t k = 0; k < 8; ++k) out[k] = theta[k] * mask[k];
  return out;
}

/// θ restricted to a family: coefficients outside the active set are zero.
class AlgebraParams {
 public:
  AlgebraParams() = default;
  AlgebraParams(const Params8& theta, GroupFamily family)
      : theta_(apply_mask(theta, curriculum_mask(family))), family_(family) {}

  [[nodiscard]] const Params8& theta() const noexcept { return theta_; }
  [[nodiscard]] GroupFamily family() const noexcept { return family_; }
  [[nodiscard]] double operator[](std::size_t k) const { return theta_[k]; }

  [[nodiscard]] AlgebraParams negated() const {
    Params8 neg{};
    for (std::size_t k = 0; k < 8; ++k) neg[k] = -theta_[k];
    return {neg, family_};
  }

 private:
  Params8 theta_{};
  GroupFamily family_ = GroupFamily::SL3;
};

struct AlgebraMatrix {
  Mat3 m = Mat3::Zero();
  GroupFamily family = GroupFamily::SL3;
};

struct GroupTransform {
  Mat3 t = Mat3::Identity();
  GroupFamily family = GroupFamily::SE2;

  static GroupTransform identity(GroupFamily family = GroupFamily::SE2) {
    return {Mat3::Identity(), family};
  }
};

inline Mat3 embed_matrix(const Params8& th, GroupFamily family) {
  Mat3 m = Mat3::Zero();
  switch (family) {
    case GroupFamily::SE2:
      m(0, 1) = th[1];
      m(0, 2) = th[2];
      m(1, 0) = -th[1];
      m(1, 2) = th[5];
      break;
    case GroupFamily::AFF2:
      m(0, 0) = th[0]; m(0, 1) = th[1]; m(0, 2) = th[2];
      m(1, 0) = th[3]; m(1, 1) = th[4]; m(1, 2) = th[5];
      break;
    case GroupFamily::SL3:
      m(0, 0) = th[0]; m(0, 1) = th[1]; m(0, 2) = th[2];
      m(1, 0) = th[3]; m(1, 1) = th[4]; m(1, 2) = th[5];
      m(2, 0) = th[6]; m(2, 1) = th[7]; m(2, 2) = -(th[0] + th[4]);
      break;
  }
  return m;
}

inline AlgebraMatrix embed(const AlgebraParams& params) {
  return {embed_matrix(params.theta(), params.family()), params.family()};
}

/// Adjoint of embed: maps a gradient w.r.t. the algebra matrix onto θ.
inline Params8 embed_transpose(const Mat3& g, GroupFamily family) {
  Params8 d{};
  switch (family) {
    case GroupFamily::SE2:
      d[1] = g(0, 1) - g(1, 0);
      d[2] = g(0, 2);
      d[5] = g(1, 2);
      break;
    case GroupFamily::AFF2:
      d[0] = g(0, 0); d[1] = g(0, 1); d[2] = g(0, 2);
      d[3] = g(1, 0); d[4] = g(1, 1); d[5] = g(1, 2);
      break;
    case GroupFamily::SL3:
      d[0] = g(0, 0) - g(2, 2); d[1] = g(0, 1); d[2] = g(0, 2);
      d[3] = g(1, 0); d[4] = g(1, 1) - g(2, 2); d[5] = g(1, 2);
      d[6] = g(2, 0); d[7] = g(2, 1);
      break;
  }
  return d;
}

namespace detail {

inline constexpr int kTaylorOrder = 13;

inline double inf_norm(const Mat3& a) { return a.cwiseAbs().rowwise().sum().maxCoeff(); }

inline int squaring_count(const Mat3& a) {
  const double norm = inf_norm(a);
  if (!(norm > 1.0)) return 0;
  return static_cast<int>(std::ceil(std::log2(norm)));
}

inline void require_finite(const Mat3& a) {
  if (!a.allFinite()) throw Error(ErrorCode::invalid_input, "matrix exponential of non-finite input");
}

/// Intermediates of one scaling-and-squaring evaluation, kept for the VJP.
struct ExpmTrace {
  int squarings = 0;
  Mat3 scaled = Mat3::Zero();
  std::array<Mat3, kTaylorOrder + 2> horner{};  // horner[k] = I + scaled·horner[k+1]/k
  std::vector<Mat3> squares;                    // inputs to each squaring
  Mat3 result = Mat3::Identity();
};

inline ExpmTrace expm_traced(const Mat3& a) {
  require_finite(a);
  ExpmTrace tr;
  tr.squarings = squaring_count(a);
  tr.scaled = std::ldexp(1.0, -tr.squarings) * a;
  tr.horner[kTaylorOrder + 1] = Mat3::Identity();
  for (int k = kTaylorOrder; k >= 1; --k) {
    tr.horner[k] = Mat3::Identity() + (tr.scaled * tr.horner[k + 1]) / static_cast<double>(k);
  }
  Mat3 x = tr.horner[1];
  tr.squares.reserve(tr.squarings);
  for (int s = 0; s < tr.squarings; ++s) {
    tr.squares.push_back(x);
    x = x * x;
  }
  tr.result = x;
  return tr;
}

}  // namespace detail

/// exp(A) by scaling and squaring with an order-13 Taylor polynomial.
inline Mat3 expm_matrix(const Mat3& a) { return detail::expm_traced(a).result; }

inline GroupTransform expm(const AlgebraMatrix& a) { return {expm_matrix(a.m), a.family}; }

/// Vector-Jacobian product of expm_matrix at `a`, obtained by running the
/// evaluation graph (Horner steps, then squarings) backwards.
inline Mat3 expm_vjp(const Mat3& a, const Mat3& upstream) {
  const detail::ExpmTrace tr = detail::expm_traced(a);
  Mat3 g = upstream;
  for (int s = tr.squarings - 1; s >= 0; --s) {
    const Mat3& x = tr.squares[s];
    g = g * x.transpose() + x.transpose() * g;
  }
  Mat3 d_scaled = Mat3::Zero();
  const Mat3 bt = tr.scaled.transpose();
  for (int k = 1; k <= detail::kTaylorOrder; ++k) {
    const double inv_k = 1.0 / static_cast<double>(k);
    d_scaled += inv_k * g * tr.horner[k + 1].transpose();
    g = inv_k * bt * g;
  }
  return std::ldexp(1.0, -tr.squarings) * d_scaled;
}

inline GroupTransform exp_params(const AlgebraParams& params) { return expm(embed(params)); }

/// T^{-θ}: exponentiates the negated algebra element.
inline GroupTransform invert(const AlgebraParams& params) { return exp_params(params.negated()); }

inline GroupTransform compose(const GroupTransform& t1, const GroupTransform& t2, bool allow_promotion = true) {
  if (!allow_promotion && t1.family != t2.family) {
    throw Error(ErrorCode::invalid_input, "compose: family mismatch (" + std::string(to_string(t1.family)) +
                                              " vs " + std::string(to_string(t2.family)) + ")");
  }
  return {t1.t * t2.t, promote(t1.family, t2.family)};
}

/// Structural group-membership test for a transform's declared family.
inline bool satisfies_group(const GroupTransform& g, double tol = 1e-6) {
  const Mat3& t = g.t;
  if (!t.allFinite() || std::abs(t.determinant()) <= 0.0) return false;
  const bool affine_row = std::abs(t(2, 0)) <= tol && std::abs(t(2, 1)) <= tol && std::abs(t(2, 2) - 1.0) <= tol;
  switch (g.family) {
    case GroupFamily::SE2: {
      if (!affine_row) return false;
      const Eigen::Matrix2d r = t.topLeftCorner<2, 2>();
      return (r.transpose() * r - Eigen::Matrix2d::Identity()).cwiseAbs().maxCoeff() <= tol &&
             std::abs(r.determinant() - 1.0) <= tol;
    }
    case GroupFamily::AFF2:
      return affine_row && t.topLeftCorner<2, 2>().determinant() > 0.0;
    case GroupFamily::SL3:
      return std::abs(t.determinant() - 1.0) <= tol;
  }
  return false;
}

/// Linear map P with θ_to = P·θ_from that re-expresses an element of the
/// smaller algebra in the larger one. aff(2) lands in sl(3) after removing
/// its trace, which leaves the induced homography unchanged.
inline Eigen::Matrix<double, 8, 8> promotion_matrix(GroupFamily from, GroupFamily to) {
  using M8 = Eigen::Matrix<double, 8, 8>;
  if (!nested_in(from, to)) {
    throw Error(ErrorCode::invalid_input, "promotion must go from a smaller to a larger family");
  }
  M8 se2_to_aff = M8::Zero();
  se2_to_aff(1, 1) = 1.0;
  se2_to_aff(2, 2) = 1.0;
  se2_to_aff(3, 1) = -1.0;
  se2_to_aff(5, 5) = 1.0;
  M8 aff_to_sl = M8::Identity();
  aff_to_sl(0, 0) = 2.0 / 3.0;
  aff_to_sl(0, 4) = -1.0 / 3.0;
  aff_to_sl(4, 4) = 2.0 / 3.0;
  aff_to_sl(4, 0) = -1.0 / 3.0;
  aff_to_sl(6, 6) = 0.0;
  aff_to_sl(7, 7) = 0.0;

  M8 p = M8::Identity();
  if (from == to) {
    const Mask8 m = curriculum_mask(from);
    for (int k = 0; k < 8; ++k) p(k, k) = m[k];
    return p;
  }
  if (from == GroupFamily::SE2) p = se2_to_aff;
  if (to == GroupFamily::SL3) {
    p = (from == GroupFamily::SE2) ? M8(aff_to_sl * se2_to_aff) : aff_to_sl;
  }
  return p;
}

}  // namespace liealign
