#pragma once

// Recurrent inverse-compositional STN, the pairwise forward/inverse loss,
// its flip-aware variant, the Lie-algebraic curriculum and the training loop.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "liealign/error.hpp"
#include "liealign/feature_map.hpp"
#include "liealign/lie.hpp"
#include "liealign/nets.hpp"
#include "liealign/optim.hpp"
#include "liealign/warp.hpp"

namespace liealign {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// How predicted coefficients become a transform. `direct_matrix` (T = I + A,
/// numeric inverse) exists only as an ablation of the exponential map.
enum class Parameterization { lie, direct_matrix };

struct CurriculumStage {
  int start_epoch = 0;
  GroupFamily family = GroupFamily::SE2;
};

struct TrainConfig {
  int ae_epochs = 300;
  int joint_epochs = 400;
  int recurrences = 5;
  int batch_size = 0;  // 0: whole collection when N <= 32, else 16
  double learning_rate = 1e-3;
  double lr_decay = 0.9;
  int lr_step = 50;
  std::vector<CurriculumStage> curriculum{{0, GroupFamily::SE2}, {130, GroupFamily::AFF2}, {260, GroupFamily::SL3}};
  bool curriculum_enabled = true;
  bool flips_enabled = false;
  bool freeze_ae = false;
  bool promote_on_switch = true;
  Parameterization parameterization = Parameterization::lie;
  std::uint64_t seed = 0;
  int pca_channels = 25;
  int threads = 1;
  int ae_hidden = 7;
  int loc_width1 = 16;
  int loc_width2 = 20;
  int loc_pool = 4;
  bool record_transforms = false;  // keep every composed transform per epoch

  void validate() const {
    if (recurrences < 1) throw Error(ErrorCode::config, "recurrences must be >= 1");
    if (ae_epochs < 0 || joint_epochs < 0) throw Error(ErrorCode::config, "epoch counts must be >= 0");
    if (!(learning_rate > 0.0)) throw Error(ErrorCode::config, "learning_rate must be positive");
    if (lr_step < 1) throw Error(ErrorCode::config, "lr_step must be >= 1");
    if (batch_size == 1) throw Error(ErrorCode::config, "batch_size must be 0 (auto) or >= 2");
    if (threads < 1) throw Error(ErrorCode::config, "threads must be >= 1");
    if (!curriculum_enabled) return;
    if (curriculum.empty()) throw Error(ErrorCode::config, "curriculum is empty");
    if (curriculum.front().start_epoch != 0) throw Error(ErrorCode::config, "curriculum must start at epoch 0");
    for (std::size_t k = 1; k < curriculum.size(); ++k) {
      if (curriculum[k].start_epoch <= curriculum[k - 1].start_epoch) {
        throw Error(ErrorCode::config, "curriculum start epochs must be strictly increasing");
      }
      if (static_cast<int>(curriculum[k].family) <= static_cast<int>(curriculum[k - 1].family)) {
        throw Error(ErrorCode::config, "curriculum families must be strictly nested SE2 -> AFF2 -> SL3");
      }
    }
    if (curriculum.back().family != GroupFamily::SL3) {
      throw Error(ErrorCode::config, "curriculum must end with sl3");
    }
  }
};

inline std::string curriculum_to_string(const std::vector<CurriculumStage>& stages) {
  std::string s;
  for (const auto& st : stages) {
    if (!s.empty()) s += ',';
    s += std::to_string(st.start_epoch) + ":" + std::string(to_string(st.family));
  }
  return s;
}

inline std::vector<CurriculumStage> parse_curriculum(const std::string& text) {
  std::vector<CurriculumStage> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto colon = item.find(':');
    if (colon == std::string::npos) throw Error(ErrorCode::config, "curriculum entry '" + item + "' lacks ':'");
    try {
      out.push_back({std::stoi(item.substr(0, colon)), parse_family(item.substr(colon + 1))});
    } catch (const std::invalid_argument&) {
      throw Error(ErrorCode::config, "bad curriculum epoch in '" + item + "'");
    }
  }
  return out;
}

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw Error(ErrorCode::config, "key '" + key + "' expects a boolean, got '" + v + "'");
}

}  // namespace detail

/// Applies one `key = value` setting.
inline void set_config_value(TrainConfig& cfg, const std::string& key, const std::string& value) {
  try {
    if (key == "ae_epochs") cfg.ae_epochs = std::stoi(value);
    else if (key == "joint_epochs") cfg.joint_epochs = std::stoi(value);
    else if (key == "recurrences") cfg.recurrences = std::stoi(value);
    else if (key == "batch_size") cfg.batch_size = std::stoi(value);
    else if (key == "learning_rate") cfg.learning_rate = std::stod(value);
    else if (key == "lr_decay") cfg.lr_decay = std::stod(value);
    else if (key == "lr_step") cfg.lr_step = std::stoi(value);
    else if (key == "curriculum") cfg.curriculum = parse_curriculum(value);
    else if (key == "curriculum_enabled") cfg.curriculum_enabled = detail::parse_bool(key, value);
    else if (key == "flips_enabled") cfg.flips_enabled = detail::parse_bool(key, value);
    else if (key == "freeze_ae") cfg.freeze_ae = detail::parse_bool(key, value);
    else if (key == "promote_on_switch") cfg.promote_on_switch = detail::parse_bool(key, value);
    else if (key == "parameterization") {
      if (value == "lie") cfg.parameterization = Parameterization::lie;
      else if (value == "direct_matrix") cfg.parameterization = Parameterization::direct_matrix;
      else throw Error(ErrorCode::config, "parameterization must be 'lie' or 'direct_matrix'");
    } else if (key == "seed") cfg.seed = std::stoull(value);
    else if (key == "pca_channels") cfg.pca_channels = std::stoi(value);
    else if (key == "threads") cfg.threads = std::stoi(value);
    else if (key == "ae_hidden") cfg.ae_hidden = std::stoi(value);
    else if (key == "loc_width1") cfg.loc_width1 = std::stoi(value);
    else if (key == "loc_width2") cfg.loc_width2 = std::stoi(value);
    else if (key == "loc_pool") cfg.loc_pool = std::stoi(value);
    else throw Error(ErrorCode::config, "unknown config key '" + key + "'");
  } catch (const std::invalid_argument&) {
    throw Error(ErrorCode::config, "key '" + key + "' has unparsable value '" + value + "'");
  } catch (const std::out_of_range&) {
    throw Error(ErrorCode::config, "key '" + key + "' value out of range");
  }
}

/// Flat `key = value` text, '#' starts a comment.
inline TrainConfig parse_config(const std::string& text, TrainConfig cfg = {}) {
  std::stringstream ss(text);
  std::string line;
  int lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw Error(ErrorCode::config, "config line " + std::to_string(lineno) + ": expected key = value");
    }
    set_config_value(cfg, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
  }
  return cfg;
}

inline TrainConfig load_config(const std::string& path, TrainConfig cfg = {}) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::io, "cannot open config '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), cfg);
}

inline std::string config_to_text(const TrainConfig& c) {
  std::ostringstream o;
  o.precision(17);
  o << "ae_epochs = " << c.ae_epochs << "\n"
    << "joint_epochs = " << c.joint_epochs << "\n"
    << "recurrences = " << c.recurrences << "\n"
    << "batch_size = " << c.batch_size << "\n"
    << "learning_rate = " << c.learning_rate << "\n"
    << "lr_decay = " << c.lr_decay << "\n"
    << "lr_step = " << c.lr_step << "\n"
    << "curriculum = " << curriculum_to_string(c.curriculum) << "\n"
    << "curriculum_enabled = " << (c.curriculum_enabled ? "true" : "false") << "\n"
    << "flips_enabled = " << (c.flips_enabled ? "true" : "false") << "\n"
    << "freeze_ae = " << (c.freeze_ae ? "true" : "false") << "\n"
    << "promote_on_switch = " << (c.promote_on_switch ? "true" : "false") << "\n"
    << "parameterization = " << (c.parameterization == Parameterization::lie ? "lie" : "direct_matrix") << "\n"
    << "seed = " << c.seed << "\n"
    << "pca_channels = " << c.pca_channels << "\n"
    << "threads = " << c.threads << "\n"
    << "ae_hidden = " << c.ae_hidden << "\n"
    << "loc_width1 = " << c.loc_width1 << "\n"
    << "loc_width2 = " << c.loc_width2 << "\n"
    << "loc_pool = " << c.loc_pool << "\n";
  return o.str();
}

/// Family in force at a joint-phase epoch.
inline GroupFamily curriculum_family(int epoch, const TrainConfig& cfg) {
  if (!cfg.curriculum_enabled || cfg.curriculum.empty()) return GroupFamily::SL3;
  GroupFamily f = cfg.curriculum.front().family;
  for (const auto& st : cfg.curriculum) {
    if (epoch >= st.start_epoch) f = st.family;
  }
  return f;
}

inline GroupFamily final_family(const TrainConfig& cfg) {
  if (!cfg.curriculum_enabled || cfg.curriculum.empty()) return GroupFamily::SL3;
  return cfg.curriculum.back().family;
}

// ---------------------------------------------------------------------------
// Recurrent IC-STN
// ---------------------------------------------------------------------------

template <typename T>
struct CascadeStep {
  LocTape<T> tape;
  AlgebraParams theta;
  Mat3 algebra = Mat3::Zero();
  Mat3 step = Mat3::Identity();
  Mat3 step_inverse = Mat3::Identity();
  Mat3 prefix = Mat3::Identity();  // composition of all earlier steps
};

template <typename T>
struct WarpCascadeState {
  std::vector<CascadeStep<T>> steps;
  Mat3 composed = Mat3::Identity();          // T^{θ(1)} · … · T^{θ(R)}
  Mat3 composed_inverse = Mat3::Identity();  // T^{-θ(R)} · … · T^{-θ(1)}
  GroupFamily family = GroupFamily::SE2;
  Parameterization parameterization = Parameterization::lie;

  [[nodiscard]] GroupTransform transform() const { return {composed, family}; }
  [[nodiscard]] std::vector<AlgebraParams> thetas() const {
    std::vector<AlgebraParams> out;
    for (const auto& s : steps) out.push_back(s.theta);
    return out;
  }
};

/// Runs ψ_loc `recurrences` times. Step r sees U warped once, directly from
/// the original, by the composition of steps 1..r-1.
template <typename T>
WarpCascadeState<T> ic_stn_forward(const Model<T>& model, const FeatureMap<T>& u, GroupFamily family,
                                   int recurrences, Parameterization param = Parameterization::lie) {
  if (recurrences < 1) throw Error(ErrorCode::config, "recurrences must be >= 1");
  WarpCascadeState<T> st;
  st.family = family;
  st.parameterization = param;
  st.steps.resize(static_cast<std::size_t>(recurrences));
  Mat3 prefix = Mat3::Identity();
  Mat3 inverse = Mat3::Identity();
  for (int r = 0; r < recurrences; ++r) {
    auto& s = st.steps[static_cast<std::size_t>(r)];
    s.prefix = prefix;
    const FeatureMap<T> input = r == 0 ? u : warp(u, prefix);
    const std::vector<T> raw = model.localize(input, &s.tape);
    Params8 th{};
    for (int k = 0; k < 8; ++k) {
      th[k] = static_cast<double>(raw[k]);
      if (!std::isfinite(th[k])) {
        throw Error(ErrorCode::non_finite, "localization produced a non-finite θ at recurrence " + std::to_string(r));
      }
    }
    s.theta = AlgebraParams(th, family);
    s.algebra = embed(s.theta).m;
    if (param == Parameterization::lie) {
      s.step = expm_matrix(s.algebra);
      s.step_inverse = expm_matrix(-s.algebra);
    } else {
      s.step = Mat3::Identity() + s.algebra;
      s.step_inverse = s.step.inverse();
    }
    prefix = prefix * s.step;
    inverse = s.step_inverse * inverse;
  }
  st.composed = prefix;
  st.composed_inverse = inverse;
  return st;
}

/// Backpropagates gradients w.r.t. the composed transform and its inverse
/// into the model and into `d_u` (accumulated).
template <typename T>
void ic_stn_backward(const Model<T>& model, const FeatureMap<T>& u, const WarpCascadeState<T>& st,
                     const Mat3& d_composed, const Mat3& d_inverse, Model<T>& grad, FeatureMap<T>& d_u) {
  const std::size_t n = st.steps.size();
  // Inverse chain: Q_R ⋯ Q_1. left[r] = Q_R ⋯ Q_{r+1}, right[r] = Q_{r-1} ⋯ Q_1.
  std::vector<Mat3> right(n, Mat3::Identity()), left(n, Mat3::Identity());
  for (std::size_t r = 1; r < n; ++r) right[r] = st.steps[r - 1].step_inverse * right[r - 1];
  for (std::size_t r = n - 1; r-- > 0;) left[r] = left[r + 1] * st.steps[r + 1].step_inverse;

  const Mask8 mask = curriculum_mask(st.family);
  Mat3 d_prefix = d_composed;
  std::vector<double> d_coords;
  for (std::size_t r = n; r-- > 0;) {
    const auto& s = st.steps[r];
    const Mat3 d_step = s.prefix.transpose() * d_prefix;
    Mat3 d_prev = d_prefix * s.step.transpose();
    const Mat3 d_step_inv = left[r].transpose() * d_inverse * right[r].transpose();

    Mat3 d_alg;
    if (st.parameterization == Parameterization::lie) {
      d_alg = expm_vjp(s.algebra, d_step) - expm_vjp(-s.algebra, d_step_inv);
    } else {
      const Mat3 inv_t = s.step_inverse.transpose();
      d_alg = d_step - inv_t * d_step_inv * inv_t;
    }
    const Params8 d_theta = apply_mask(embed_transpose(d_alg, st.family), mask);
    std::vector<T> dth(8);
    for (int k = 0; k < 8; ++k) dth[k] = static_cast<T>(d_theta[k]);
    const FeatureMap<T> d_input = model.localize_backward(s.tape, dth, grad);
    if (r == 0) {
      d_u += d_input;
    } else {
      const SampleGrid g = make_grid(s.prefix, u.height(), u.width());
      sample_backward(u, g, d_input, &d_u, &d_coords);
      d_prev += grid_backward(s.prefix, u.height(), u.width(), d_coords);
    }
    d_prefix = d_prev;
  }
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// ‖dst − src ∘ S‖² with one bilinear interpolation; optionally dL/dS.
template <typename T>
double pair_loss(const FeatureMap<T>& src, const FeatureMap<T>& dst, const Mat3& s, Mat3* d_s) {
  const int h = dst.height(), w = dst.width();
  if (src.channels() != dst.channels()) throw Error(ErrorCode::shape_mismatch, "pair_loss: channel mismatch");
  const SampleGrid g = make_grid(s, h, w);
  const std::size_t n = static_cast<std::size_t>(h) * w;
  const std::size_t src_plane = src.plane_size();
  std::vector<double> d_coords;
  if (d_s != nullptr) d_coords.assign(2 * n, 0.0);
  const double sx = 0.5 * (src.width() - 1);
  const double sy = 0.5 * (src.height() - 1);
  const T* sdata = src.data();
  const T* ddata = dst.data();
  double loss = 0.0;
  for (std::size_t p = 0; p < n; ++p) {
    const auto taps = detail::bilinear_taps(g.coords[2 * p], g.coords[2 * p + 1], src.height(), src.width());
    double gix = 0.0, giy = 0.0;
    for (int c = 0; c < src.channels(); ++c) {
      const T* plane = sdata + c * src_plane;
      const double v00 = taps.index[0] < 0 ? 0.0 : static_cast<double>(plane[taps.index[0]]);
      const double v10 = taps.index[1] < 0 ? 0.0 : static_cast<double>(plane[taps.index[1]]);
      const double v01 = taps.index[2] < 0 ? 0.0 : static_cast<double>(plane[taps.index[2]]);
      const double v11 = taps.index[3] < 0 ? 0.0 : static_cast<double>(plane[taps.index[3]]);
      const double val = taps.weight[0] * v00 + taps.weight[1] * v10 + taps.weight[2] * v01 + taps.weight[3] * v11;
      const double diff = static_cast<double>(ddata[c * n + p]) - val;
      loss += diff * diff;
      if (d_s != nullptr) {
        const double up = -2.0 * diff;
        gix += up * ((1 - taps.fy) * (v10 - v00) + taps.fy * (v11 - v01));
        giy += up * ((1 - taps.fx) * (v01 - v00) + taps.fx * (v11 - v10));
      }
    }
    if (d_s != nullptr) {
      d_coords[2 * p] = gix * sx;
      d_coords[2 * p + 1] = giy * sy;
    }
  }
  if (d_s != nullptr) *d_s = grid_backward(s, h, w, d_coords);
  return loss;
}

struct IcLossResult {
  double loss = 0.0;
  std::vector<Mat3> d_forward;  // dL/dT_i
  std::vector<Mat3> d_inverse;  // dL/dT_i^{-1}
};

/// Σ_i Σ_{j≠i} ‖Ṽ_j − Ṽ_i ∘ (T_i · T_j⁻¹)‖²; the two matrices are fused
/// before the single interpolation.
template <typename T>
IcLossResult ic_loss(std::span<const FeatureMap<T>> masked, std::span<const Mat3> forward,
                     std::span<const Mat3> inverse, bool with_grad) {
  const std::size_t n = masked.size();
  if (n < 2) throw Error(ErrorCode::invalid_input, "ic_loss needs a batch of at least 2");
  IcLossResult res;
  if (with_grad) {
    res.d_forward.assign(n, Mat3::Zero());
    res.d_inverse.assign(n, Mat3::Zero());
  }
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      const Mat3 s = forward[i] * inverse[j];
      Mat3 ds;
      res.loss += pair_loss(masked[i], masked[j], s, with_grad ? &ds : nullptr);
      if (with_grad) {
        res.d_forward[i] += ds * inverse[j].transpose();
        res.d_inverse[j] += forward[i].transpose() * ds;
      }
    }
  }
  return res;
}

/// Per-image quantities under both flip configurations, indexed [k].
template <typename T>
using PerFlip = std::array<T, 2>;

struct FlipLossResult {
  double loss = 0.0;                  // Σ_{i≠j} Σ_{k_i} min_{k_j} L
  double identity_target_loss = 0.0;  // same source terms with k_j fixed to identity
  std::vector<PerFlip<Mat3>> d_forward;
  std::vector<PerFlip<Mat3>> d_inverse;
  std::vector<std::uint8_t> selected;  // k_j chosen for term (i, j, k_i) at (i·N + j)·2 + k_i
};

/// Flip-aware loss: for every ordered pair and source configuration, only
/// the best target configuration contributes (and receives gradient).
/// Ties go to the lower configuration index.
template <typename T>
FlipLossResult ic_loss_flips(std::span<const PerFlip<FeatureMap<T>>> masked, std::span<const PerFlip<Mat3>> forward,
                             std::span<const PerFlip<Mat3>> inverse, bool with_grad) {
  const std::size_t n = masked.size();
  if (n < 2) throw Error(ErrorCode::invalid_input, "ic_loss_flips needs a batch of at least 2");
  FlipLossResult res;
  res.selected.assign(n * n * 2, 0);
  if (with_grad) {
    res.d_forward.assign(n, {Mat3::Zero(), Mat3::Zero()});
    res.d_inverse.assign(n, {Mat3::Zero(), Mat3::Zero()});
  }
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      for (int ki = 0; ki < 2; ++ki) {
        PerFlip<double> cost{};
        for (int kj = 0; kj < 2; ++kj) {
          cost[kj] = pair_loss(masked[i][ki], masked[j][kj], Mat3(forward[i][ki] * inverse[j][kj]), nullptr);
        }
        const int best = cost[1] < cost[0] ? 1 : 0;
        res.selected[(i * n + j) * 2 + ki] = static_cast<std::uint8_t>(best);
        res.loss += cost[best];
        res.identity_target_loss += cost[0];
        if (with_grad) {
          Mat3 ds;
          pair_loss(masked[i][ki], masked[j][best], Mat3(forward[i][ki] * inverse[j][best]), &ds);
          res.d_forward[i][ki] += ds * inverse[j][best].transpose();
          res.d_inverse[j][best] += forward[i][ki].transpose() * ds;
        }
      }
    }
  }
  return res;
}

/// Per-image flip assignment from the relative parities k_i ⊕ k_j of all
/// selected pair terms: the labelling that agrees with the most terms,
/// found by coordinate descent from image 0, then canonicalised so that the
/// majority orientation is `identity` (image 0 decides exact ties).
inline std::vector<FlipConfig> assign_flips(std::size_t n, std::span<const std::uint8_t> selected) {
  // agree[i][j] - disagree[i][j] over both orders: > 0 means "same orientation".
  std::vector<double> same(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      for (int ki = 0; ki < 2; ++ki) {
        const int parity = ki ^ selected[(i * n + j) * 2 + ki];
        const double vote = parity == 0 ? 1.0 : -1.0;
        same[i * n + j] += vote;
        same[j * n + i] += vote;
      }
    }
  }
  std::vector<int> f(n, 0);
  for (std::size_t j = 1; j < n; ++j) f[j] = same[j] < 0.0 ? 1 : 0;
  for (std::size_t pass = 0; pass < 2 * n; ++pass) {
    bool changed = false;
    for (std::size_t j = 0; j < n; ++j) {
      double score = 0.0;  // support for f_j = 0
      for (std::size_t i = 0; i < n; ++i) {
        if (i != j) score += f[i] == 0 ? same[i * n + j] : -same[i * n + j];
      }
      const int want = score < 0.0 ? 1 : 0;
      if (want != f[j]) {
        f[j] = want;
        changed = true;
      }
    }
    if (!changed) break;
  }
  const auto flipped = static_cast<std::size_t>(std::count(f.begin(), f.end(), 1));
  if (2 * flipped > n || (2 * flipped == n && f[0] == 1)) {
    for (auto& v : f) v ^= 1;
  }
  std::vector<FlipConfig> out(n);
  for (std::size_t k = 0; k < n; ++k) out[k] = f[k] == 1 ? FlipConfig::horizontal : FlipConfig::identity;
  return out;
}

// ---------------------------------------------------------------------------
// Alignment results
// ---------------------------------------------------------------------------

struct ImageAlignment {
  GroupTransform transform;  // composed cascade for the selected flip configuration
  Mat3 inverse = Mat3::Identity();
  FlipConfig flip = FlipConfig::identity;
  std::vector<AlgebraParams> thetas;
  double loss = 0.0;  // Σ_{j≠i} of the image's source terms

  /// Sampling transform on the unflipped image: aligned(x) = I(F^k · T · x).
  [[nodiscard]] Mat3 effective() const { return flip_matrix(flip) * transform.t; }
};

struct AlignmentResult {
  std::vector<ImageAlignment> images;
  GroupFamily family = GroupFamily::SL3;
  int recurrences = 5;
  bool flips = false;
  std::string model_hash;
};

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct AeEpochLog {
  int epoch = 0;
  double lr = 0.0;
  double loss = 0.0;
};

struct EpochLog {
  int epoch = 0;
  double lr = 0.0;
  double loss = 0.0;                  // alignment objective (flip-aware when enabled)
  double identity_target_loss = 0.0;  // flip runs: same terms with target fixed to identity
  double ae_loss = 0.0;
  GroupFamily family = GroupFamily::SE2;
  int flip_switches = 0;
  std::vector<GroupTransform> transforms;  // when record_transforms is set
};

struct TrainResult {
  Model<float> model;
  std::vector<AeEpochLog> ae_log;
  std::vector<EpochLog> joint_log;
  double baseline_loss = 0.0;  // alignment loss at θ = 0
  double final_loss = 0.0;     // alignment loss of the trained model on the collection
  AlignmentResult alignment;
};

namespace detail {

/// Runs fn(k) for k in [0, n); fn must only touch per-k state.
inline void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn) {
  if (threads <= 1 || n <= 1) {
    for (std::size_t k = 0; k < n; ++k) fn(k);
    return;
  }
  const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(threads), n);
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t k = w; k < n; k += workers) fn(k);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

inline std::vector<std::vector<std::size_t>> make_batches(std::size_t n, int batch_size, std::mt19937_64& rng) {
  const std::size_t b = batch_size > 0 ? static_cast<std::size_t>(batch_size) : (n <= 32 ? n : 16);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  if (b < n) std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t s = 0; s < n; s += b) {
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(s),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(n, s + b)));
  }
  // A trailing singleton has no pairs; fold it into the previous batch.
  if (out.size() > 1 && out.back().size() < 2) {
    out[out.size() - 2].push_back(out.back().front());
    out.pop_back();
  }
  return out;
}

inline Model<float> build_model(int channels, const TrainConfig& cfg) {
  AutoencoderSpec ae;
  ae.channels = channels;
  ae.hidden = cfg.ae_hidden;
  LocNetSpec loc;
  loc.width1 = cfg.loc_width1;
  loc.width2 = cfg.loc_width2;
  loc.pool = cfg.loc_pool;
  Model<float> m(ae, loc);
  m.initialize(cfg.seed);
  return m;
}

template <typename T>
std::vector<ParamRef<T>> ae_only(std::vector<ParamRef<T>> refs) {
  std::erase_if(refs, [](const ParamRef<T>& p) { return p.name.rfind("loc.", 0) == 0; });
  return refs;
}

}  // namespace detail

/// Σ_i ‖Ṽ_i − ψ_dec(ψ_enc(Ṽ_i))‖² over `batch`, accumulating gradients.
template <typename T>
double autoencoder_loss(const Model<T>& model, std::span<const FeatureMap<T>> masked,
                        std::span<const std::size_t> batch, Model<T>* grad) {
  double loss = 0.0;
  for (std::size_t idx : batch) {
    AeTape<T> etape, dtape;
    const FeatureMap<T> u = model.encode(masked[idx], &etape);
    const FeatureMap<T> rec = model.decode(u, &dtape);
    FeatureMap<T> d_rec(rec.channels(), rec.height(), rec.width());
    for (std::size_t k = 0; k < rec.size(); ++k) {
      const double diff = static_cast<double>(rec.values()[k]) - static_cast<double>(masked[idx].values()[k]);
      loss += diff * diff;
      d_rec.values()[k] = static_cast<T>(2.0 * diff);
    }
    if (grad != nullptr) {
      const FeatureMap<T> du = model.decode_backward(dtape, d_rec, *grad);
      model.encode_backward(etape, du, *grad);
    }
  }
  return loss;
}

/// Reconstruction pretraining. Throws with (epoch, lr) on a NaN loss.
inline std::vector<AeEpochLog> pretrain_ae(Model<float>& model, std::span<const FeatureMap<float>> masked,
                                           const TrainConfig& cfg) {
  std::vector<AeEpochLog> log;
  if (cfg.ae_epochs == 0) return log;
  std::mt19937_64 rng(cfg.seed ^ 0xAE0AE0AE0ULL);
  auto params = detail::ae_only(model.parameters());
  Adam<float> adam(params);
  for (int epoch = 0; epoch < cfg.ae_epochs; ++epoch) {
    const double lr = step_lr(cfg.learning_rate, cfg.lr_decay, cfg.lr_step, epoch);
    double total = 0.0;
    for (const auto& batch : detail::make_batches(masked.size(), cfg.batch_size, rng)) {
      Model<float> grad = model.zeros_like();
      const double loss = autoencoder_loss<float>(model, masked, batch, &grad);
      if (!std::isfinite(loss)) {
        throw Error(ErrorCode::non_finite, "autoencoder loss is not finite at epoch " + std::to_string(epoch) +
                                               " (lr=" + std::to_string(lr) + ")");
      }
      total += loss;
      auto grads = detail::ae_only(grad.parameters());
      adam.step(params, grads, lr);
    }
    log.push_back({epoch, lr, total});
  }
  return log;
}

struct AlignOptions {
  GroupFamily family = GroupFamily::SL3;
  int recurrences = 5;
  bool flips = false;
  Parameterization parameterization = Parameterization::lie;
  int threads = 1;
};

/// Forward pass over the whole collection: transforms, flip selection and
/// per-image loss contributions.
inline AlignmentResult align_collection(const Model<float>& model, std::span<const FeatureMap<float>> masked,
                                        const AlignOptions& opt) {
  const std::size_t n = masked.size();
  AlignmentResult res;
  res.family = opt.family;
  res.recurrences = opt.recurrences;
  res.flips = opt.flips;
  const int configs = opt.flips ? 2 : 1;
  std::vector<PerFlip<WarpCascadeState<float>>> states(n);
  detail::parallel_for(n, opt.threads, [&](std::size_t i) {
    const FeatureMap<float> u = model.encode(masked[i]);
    for (int k = 0; k < configs; ++k) {
      states[i][k] = ic_stn_forward(model, flip(u, kFlipConfigs[k]), opt.family, opt.recurrences, opt.parameterization);
    }
  });
  std::vector<FlipConfig> flips(n, FlipConfig::identity);
  if (opt.flips && n >= 2) {
    std::vector<PerFlip<FeatureMap<float>>> tgt(n);
    std::vector<PerFlip<Mat3>> fwd(n), inv(n);
    for (std::size_t i = 0; i < n; ++i) {
      for (int k = 0; k < 2; ++k) {
        tgt[i][k] = flip(masked[i], kFlipConfigs[k]);
        fwd[i][k] = states[i][k].composed;
        inv[i][k] = states[i][k].composed_inverse;
      }
    }
    const auto fl = ic_loss_flips<float>(tgt, fwd, inv, false);
    flips = assign_flips(n, fl.selected);
  }
  res.images.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int k = static_cast<int>(flips[i]);
    const auto& st = states[i][k];
    auto& img = res.images[i];
    img.transform = st.transform();
    img.inverse = st.composed_inverse;
    img.flip = flips[i];
    img.thetas = st.thetas();
  }
  // Loss contributions under the selected configurations.
  std::vector<FeatureMap<float>> oriented(n);
  for (std::size_t i = 0; i < n; ++i) oriented[i] = flip(masked[i], flips[i]);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      res.images[i].loss += pair_loss(oriented[i], oriented[j], Mat3(res.images[i].transform.t * res.images[j].inverse),
                                      nullptr);
    }
  }
  return res;
}

inline double total_alignment_loss(const AlignmentResult& r) {
  double s = 0.0;
  for (const auto& img : r.images) s += img.loss;
  return s;
}

/// Alignment loss with every transform at the identity: Σ_{i≠j} ‖Ṽ_j − Ṽ_i‖².
inline double identity_baseline_loss(std::span<const FeatureMap<float>> masked) {
  double s = 0.0;
  for (std::size_t i = 0; i < masked.size(); ++i) {
    for (std::size_t j = 0; j < masked.size(); ++j) {
      if (i != j) s += squared_distance(masked[i], masked[j]);
    }
  }
  return s;
}

/// Rewrites the localization head so the network predicts the same
/// transform under the larger family (nesting), then clears its moments.
inline void promote_head(Model<float>& model, Adam<float>& adam, GroupFamily from, GroupFamily to) {
  const auto p = promotion_matrix(from, to);
  const Mask8 mask = curriculum_mask(from);
  auto& head = model.head;
  std::vector<float> w(head.weight.size(), 0.0F), b(head.bias.size(), 0.0F);
  for (int o = 0; o < 8; ++o) {
    for (int q = 0; q < 8; ++q) {
      const double c = p(o, q) * mask[q];
      if (c == 0.0) continue;
      for (int i = 0; i < head.in; ++i) {
        w[static_cast<std::size_t>(o) * head.in + i] +=
            static_cast<float>(c * head.weight[static_cast<std::size_t>(q) * head.in + i]);
      }
      b[o] += static_cast<float>(c * head.bias[q]);
    }
  }
  head.weight = std::move(w);
  head.bias = std::move(b);
  adam.reset("loc.head.weight");
  adam.reset("loc.head.bias");
}

struct JointOptions {
  GroupFamily family = GroupFamily::SE2;
  int recurrences = 5;
  bool flips = false;
  bool freeze_ae = false;
  Parameterization parameterization = Parameterization::lie;
  int threads = 1;
  bool record_transforms = false;
};

struct JointStepResult {
  double loss = 0.0;                  // alignment term
  double identity_target_loss = 0.0;  // flip runs only
  double ae_loss = 0.0;               // reconstruction term (0 when frozen)
  std::vector<FlipConfig> flips;      // flip runs only, per batch member
  std::vector<GroupTransform> transforms;
};

/// One joint-phase evaluation of L_align + L_AE on a batch; when `grad` is
/// given, accumulates the gradient of that sum. Per-image gradients are
/// reduced in batch order, so the result does not depend on `threads`.
template <typename T>
JointStepResult joint_step(const Model<T>& model, std::span<const FeatureMap<T>> batch, const JointOptions& opt,
                           Model<T>* grad) {
  const std::size_t b = batch.size();
  const int configs = opt.flips ? 2 : 1;
  std::vector<AeTape<T>> tapes(b);
  std::vector<FeatureMap<T>> codes(b);
  std::vector<PerFlip<WarpCascadeState<T>>> states(b);
  detail::parallel_for(b, opt.threads, [&](std::size_t k) {
    codes[k] = model.encode(batch[k], &tapes[k]);
    for (int f = 0; f < configs; ++f) {
      states[k][f] = ic_stn_forward(model, flip(codes[k], kFlipConfigs[f]), opt.family, opt.recurrences,
                                    opt.parameterization);
    }
  });

  JointStepResult res;
  const bool with_grad = grad != nullptr;
  std::vector<PerFlip<Mat3>> d_fwd(b, {Mat3::Zero(), Mat3::Zero()}), d_inv(b, {Mat3::Zero(), Mat3::Zero()});
  if (opt.flips) {
    std::vector<PerFlip<FeatureMap<T>>> tgt(b);
    std::vector<PerFlip<Mat3>> fwd(b), inv(b);
    for (std::size_t k = 0; k < b; ++k) {
      for (int f = 0; f < 2; ++f) {
        tgt[k][f] = flip(batch[k], kFlipConfigs[f]);
        fwd[k][f] = states[k][f].composed;
        inv[k][f] = states[k][f].composed_inverse;
      }
    }
    auto fl = ic_loss_flips<T>(tgt, fwd, inv, with_grad);
    res.loss = fl.loss;
    res.identity_target_loss = fl.identity_target_loss;
    if (with_grad) {
      d_fwd = std::move(fl.d_forward);
      d_inv = std::move(fl.d_inverse);
    }
    res.flips = assign_flips(b, fl.selected);
  } else {
    std::vector<Mat3> fwd(b), inv(b);
    for (std::size_t k = 0; k < b; ++k) {
      fwd[k] = states[k][0].composed;
      inv[k] = states[k][0].composed_inverse;
    }
    auto il = ic_loss<T>(batch, fwd, inv, with_grad);
    res.loss = il.loss;
    if (with_grad) {
      for (std::size_t k = 0; k < b; ++k) {
        d_fwd[k][0] = il.d_forward[k];
        d_inv[k][0] = il.d_inverse[k];
      }
    }
  }
  if (opt.record_transforms) {
    for (std::size_t k = 0; k < b; ++k) {
      for (int f = 0; f < configs; ++f) res.transforms.push_back(states[k][f].transform());
    }
  }

  std::vector<Model<T>> grads;
  if (with_grad) grads.assign(b, model.zeros_like());
  std::vector<double> ae_terms(b, 0.0);
  detail::parallel_for(b, opt.threads, [&](std::size_t k) {
    FeatureMap<T> d_code(codes[k].channels(), codes[k].height(), codes[k].width());
    if (with_grad) {
      for (int f = 0; f < configs; ++f) {
        FeatureMap<T> d_oriented(d_code.channels(), d_code.height(), d_code.width());
        ic_stn_backward(model, flip(codes[k], kFlipConfigs[f]), states[k][f], d_fwd[k][f], d_inv[k][f], grads[k],
                        d_oriented);
        d_code += flip(d_oriented, kFlipConfigs[f]);
      }
    }
    if (opt.freeze_ae) return;
    AeTape<T> dtape;
    const FeatureMap<T> rec = model.decode(codes[k], &dtape);
    FeatureMap<T> d_rec(rec.channels(), rec.height(), rec.width());
    for (std::size_t q = 0; q < rec.size(); ++q) {
      const double diff = static_cast<double>(rec.values()[q]) - static_cast<double>(batch[k].values()[q]);
      ae_terms[k] += diff * diff;
      d_rec.values()[q] = static_cast<T>(2.0 * diff);
    }
    if (with_grad) {
      d_code += model.decode_backward(dtape, d_rec, grads[k]);
      model.encode_backward(tapes[k], d_code, grads[k]);
    }
  });
  for (std::size_t k = 0; k < b; ++k) {
    res.ae_loss += ae_terms[k];
    if (with_grad) add_into(*grad, grads[k]);
  }
  return res;
}

/// AE pretraining followed by the joint phase (ψ_AE + ψ_align). The
/// reconstruction term stays in the joint objective unless `freeze_ae`.
inline TrainResult train(std::span<const FeatureMap<float>> masked, const TrainConfig& cfg,
                         const std::function<void(const EpochLog&)>& on_epoch = {}) {
  cfg.validate();
  const std::size_t n = masked.size();
  if (n < 2) throw Error(ErrorCode::invalid_input, "training needs at least 2 images");
  TrainResult out;
  out.model = detail::build_model(masked.front().channels(), cfg);
  Model<float>& model = out.model;
  out.ae_log = pretrain_ae(model, masked, cfg);
  out.baseline_loss = identity_baseline_loss(masked);

  auto params = cfg.freeze_ae ? [&] {
    auto refs = model.parameters();
    std::erase_if(refs, [](const ParamRef<float>& p) { return p.name.rfind("loc.", 0) != 0; });
    return refs;
  }() : model.parameters();
  Adam<float> adam(params);
  std::mt19937_64 rng(cfg.seed ^ 0x10137ULL);
  std::vector<FlipConfig> previous_flips(n, FlipConfig::identity);
  GroupFamily family = curriculum_family(0, cfg);

  for (int epoch = 0; epoch < cfg.joint_epochs; ++epoch) {
    const GroupFamily next = curriculum_family(epoch, cfg);
    if (next != family) {
      if (cfg.promote_on_switch) promote_head(model, adam, family, next);
      family = next;
    }
    const double lr = step_lr(cfg.learning_rate, cfg.lr_decay, cfg.lr_step, epoch);
    EpochLog elog;
    elog.epoch = epoch;
    elog.lr = lr;
    elog.family = family;
    std::vector<FlipConfig> epoch_flips = previous_flips;
    JointOptions options;
    options.family = family;
    options.recurrences = cfg.recurrences;
    options.flips = cfg.flips_enabled;
    options.freeze_ae = cfg.freeze_ae;
    options.parameterization = cfg.parameterization;
    options.threads = cfg.threads;
    options.record_transforms = cfg.record_transforms;

    for (const auto& batch : detail::make_batches(n, cfg.batch_size, rng)) {
      std::vector<FeatureMap<float>> maps;
      for (std::size_t idx : batch) maps.push_back(masked[idx]);
      Model<float> grad = model.zeros_like();
      const auto step = joint_step<float>(model, maps, options, &grad);
      elog.loss += step.loss;
      elog.identity_target_loss += step.identity_target_loss;
      elog.ae_loss += step.ae_loss;
      if (!std::isfinite(step.loss) || !std::isfinite(step.ae_loss)) {
        throw Error(ErrorCode::non_finite, "joint loss is not finite at epoch " + std::to_string(epoch) +
                                               " (lr=" + std::to_string(lr) + ")");
      }
      if (cfg.flips_enabled) {
        for (std::size_t k = 0; k < batch.size(); ++k) epoch_flips[batch[k]] = step.flips[k];
      }
      if (cfg.record_transforms) {
        for (const auto& t : step.transforms) elog.transforms.push_back(t);
      }
      auto grad_refs = grad.parameters();
      if (cfg.freeze_ae) {
        std::erase_if(grad_refs, [](const ParamRef<float>& p) { return p.name.rfind("loc.", 0) != 0; });
      }
      adam.step(params, grad_refs, lr);
    }
    for (std::size_t i = 0; i < n; ++i) elog.flip_switches += epoch_flips[i] != previous_flips[i] ? 1 : 0;
    previous_flips = epoch_flips;
    if (on_epoch) on_epoch(elog);
    out.joint_log.push_back(std::move(elog));
  }

  AlignOptions opt;
  opt.family = cfg.joint_epochs > 0 ? family : final_family(cfg);
  opt.recurrences = cfg.recurrences;
  opt.flips = cfg.flips_enabled;
  opt.parameterization = cfg.parameterization;
  opt.threads = cfg.threads;
  out.alignment = align_collection(model, masked, opt);
  out.final_loss = total_alignment_loss(out.alignment);
  return out;
}

}  // namespace liealign
