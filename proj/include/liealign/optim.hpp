#pragma once

#include <cmath>
#include <string>
#include <string_view>
#include <vector>

#include "liealign/error.hpp"
#include "liealign/nets.hpp"

namespace liealign {

/// lr(epoch) = lr0 · γ^⌊epoch / step⌋
inline double step_lr(double lr0, double gamma, int step_size, int epoch) {
  if (step_size <= 0) return lr0;
  return lr0 * std::pow(gamma, static_cast<double>(epoch / step_size));
}

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Adam over a fixed list of parameter tensors (matched by position).
template <typename T>
class Adam {
 public:
  Adam() = default;
  explicit Adam(const std::vector<ParamRef<T>>& params, AdamOptions opts = {}) : opts_(opts) {
    for (const auto& p : params) {
      names_.push_back(p.name);
      m_.emplace_back(p.values->size(), 0.0);
      v_.emplace_back(p.values->size(), 0.0);
    }
  }

  /// Throws on non-finite gradients before touching any parameter.
  void step(std::vector<ParamRef<T>>& params, const std::vector<ParamRef<T>>& grads, double lr) {
    if (params.size() != m_.size() || grads.size() != m_.size()) {
      throw Error(ErrorCode::shape_mismatch, "Adam: parameter list changed shape");
    }
    for (const auto& g : grads) {
      for (T v : *g.values) {
        if (!std::isfinite(static_cast<double>(v))) {
          throw Error(ErrorCode::non_finite, "non-finite gradient in '" + g.name + "'");
        }
      }
    }
    ++t_;
    const double c1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params.size(); ++k) {
      auto& p = *params[k].values;
      const auto& g = *grads[k].values;
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double gi = static_cast<double>(g[i]);
        m[i] = opts_.beta1 * m[i] + (1.0 - opts_.beta1) * gi;
        v[i] = opts_.beta2 * v[i] + (1.0 - opts_.beta2) * gi * gi;
        const double update = lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + opts_.epsilon);
        p[i] = static_cast<T>(static_cast<double>(p[i]) - update);
      }
    }
  }

  /// Clears the moment estimates of one tensor.
  void reset(std::string_view name) {
    for (std::size_t k = 0; k < names_.size(); ++k) {
      if (names_[k] == name) {
        std::fill(m_[k].begin(), m_[k].end(), 0.0);
        std::fill(v_[k].begin(), v_[k].end(), 0.0);
      }
    }
  }

  [[nodiscard]] long steps() const noexcept { return t_; }

 private:
  AdamOptions opts_;
  std::vector<std::string> names_;
  std::vector<std::vector<double>> m_, v_;
  long t_ = 0;
};

}  // namespace liealign
