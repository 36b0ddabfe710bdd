#pragma once

// The channel autoencoder (K→3→K) and the localization network, built from
// a handful of primitives with hand-written backward passes.

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "liealign/error.hpp"
#include "liealign/feature_map.hpp"
#include "liealign/tensor_file.hpp"

namespace liealign {

// ---------------------------------------------------------------------------
// Primitives
// ---------------------------------------------------------------------------

struct ConvSpec {
  int in = 1;
  int out = 1;
  int kernel = 3;
  int stride = 1;
  int pad = 1;

  [[nodiscard]] int out_extent(int extent) const { return (extent + 2 * pad - kernel) / stride + 1; }
  [[nodiscard]] std::size_t weight_count() const {
    return static_cast<std::size_t>(out) * in * kernel * kernel;
  }
};

namespace detail {

inline int floor_div(int a, int b) { return a >= 0 ? a / b : -((-a + b - 1) / b); }
inline int ceil_div(int a, int b) { return -floor_div(-a, b); }

/// Range of output positions whose receptive tap `k` lands inside [0, extent).
inline std::pair<int, int> valid_range(int k, int extent, int out_extent, int stride, int pad) {
  const int lo = std::max(0, ceil_div(pad - k, stride));
  const int hi = std::min(out_extent, floor_div(extent - 1 + pad - k, stride) + 1);
  return {lo, hi};
}

}  // namespace detail

template <typename T>
struct Conv2d {
  ConvSpec spec;
  std::vector<T> weight;  // out×in×k×k
  std::vector<T> bias;    // out

  Conv2d() = default;
  explicit Conv2d(ConvSpec s) : spec(s), weight(s.weight_count(), T(0)), bias(static_cast<std::size_t>(s.out), T(0)) {}

  [[nodiscard]] std::size_t param_count() const { return weight.size() + bias.size(); }

  [[nodiscard]] T w(int co, int ci, int ky, int kx) const {
    return weight[((static_cast<std::size_t>(co) * spec.in + ci) * spec.kernel + ky) * spec.kernel + kx];
  }

  [[nodiscard]] FeatureMap<T> forward(const FeatureMap<T>& x) const {
    if (x.channels() != spec.in) {
      throw Error(ErrorCode::shape_mismatch, "conv2d expects " + std::to_string(spec.in) + " input channels, got " +
                                                 std::to_string(x.channels()));
    }
    const int h = x.height(), wd = x.width();
    const int oh = spec.out_extent(h), ow = spec.out_extent(wd);
    const int s = spec.stride, k = spec.kernel;
    FeatureMap<T> y(spec.out, oh, ow);
    for (int co = 0; co < spec.out; ++co) {
      T* out = y.plane(co).data();
      std::fill(out, out + y.plane_size(), bias[co]);
      for (int ci = 0; ci < spec.in; ++ci) {
        const T* in = x.plane(ci).data();
        for (int ky = 0; ky < k; ++ky) {
          const auto [oy0, oy1] = detail::valid_range(ky, h, oh, s, spec.pad);
          for (int kx = 0; kx < k; ++kx) {
            const auto [ox0, ox1] = detail::valid_range(kx, wd, ow, s, spec.pad);
            const T wv = w(co, ci, ky, kx);
            for (int oy = oy0; oy < oy1; ++oy) {
              const T* row = in + static_cast<std::ptrdiff_t>(oy * s + ky - spec.pad) * wd + (kx - spec.pad);
              T* orow = out + static_cast<std::ptrdiff_t>(oy) * ow;
              for (int ox = ox0; ox < ox1; ++ox) orow[ox] += wv * row[ox * s];
            }
          }
        }
      }
    }
    return y;
  }

  /// Accumulates parameter gradients into `grad`; writes the input gradient
  /// to `dx` when non-null.
  void backward(const FeatureMap<T>& x, const FeatureMap<T>& dy, Conv2d& grad, FeatureMap<T>* dx) const {
    const int h = x.height(), wd = x.width();
    const int oh = dy.height(), ow = dy.width();
    const int s = spec.stride, k = spec.kernel;
    if (dy.channels() != spec.out || oh != spec.out_extent(h) || ow != spec.out_extent(wd)) {
      throw Error(ErrorCode::shape_mismatch, "conv2d backward: upstream gradient shape");
    }
    if (dx != nullptr) *dx = FeatureMap<T>(spec.in, h, wd);
    for (int co = 0; co < spec.out; ++co) {
      const T* g = dy.plane(co).data();
      T bsum = T(0);
      for (std::size_t p = 0; p < dy.plane_size(); ++p) bsum += g[p];
      grad.bias[co] += bsum;
      for (int ci = 0; ci < spec.in; ++ci) {
        const T* in = x.plane(ci).data();
        T* din = dx != nullptr ? dx->plane(ci).data() : nullptr;
        for (int ky = 0; ky < k; ++ky) {
          const auto [oy0, oy1] = detail::valid_range(ky, h, oh, s, spec.pad);
          for (int kx = 0; kx < k; ++kx) {
            const auto [ox0, ox1] = detail::valid_range(kx, wd, ow, s, spec.pad);
            const std::size_t widx = ((static_cast<std::size_t>(co) * spec.in + ci) * k + ky) * k + kx;
            const T wv = weight[widx];
            T acc = T(0);
            for (int oy = oy0; oy < oy1; ++oy) {
              const std::ptrdiff_t base = static_cast<std::ptrdiff_t>(oy * s + ky - spec.pad) * wd + (kx - spec.pad);
              const T* grow = g + static_cast<std::ptrdiff_t>(oy) * ow;
              const T* row = in + base;
              for (int ox = ox0; ox < ox1; ++ox) acc += grow[ox] * row[ox * s];
              if (din != nullptr) {
                T* drow = din + base;
                for (int ox = ox0; ox < ox1; ++ox) drow[ox * s] += wv * grow[ox];
              }
            }
            grad.weight[widx] += acc;
          }
        }
      }
    }
  }
};

template <typename T>
FeatureMap<T> relu(FeatureMap<T> x) {
  for (auto& v : x.values()) v = v > T(0) ? v : T(0);
  return x;
}

/// Gradient through ReLU given its output `y`.
template <typename T>
FeatureMap<T> relu_backward(const FeatureMap<T>& y, FeatureMap<T> dy) {
  for (std::size_t k = 0; k < dy.size(); ++k) {
    if (!(y.values()[k] > T(0))) dy.values()[k] = T(0);
  }
  return dy;
}

namespace detail {

inline std::pair<int, int> pool_bin(int i, int extent, int bins) {
  return {(i * extent) / bins, ((i + 1) * extent + bins - 1) / bins};
}

}  // namespace detail

/// Adaptive average pooling to a bins×bins grid; bins = 1 is global pooling.
template <typename T>
FeatureMap<T> adaptive_avg_pool(const FeatureMap<T>& x, int bins) {
  if (bins < 1 || bins > x.height() || bins > x.width()) {
    throw Error(ErrorCode::shape_mismatch, "pool grid " + std::to_string(bins) + " does not fit " + x.shape_string());
  }
  FeatureMap<T> y(x.channels(), bins, bins);
  for (int c = 0; c < x.channels(); ++c) {
    for (int by = 0; by < bins; ++by) {
      const auto [y0, y1] = detail::pool_bin(by, x.height(), bins);
      for (int bx = 0; bx < bins; ++bx) {
        const auto [x0, x1] = detail::pool_bin(bx, x.width(), bins);
        T acc = T(0);
        for (int yy = y0; yy < y1; ++yy) {
          for (int xx = x0; xx < x1; ++xx) acc += x(c, yy, xx);
        }
        y(c, by, bx) = acc / static_cast<T>((y1 - y0) * (x1 - x0));
      }
    }
  }
  return y;
}

template <typename T>
FeatureMap<T> adaptive_avg_pool_backward(const FeatureMap<T>& dy, int height, int width) {
  const int bins = dy.height();
  FeatureMap<T> dx(dy.channels(), height, width);
  for (int c = 0; c < dy.channels(); ++c) {
    for (int by = 0; by < bins; ++by) {
      const auto [y0, y1] = detail::pool_bin(by, height, bins);
      for (int bx = 0; bx < bins; ++bx) {
        const auto [x0, x1] = detail::pool_bin(bx, width, bins);
        const T g = dy(c, by, bx) / static_cast<T>((y1 - y0) * (x1 - x0));
        for (int yy = y0; yy < y1; ++yy) {
          for (int xx = x0; xx < x1; ++xx) dx(c, yy, xx) += g;
        }
      }
    }
  }
  return dx;
}

template <typename T>
struct Linear {
  int in = 0;
  int out = 0;
  std::vector<T> weight;  // out×in
  std::vector<T> bias;

  Linear() = default;
  Linear(int in_features, int out_features)
      : in(in_features), out(out_features),
        weight(static_cast<std::size_t>(in_features) * out_features, T(0)),
        bias(static_cast<std::size_t>(out_features), T(0)) {}

  [[nodiscard]] std::size_t param_count() const { return weight.size() + bias.size(); }

  [[nodiscard]] std::vector<T> forward(std::span<const T> x) const {
    if (static_cast<int>(x.size()) != in) throw Error(ErrorCode::shape_mismatch, "linear: input size");
    std::vector<T> y(bias);
    for (int o = 0; o < out; ++o) {
      const T* row = weight.data() + static_cast<std::size_t>(o) * in;
      T acc = T(0);
      for (int i = 0; i < in; ++i) acc += row[i] * x[i];
      y[o] += acc;
    }
    return y;
  }

  std::vector<T> backward(std::span<const T> x, std::span<const T> dy, Linear& grad) const {
    std::vector<T> dx(static_cast<std::size_t>(in), T(0));
    for (int o = 0; o < out; ++o) {
      const T g = dy[o];
      if (g == T(0)) continue;
      grad.bias[o] += g;
      const T* row = weight.data() + static_cast<std::size_t>(o) * in;
      T* grow = grad.weight.data() + static_cast<std::size_t>(o) * in;
      for (int i = 0; i < in; ++i) {
        grow[i] += g * x[i];
        dx[i] += g * row[i];
      }
    }
    return dx;
  }
};

// ---------------------------------------------------------------------------
// Architectures
// ---------------------------------------------------------------------------

struct AutoencoderSpec {
  int channels = 25;  // K
  int hidden = 7;
  int latent = 3;
  int kernel = 3;
};

struct LocNetSpec {
  int input = 3;
  int width1 = 16;
  int width2 = 20;
  int kernel = 5;
  int stride = 2;
  int pool = 4;  // pooled grid side; 1 = global average pooling
  int outputs = 8;
};

template <typename T>
struct AeTape {
  FeatureMap<T> input;
  FeatureMap<T> hidden;  // post-ReLU
};

template <typename T>
struct LocTape {
  FeatureMap<T> input;
  FeatureMap<T> act1;  // post-ReLU
  FeatureMap<T> act2;  // post-ReLU
  FeatureMap<T> pooled;
};

/// A parameter tensor exposed for optimisation and serialisation.
template <typename T>
struct ParamRef {
  std::string name;
  std::vector<std::uint32_t> dims;
  std::vector<T>* values;
};

template <typename T>
struct Model {
  AutoencoderSpec ae;
  LocNetSpec loc;
  Conv2d<T> enc1, enc2;  // ψ_enc: K → hidden → 3
  Conv2d<T> dec1, dec2;  // ψ_dec: 3 → hidden → K
  Conv2d<T> loc1, loc2;
  Linear<T> head;        // zero-initialised: the untrained model predicts θ = 0

  Model() : Model(AutoencoderSpec{}, LocNetSpec{}) {}

  Model(AutoencoderSpec ae_spec, LocNetSpec loc_spec) : ae(ae_spec), loc(loc_spec) {
    const int p = ae.kernel / 2;
    enc1 = Conv2d<T>({ae.channels, ae.hidden, ae.kernel, 1, p});
    enc2 = Conv2d<T>({ae.hidden, ae.latent, ae.kernel, 1, p});
    dec1 = Conv2d<T>({ae.latent, ae.hidden, ae.kernel, 1, p});
    dec2 = Conv2d<T>({ae.hidden, ae.channels, ae.kernel, 1, p});
    const int lp = loc.kernel / 2;
    loc1 = Conv2d<T>({loc.input, loc.width1, loc.kernel, loc.stride, lp});
    loc2 = Conv2d<T>({loc.width1, loc.width2, loc.kernel, loc.stride, lp});
    head = Linear<T>(loc.width2 * loc.pool * loc.pool, loc.outputs);
  }

  /// Kaiming-uniform conv weights, zero biases, zero head.
  void initialize(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    for (Conv2d<T>* conv : {&enc1, &enc2, &dec1, &dec2, &loc1, &loc2}) {
      const double fan_in = static_cast<double>(conv->spec.in) * conv->spec.kernel * conv->spec.kernel;
      std::uniform_real_distribution<double> u(-std::sqrt(6.0 / fan_in), std::sqrt(6.0 / fan_in));
      for (auto& v : conv->weight) v = static_cast<T>(u(rng));
      std::fill(conv->bias.begin(), conv->bias.end(), T(0));
    }
    std::fill(head.weight.begin(), head.weight.end(), T(0));
    std::fill(head.bias.begin(), head.bias.end(), T(0));
  }

  /// Same architecture, all parameters zero (gradient accumulator).
  [[nodiscard]] Model zeros_like() const { return Model(ae, loc); }

  [[nodiscard]] std::vector<ParamRef<T>> parameters() {
    auto conv = [](std::vector<ParamRef<T>>& out, const std::string& name, Conv2d<T>& c) {
      const auto& s = c.spec;
      out.push_back({name + ".weight",
                     {static_cast<std::uint32_t>(s.out), static_cast<std::uint32_t>(s.in),
                      static_cast<std::uint32_t>(s.kernel), static_cast<std::uint32_t>(s.kernel)},
                     &c.weight});
      out.push_back({name + ".bias", {static_cast<std::uint32_t>(s.out)}, &c.bias});
    };
    std::vector<ParamRef<T>> out;
    conv(out, "enc.conv1", enc1);
    conv(out, "enc.conv2", enc2);
    conv(out, "dec.conv1", dec1);
    conv(out, "dec.conv2", dec2);
    conv(out, "loc.conv1", loc1);
    conv(out, "loc.conv2", loc2);
    out.push_back({"loc.head.weight",
                   {static_cast<std::uint32_t>(head.out), static_cast<std::uint32_t>(head.in)},
                   &head.weight});
    out.push_back({"loc.head.bias", {static_cast<std::uint32_t>(head.out)}, &head.bias});
    return out;
  }

  [[nodiscard]] std::size_t autoencoder_params() const {
    return enc1.param_count() + enc2.param_count() + dec1.param_count() + dec2.param_count();
  }
  [[nodiscard]] std::size_t locnet_params() const {
    return loc1.param_count() + loc2.param_count() + head.param_count();
  }
  [[nodiscard]] std::size_t total_params() const { return autoencoder_params() + locnet_params(); }

  template <typename U>
  [[nodiscard]] Model<U> cast() const {
    Model<U> out(ae, loc);
    Model copy = *this;
    auto src = copy.parameters();
    auto dst = out.parameters();
    for (std::size_t k = 0; k < src.size(); ++k) {
      for (std::size_t i = 0; i < src[k].values->size(); ++i) {
        (*dst[k].values)[i] = static_cast<U>((*src[k].values)[i]);
      }
    }
    return out;
  }

  // -- forward / backward ----------------------------------------------------

  [[nodiscard]] FeatureMap<T> encode(const FeatureMap<T>& v, AeTape<T>* tape = nullptr) const {
    if (v.channels() != ae.channels) {
      throw Error(ErrorCode::shape_mismatch, "encoder expects " + std::to_string(ae.channels) + " channels, got " +
                                                 std::to_string(v.channels()));
    }
    FeatureMap<T> hidden = relu(enc1.forward(v));
    FeatureMap<T> u = enc2.forward(hidden);
    if (tape != nullptr) {
      tape->input = v;
      tape->hidden = std::move(hidden);
    }
    return u;
  }

  [[nodiscard]] FeatureMap<T> decode(const FeatureMap<T>& u, AeTape<T>* tape = nullptr) const {
    if (u.channels() != ae.latent) {
      throw Error(ErrorCode::shape_mismatch, "decoder expects " + std::to_string(ae.latent) + " channels, got " +
                                                 std::to_string(u.channels()));
    }
    FeatureMap<T> hidden = relu(dec1.forward(u));
    FeatureMap<T> v = dec2.forward(hidden);
    if (tape != nullptr) {
      tape->input = u;
      tape->hidden = std::move(hidden);
    }
    return v;
  }

  /// Encoder parameters only; the encoder input is data, so no dx.
  void encode_backward(const AeTape<T>& tape, const FeatureMap<T>& du, Model& grad) const {
    FeatureMap<T> dh;
    enc2.backward(tape.hidden, du, grad.enc2, &dh);
    dh = relu_backward(tape.hidden, std::move(dh));
    enc1.backward(tape.input, dh, grad.enc1, nullptr);
  }

  /// Returns the gradient w.r.t. the decoder input.
  FeatureMap<T> decode_backward(const AeTape<T>& tape, const FeatureMap<T>& dv, Model& grad) const {
    FeatureMap<T> dh;
    dec2.backward(tape.hidden, dv, grad.dec2, &dh);
    dh = relu_backward(tape.hidden, std::move(dh));
    FeatureMap<T> du;
    dec1.backward(tape.input, dh, grad.dec1, &du);
    return du;
  }

  /// ψ_loc: raw 8-vector before any family mask.
  [[nodiscard]] std::vector<T> localize(const FeatureMap<T>& u, LocTape<T>* tape = nullptr) const {
    if (u.channels() != loc.input) {
      throw Error(ErrorCode::shape_mismatch, "localization network expects " + std::to_string(loc.input) +
                                                 " channels, got " + std::to_string(u.channels()));
    }
    FeatureMap<T> a1 = relu(loc1.forward(u));
    FeatureMap<T> a2 = relu(loc2.forward(a1));
    FeatureMap<T> pooled = adaptive_avg_pool(a2, loc.pool);
    std::vector<T> theta = head.forward(pooled.values());
    if (tape != nullptr) {
      tape->input = u;
      tape->act1 = std::move(a1);
      tape->act2 = std::move(a2);
      tape->pooled = std::move(pooled);
    }
    return theta;
  }

  /// Returns the gradient w.r.t. the localization input.
  FeatureMap<T> localize_backward(const LocTape<T>& tape, std::span<const T> d_theta, Model& grad) const {
    const std::vector<T> dp = head.backward(tape.pooled.values(), d_theta, grad.head);
    FeatureMap<T> dpooled(tape.pooled.channels(), tape.pooled.height(), tape.pooled.width());
    dpooled.values() = dp;
    FeatureMap<T> da2 = adaptive_avg_pool_backward(dpooled, tape.act2.height(), tape.act2.width());
    da2 = relu_backward(tape.act2, std::move(da2));
    FeatureMap<T> da1;
    loc2.backward(tape.act1, da2, grad.loc2, &da1);
    da1 = relu_backward(tape.act1, std::move(da1));
    FeatureMap<T> du;
    loc1.backward(tape.input, da1, grad.loc1, &du);
    return du;
  }
};

template <typename T>
void add_into(Model<T>& acc, Model<T>& term) {
  auto a = acc.parameters();
  auto b = term.parameters();
  for (std::size_t k = 0; k < a.size(); ++k) {
    auto& av = *a[k].values;
    const auto& bv = *b[k].values;
    for (std::size_t i = 0; i < av.size(); ++i) av[i] += bv[i];
  }
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

inline std::vector<NamedTensor> model_tensors(Model<float>& model) {
  std::vector<NamedTensor> out;
  for (auto& p : model.parameters()) out.push_back({p.name, p.dims, *p.values});
  const auto meta = [&](const std::string& name, double v) {
    out.push_back({"meta." + name, {1}, {static_cast<float>(v)}});
  };
  meta("loc_stride", model.loc.stride);
  meta("loc_pool", model.loc.pool);
  return out;
}

inline Model<float> model_from_tensors(std::span<const NamedTensor> tensors) {
  const auto& e1 = find_tensor(tensors, "enc.conv1.weight");
  const auto& e2 = find_tensor(tensors, "enc.conv2.weight");
  const auto& l1 = find_tensor(tensors, "loc.conv1.weight");
  const auto& l2 = find_tensor(tensors, "loc.conv2.weight");
  const auto& hd = find_tensor(tensors, "loc.head.weight");
  if (e1.dims.size() != 4 || e2.dims.size() != 4 || l1.dims.size() != 4 || l2.dims.size() != 4 ||
      hd.dims.size() != 2) {
    throw Error(ErrorCode::format, "checkpoint tensors have unexpected ranks");
  }
  AutoencoderSpec ae;
  ae.hidden = static_cast<int>(e1.dims[0]);
  ae.channels = static_cast<int>(e1.dims[1]);
  ae.kernel = static_cast<int>(e1.dims[2]);
  ae.latent = static_cast<int>(e2.dims[0]);
  LocNetSpec loc;
  loc.input = static_cast<int>(l1.dims[1]);
  loc.width1 = static_cast<int>(l1.dims[0]);
  loc.kernel = static_cast<int>(l1.dims[2]);
  loc.width2 = static_cast<int>(l2.dims[0]);
  loc.outputs = static_cast<int>(hd.dims[0]);
  loc.stride = static_cast<int>(find_tensor(tensors, "meta.loc_stride").values.at(0));
  loc.pool = static_cast<int>(find_tensor(tensors, "meta.loc_pool").values.at(0));
  Model<float> model(ae, loc);
  for (auto& p : model.parameters()) {
    const auto& t = find_tensor(tensors, p.name);
    if (t.dims != p.dims) throw Error(ErrorCode::format, "tensor '" + p.name + "' has unexpected dims");
    *p.values = t.values;
  }
  return model;
}

}  // namespace liealign
