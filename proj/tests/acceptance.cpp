// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
// failure. Runs the full synthetic schedules, so it takes a few minutes.

#include <chrono>
#include <cstdio>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "liealign/checkpoint.hpp"
#include "liealign/eval.hpp"
#include "test_support.hpp"

using namespace liealign;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

void fill_random(std::vector<double>& v, std::mt19937_64& rng, double scale) {
  std::normal_distribution<double> g(0, scale);
  for (auto& x : v) x = g(rng);
}

double dot(const FeatureMap<double>& a, const FeatureMap<double>& b) {
  double s = 0;
  for (std::size_t k = 0; k < a.size(); ++k) s += a.values()[k] * b.values()[k];
  return s;
}

/// Collects analytic/numeric pairs for one check and reports its relative error.
struct GradCheck {
  std::string name;
  std::vector<double> ana, num;
  void add(double a, const std::function<double()>& f, double& x, double h = 1e-5) {
    ana.push_back(a);
    num.push_back(test::central_difference(f, x, h));
  }
  [[nodiscard]] double error() const { return test::relative_error(ana, num); }
};

// ---------------------------------------------------------------------------

Outcome lie_oracle() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(100);
  double worst_exp = 0.0, worst_inv = 0.0, worst_det = 0.0;
  for (auto fam : {GroupFamily::SE2, GroupFamily::AFF2, GroupFamily::SL3}) {
    for (int n = 0; n < 1000; ++n) {
      const AlgebraParams p(test::random_theta(rng, 1.0), fam);
      const Mat3 a = embed(p).m;
      const Mat3 e = expm_matrix(a);
      worst_exp = std::max(worst_exp, (e - test::series_expm(a)).cwiseAbs().maxCoeff());
      worst_inv = std::max(worst_inv, (e * expm_matrix(-a) - Mat3::Identity()).cwiseAbs().maxCoeff());
      if (fam == GroupFamily::SL3) worst_det = std::max(worst_det, std::abs(e.determinant() - 1.0));
    }
  }
  const double secs = seconds_since(t0);
  return {worst_exp < 1e-8 && worst_inv < 1e-8 && worst_det <= 1e-6 && secs < 5.0,
          fmt("max|expm-oracle|=%.2e max|exp(A)exp(-A)-I|=%.2e max|det-1|=%.2e in %.2fs", worst_exp, worst_inv,
              worst_det, secs)};
}

Outcome gradient_suite() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(200);
  std::vector<GradCheck> primitives;

  {  // convolution, stride 1 and 2
    GradCheck c{"conv2d", {}, {}};
    for (int stride : {1, 2}) {
      const ConvSpec spec{2, 3, 3, stride, 1};
      Conv2d<double> conv(spec);
      fill_random(conv.weight, rng, 0.5);
      fill_random(conv.bias, rng, 0.5);
      auto x = test::random_map(2, 7, 6, rng);
      const auto probe = test::random_map(3, spec.out_extent(7), spec.out_extent(6), rng);
      const auto f = [&] { return dot(conv.forward(x), probe); };
      Conv2d<double> g(spec);
      FeatureMap<double> dx;
      conv.backward(x, probe, g, &dx);
      for (std::size_t i = 0; i < x.size(); ++i) c.add(dx.values()[i], f, x.values()[i]);
      for (std::size_t i = 0; i < conv.weight.size(); ++i) c.add(g.weight[i], f, conv.weight[i]);
      for (std::size_t i = 0; i < conv.bias.size(); ++i) c.add(g.bias[i], f, conv.bias[i]);
    }
    primitives.push_back(c);
  }
  {  // ReLU followed by adaptive pooling
    GradCheck c{"relu+pool", {}, {}};
    auto x = test::random_map(2, 7, 5, rng);
    const auto probe = test::random_map(2, 3, 3, rng);
    const auto f = [&] { return dot(adaptive_avg_pool(relu(x), 3), probe); };
    const auto dx = relu_backward(relu(x), adaptive_avg_pool_backward(probe, 7, 5));
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (std::abs(x.values()[i]) > 1e-3) c.add(dx.values()[i], f, x.values()[i]);
    }
    primitives.push_back(c);
  }
  {
    GradCheck c{"linear", {}, {}};
    Linear<double> lin(6, 4);
    fill_random(lin.weight, rng, 0.5);
    fill_random(lin.bias, rng, 0.5);
    std::vector<double> in(6), up(4);
    fill_random(in, rng, 1.0);
    fill_random(up, rng, 1.0);
    const auto f = [&] {
      const auto o = lin.forward(in);
      double s = 0;
      for (int k = 0; k < 4; ++k) s += o[k] * up[k];
      return s;
    };
    Linear<double> g(6, 4);
    const auto dx = lin.backward(in, up, g);
    for (std::size_t i = 0; i < in.size(); ++i) c.add(dx[i], f, in[i]);
    for (std::size_t i = 0; i < lin.weight.size(); ++i) c.add(g.weight[i], f, lin.weight[i]);
    primitives.push_back(c);
  }
  {  // bilinear sampling: input values and the transform through the grid
    GradCheck c{"warp", {}, {}};
    auto fmap = test::smooth_map(2, 9, 8, rng);
    const auto probe = test::random_map(2, 9, 8, rng);
    Mat3 t = exp_params(AlgebraParams(test::random_theta(rng, 0.2), GroupFamily::SL3)).t;
    const auto f = [&] { return dot(warp(fmap, t), probe); };
    const SampleGrid g = make_grid(t, 9, 8);
    FeatureMap<double> din(2, 9, 8);
    std::vector<double> dcoords;
    sample_backward(fmap, g, probe, &din, &dcoords);
    const Mat3 dt = grid_backward(t, 9, 8, dcoords);
    for (std::size_t i = 0; i < fmap.size(); i += 3) c.add(din.values()[i], f, fmap.values()[i]);
    for (int e = 0; e < 9; ++e) c.add(dt.data()[e], f, t.data()[e], 1e-7);
    primitives.push_back(c);
  }
  {  // matrix exponential VJP
    GradCheck c{"expm", {}, {}};
    for (int n = 0; n < 5; ++n) {
      Mat3 a = embed(AlgebraParams(test::random_theta(rng, 1.0), GroupFamily::SL3)).m;
      const Mat3 up = Mat3::Random();
      const Mat3 d = expm_vjp(a, up);
      const auto f = [&] { return expm_matrix(a).cwiseProduct(up).sum(); };
      for (int e = 0; e < 9; ++e) c.add(d.data()[e], f, a.data()[e], 1e-6);
    }
    primitives.push_back(c);
  }
  // Shared small model; random biases keep zero-padded regions off ReLU kinks.
  AutoencoderSpec as;
  as.channels = 4;
  LocNetSpec ls;
  ls.pool = 2;
  Model<double> m(as, ls);
  m.initialize(201);
  for (auto& p : m.parameters()) fill_random(*p.values, rng, p.name.ends_with(".bias") ? 0.1 : 0.3);
  fill_random(m.head.weight, rng, 0.2);
  {
    GradCheck c{"localization net", {}, {}};
    auto u = test::random_map(3, 8, 8, rng);
    std::vector<double> up(8);
    fill_random(up, rng, 1.0);
    const auto f = [&] {
      const auto th = m.localize(u);
      double s = 0;
      for (int k = 0; k < 8; ++k) s += th[k] * up[k];
      return s;
    };
    LocTape<double> tape;
    (void)m.localize(u, &tape);
    Model<double> g = m.zeros_like();
    const auto du = m.localize_backward(tape, up, g);
    for (std::size_t i = 0; i < u.size(); i += 2) c.add(du.values()[i], f, u.values()[i]);
    auto ps = m.parameters();
    auto gs = g.parameters();
    for (std::size_t p = 0; p < ps.size(); ++p) {
      if (ps[p].name.rfind("loc.", 0) != 0) continue;
      for (std::size_t i = 0; i < ps[p].values->size(); i += 7) c.add((*gs[p].values)[i], f, (*ps[p].values)[i]);
    }
    primitives.push_back(c);
  }
  {
    GradCheck c{"autoencoder", {}, {}};
    const std::vector<FeatureMap<double>> v{test::random_map(4, 6, 6, rng)};
    const std::vector<std::size_t> idx{0};
    Model<double> g = m.zeros_like();
    autoencoder_loss<double>(m, v, idx, &g);
    const auto f = [&] { return autoencoder_loss<double>(m, v, idx, nullptr); };
    auto ps = m.parameters();
    auto gs = g.parameters();
    for (std::size_t p = 0; p < ps.size(); ++p) {
      if (ps[p].name.rfind("loc.", 0) == 0) continue;
      for (std::size_t i = 0; i < ps[p].values->size(); i += 3) c.add((*gs[p].values)[i], f, (*ps[p].values)[i]);
    }
    primitives.push_back(c);
  }
  {
    GradCheck c{"pair loss", {}, {}};
    const auto src = test::smooth_map(3, 8, 8, rng), dst = test::smooth_map(3, 8, 8, rng);
    Mat3 s = exp_params(AlgebraParams(test::random_theta(rng, 0.2), GroupFamily::SL3)).t;
    Mat3 ds;
    pair_loss(src, dst, s, &ds);
    const auto f = [&] { return pair_loss(src, dst, s, nullptr); };
    for (int e = 0; e < 9; ++e) c.add(ds.data()[e], f, s.data()[e], 1e-7);
    primitives.push_back(c);
  }
  {
    GradCheck c{"ic-stn cascade", {}, {}};
    auto u = test::smooth_map(3, 8, 8, rng);
    const Mat3 wf = Mat3::Random(), wi = Mat3::Random();
    const auto f = [&] {
      const auto st = ic_stn_forward(m, u, GroupFamily::SL3, 3);
      return st.composed.cwiseProduct(wf).sum() + st.composed_inverse.cwiseProduct(wi).sum();
    };
    const auto st = ic_stn_forward(m, u, GroupFamily::SL3, 3);
    Model<double> g = m.zeros_like();
    FeatureMap<double> du(3, 8, 8);
    ic_stn_backward(m, u, st, wf, wi, g, du);
    for (std::size_t i = 0; i < u.size(); i += 3) c.add(du.values()[i], f, u.values()[i]);
    auto ps = m.parameters();
    auto gs = g.parameters();
    for (std::size_t p = 0; p < ps.size(); ++p) {
      if (ps[p].name.rfind("loc.", 0) != 0) continue;
      for (std::size_t i = 0; i < ps[p].values->size(); i += 11) c.add((*gs[p].values)[i], f, (*ps[p].values)[i]);
    }
    primitives.push_back(c);
  }

  // End to end: the joint objective on a 2-image 8×8 instance, every parameter tensor.
  GradCheck e2e{"end-to-end", {}, {}};
  {
    const std::vector<FeatureMap<double>> batch{test::smooth_map(4, 8, 8, rng), test::smooth_map(4, 8, 8, rng)};
    JointOptions opt;
    opt.family = GroupFamily::SL3;
    opt.recurrences = 2;
    Model<double> g = m.zeros_like();
    joint_step<double>(m, batch, opt, &g);
    const auto f = [&] {
      const auto r = joint_step<double>(m, batch, opt, nullptr);
      return r.loss + r.ae_loss;
    };
    auto ps = m.parameters();
    auto gs = g.parameters();
    for (std::size_t p = 0; p < ps.size(); ++p) {
      for (std::size_t i = 0; i < ps[p].values->size(); i += 5) {
        e2e.add((*gs[p].values)[i], f, (*ps[p].values)[i], 1e-6);
      }
    }
  }

  bool ok = true;
  std::string detail;
  for (const auto& c : primitives) {
    ok = ok && c.error() <= 1e-4;
    detail += fmt("%s %.1e, ", c.name.c_str(), c.error());
  }
  ok = ok && e2e.error() <= 1e-3;
  const double secs = seconds_since(t0);
  ok = ok && secs < 60.0;
  detail += fmt("end-to-end %.1e (%zu entries) in %.1fs", e2e.error(), e2e.ana.size(), secs);
  return {ok, detail};
}

Outcome cascade_bit_identity() {
  std::mt19937_64 rng(300);
  int identical = 0;
  for (int n = 0; n < 50; ++n) {
    const auto f = test::random_map(3, 16, 16, rng);
    std::vector<GroupTransform> ts;
    for (int k = 0; k < 5; ++k) ts.push_back(exp_params(AlgebraParams(test::random_theta(rng, 0.15), GroupFamily::SL3)));
    Mat3 pre = Mat3::Identity();
    for (const auto& t : ts) pre = pre * t.t;
    identical += warp_cascade<double>(f, ts).values() == warp(f, pre).values() ? 1 : 0;
  }
  return {identical == 50, fmt("%d/50 bit-identical", identical)};
}

Outcome parameter_budget() {
  const Model<float> m;
  const auto ae = m.autoencoder_params(), loc = m.locnet_params(), total = m.total_params();
  return {ae >= 2000 && ae <= 4000 && loc >= 10000 && loc <= 16000 && total <= 20000,
          fmt("autoencoder %zu, localization %zu, total %zu", ae, loc, total)};
}

struct SyntheticRun {
  SyntheticSet set;
  TrainResult result;
  double seconds = 0.0;
  std::string json;
};

SyntheticRun run_synthetic(const SyntheticOptions& so, TrainConfig cfg,
                           const std::function<void(const EpochLog&)>& on_epoch = {}) {
  SyntheticRun run;
  run.set = make_synthetic(so);
  Checkpoint ck;
  ck.pca = fit_pca(run.set.collection, cfg.pca_channels);
  const auto masked = reduce_collection(run.set.collection, ck.pca);
  const auto t0 = Clock::now();
  run.result = train(masked, cfg, on_epoch);
  run.seconds = seconds_since(t0);
  ck.model = run.result.model;
  ck.family = run.result.alignment.family;
  ck.recurrences = cfg.recurrences;
  ck.flips = cfg.flips_enabled;
  run.result.alignment.model_hash = checkpoint_hash(encode_checkpoint(ck));
  run.json = to_json(run.result.alignment).dump(2);
  return run;
}

}  // namespace

int main() {
  int failures = 0;
  const auto report = [&](const char* name, const Outcome& o) {
    std::printf("%s  %-28s %s\n", o.pass ? "PASS" : "FAIL", name, o.detail.c_str());
    std::fflush(stdout);
    failures += o.pass ? 0 : 1;
  };

  report("lie-oracle", lie_oracle());
  report("gradient-suite", gradient_suite());
  report("cascade-bit-identity", cascade_bit_identity());
  report("parameter-budget", parameter_budget());

  // Synthetic SE2 benchmark, default 300+400 schedule, single thread.
  SyntheticOptions so;
  TrainConfig cfg;
  cfg.record_transforms = true;
  const auto se2 = run_synthetic(so, cfg);
  {
    const int h = so.height, w = so.width;
    const std::vector<Mat3> id(so.n, Mat3::Identity());
    const double initial = corner_error(id, se2.set.ground_truth, h, w);
    const double final_err = corner_error(effective_transforms(se2.result.alignment), se2.set.ground_truth, h, w);
    const double pck = evaluate_collection(se2.set.collection, se2.result.alignment).mean;
    report("synthetic-alignment",
           {final_err < 2.0 && initial > 5.0 && pck >= 0.9 && se2.seconds < 300.0,
            fmt("corner error %.3f px (initial %.3f px), PCK@0.1 %.3f, %.1fs", final_err, initial, pck, se2.seconds)});
  }
  {
    std::size_t checked = 0, violations = 0;
    for (const auto& e : se2.result.joint_log) {
      if (e.family != GroupFamily::SE2) continue;
      for (const auto& t : e.transforms) {
        ++checked;
        violations += satisfies_group({t.t, GroupFamily::SE2}) ? 0 : 1;
      }
    }
    const bool ends_sl3 = final_family(cfg) == GroupFamily::SL3 && !se2.result.joint_log.empty() &&
                          se2.result.joint_log.back().family == GroupFamily::SL3;
    report("curriculum-invariant",
           {checked > 0 && violations == 0 && ends_sl3,
            fmt("%zu SE2-segment transforms, %zu violations, final family %s", checked, violations,
                std::string(to_string(se2.result.joint_log.back().family)).c_str())});
  }
  {
    const auto again = run_synthetic(so, cfg);
    report("determinism", {again.json == se2.json,
                           fmt("two seeded runs: AlignmentResult JSON %s (%zu bytes)",
                               again.json == se2.json ? "byte-identical" : "differs", se2.json.size())});
  }

  // Flip recovery: every other image mirrored.
  {
    SyntheticOptions fo;
    fo.mirror_half = true;
    TrainConfig fcfg;
    fcfg.flips_enabled = true;
    std::size_t steps = 0, violations = 0;
    const auto run = run_synthetic(fo, fcfg, [&](const EpochLog& e) {
      ++steps;
      violations += e.loss <= e.identity_target_loss ? 0 : 1;
    });
    std::vector<FlipConfig> selected;
    for (const auto& img : run.result.alignment.images) selected.push_back(img.flip);
    const double acc = flip_accuracy(selected, run.set.mirrored);
    report("flip-recovery", {acc >= 0.9 && violations == 0 && steps > 0,
                             fmt("flip accuracy %.3f, flip loss above identity-target on %zu/%zu steps, %.1fs", acc,
                                 violations, steps, run.seconds)});
  }

  std::printf("%s: %d failing criteria\n", failures == 0 ? "ACCEPTED" : "REJECTED", failures);
  return failures == 0 ? 0 : 1;
}
