#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "liealign/training.hpp"
#include "test_support.hpp"

using namespace liealign;

namespace {

void fill_random(std::vector<double>& v, std::mt19937_64& rng, double scale) {
  std::normal_distribution<double> g(0, scale);
  for (auto& x : v) x = g(rng);
}

Model<double> small_model(int channels, std::uint64_t seed, double head_scale) {
  AutoencoderSpec as;
  as.channels = channels;
  LocNetSpec ls;
  ls.pool = 2;
  Model<double> m(as, ls);
  m.initialize(seed);
  std::mt19937_64 rng(seed);
  fill_random(m.head.weight, rng, head_scale);
  fill_random(m.head.bias, rng, head_scale);
  // Zero biases put zero-padded regions exactly on a ReLU kink.
  for (auto& p : m.parameters()) {
    if (p.name.ends_with(".bias") && p.name.rfind("loc.head", 0) != 0) fill_random(*p.values, rng, 0.1);
  }
  return m;
}

std::vector<FeatureMap<float>> to_float(const std::vector<FeatureMap<double>>& maps) {
  std::vector<FeatureMap<float>> out;
  for (const auto& m : maps) {
    FeatureMap<float> f(m.channels(), m.height(), m.width());
    for (std::size_t k = 0; k < m.size(); ++k) f.values()[k] = static_cast<float>(m.values()[k]);
    out.push_back(std::move(f));
  }
  return out;
}

/// Low-rank smooth data: `channels` mixtures of 3 smooth latent channels.
std::vector<FeatureMap<float>> rank3_maps(int n, int channels, int size, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0, 1);
  std::vector<double> mix(static_cast<std::size_t>(channels) * 3);
  for (auto& v : mix) v = g(rng);
  std::vector<FeatureMap<double>> out;
  for (int i = 0; i < n; ++i) {
    const auto z = test::smooth_map(3, size, size, rng);
    FeatureMap<double> v(channels, size, size);
    for (int c = 0; c < channels; ++c) {
      for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
          for (int l = 0; l < 3; ++l) v(c, y, x) += mix[static_cast<std::size_t>(c) * 3 + l] * z(l, y, x);
        }
      }
    }
    out.push_back(std::move(v));
  }
  return to_float(out);
}

TrainConfig quick_config() {
  TrainConfig cfg;
  cfg.ae_epochs = 5;
  cfg.joint_epochs = 6;
  cfg.recurrences = 2;
  cfg.curriculum = {{0, GroupFamily::SE2}, {2, GroupFamily::AFF2}, {4, GroupFamily::SL3}};
  return cfg;
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

TEST(Config, ParsesKeysAndComments) {
  const auto cfg = parse_config(
      "# schedule\n"
      "joint_epochs = 40\n"
      "learning_rate = 5e-4  # smaller\n"
      "curriculum = 0:se2,10:sl3\n"
      "flips_enabled = true\n"
      "parameterization = direct_matrix\n");
  EXPECT_EQ(cfg.joint_epochs, 40);
  EXPECT_DOUBLE_EQ(cfg.learning_rate, 5e-4);
  ASSERT_EQ(cfg.curriculum.size(), 2U);
  EXPECT_EQ(cfg.curriculum[1].start_epoch, 10);
  EXPECT_EQ(cfg.curriculum[1].family, GroupFamily::SL3);
  EXPECT_TRUE(cfg.flips_enabled);
  EXPECT_EQ(cfg.parameterization, Parameterization::direct_matrix);
  EXPECT_EQ(cfg.ae_epochs, 300);
}

TEST(Config, TextRoundTrip) {
  TrainConfig cfg;
  cfg.learning_rate = 1.0 / 3.0;
  cfg.seed = 123456789012345ULL;
  cfg.freeze_ae = true;
  cfg.curriculum = {{0, GroupFamily::AFF2}, {7, GroupFamily::SL3}};
  const auto back = parse_config(config_to_text(cfg));
  EXPECT_EQ(config_to_text(back), config_to_text(cfg));
  EXPECT_EQ(back.learning_rate, cfg.learning_rate);
  EXPECT_EQ(back.seed, cfg.seed);
}

TEST(Config, Errors) {
  const auto code = [](const std::string& text) {
    try {
      parse_config(text).validate();
    } catch (const Error& e) {
      return e.code();
    }
    return ErrorCode::io;
  };
  EXPECT_EQ(code("warp_speed = 9\n"), ErrorCode::config);
  EXPECT_EQ(code("recurrences = many\n"), ErrorCode::config);
  EXPECT_EQ(code("just text\n"), ErrorCode::config);
  EXPECT_EQ(code("flips_enabled = maybe\n"), ErrorCode::config);
  EXPECT_EQ(code("recurrences = 0\n"), ErrorCode::config);
  EXPECT_EQ(code("curriculum = 0:se2,0:aff2,9:sl3\n"), ErrorCode::config);
  EXPECT_EQ(code("curriculum = 0:aff2,9:se2,20:sl3\n"), ErrorCode::config);
  EXPECT_EQ(code("curriculum = 5:se2,9:sl3\n"), ErrorCode::config);
  EXPECT_EQ(code("curriculum = 0:se2,9:aff2\n"), ErrorCode::config);
  EXPECT_EQ(code("curriculum = 0:se3\n"), ErrorCode::config);
  EXPECT_EQ(code("batch_size = 1\n"), ErrorCode::config);
  EXPECT_THROW(load_config("/nonexistent/liealign.cfg"), Error);
}

TEST(Curriculum, FamilyAtEpoch) {
  TrainConfig cfg;
  EXPECT_EQ(curriculum_family(0, cfg), GroupFamily::SE2);
  EXPECT_EQ(curriculum_family(129, cfg), GroupFamily::SE2);
  EXPECT_EQ(curriculum_family(130, cfg), GroupFamily::AFF2);
  EXPECT_EQ(curriculum_family(260, cfg), GroupFamily::SL3);
  EXPECT_EQ(curriculum_family(399, cfg), GroupFamily::SL3);
  EXPECT_EQ(final_family(cfg), GroupFamily::SL3);
  cfg.curriculum_enabled = false;
  EXPECT_EQ(curriculum_family(0, cfg), GroupFamily::SL3);
}

TEST(Batches, CoverEveryImageOnce) {
  std::mt19937_64 rng(3);
  for (std::size_t n : {2U, 7U, 32U, 33U, 49U}) {
    const auto batches = detail::make_batches(n, 0, rng);
    std::vector<int> seen(n, 0);
    for (const auto& b : batches) {
      EXPECT_GE(b.size(), 2U);
      for (auto k : b) ++seen[k];
    }
    for (int s : seen) EXPECT_EQ(s, 1);
    if (n <= 32) {
      EXPECT_EQ(batches.size(), 1U);
    }
  }
}

// ---------------------------------------------------------------------------
// IC-STN cascade
// ---------------------------------------------------------------------------

TEST(Cascade, FreshModelIsIdentity) {
  Model<float> m;
  m.initialize(1);
  std::mt19937_64 rng(1);
  const auto u = to_float({test::random_map(3, 16, 16, rng)})[0];
  for (auto fam : {GroupFamily::SE2, GroupFamily::AFF2, GroupFamily::SL3}) {
    const auto st = ic_stn_forward(m, u, fam, 5);
    EXPECT_EQ(st.composed, Mat3::Identity());
    EXPECT_EQ(st.composed_inverse, Mat3::Identity());
    EXPECT_EQ(st.steps.size(), 5U);
  }
}

TEST(Cascade, SingleRecurrenceIsOneExponential) {
  auto m = small_model(4, 2, 0.3);
  std::mt19937_64 rng(2);
  const auto u = test::smooth_map(3, 8, 8, rng);
  const auto st = ic_stn_forward(m, u, GroupFamily::SL3, 1);
  const auto th = m.localize(u);
  Params8 p{};
  for (int k = 0; k < 8; ++k) p[k] = th[k];
  const auto expected = exp_params(AlgebraParams(p, GroupFamily::SL3));
  EXPECT_LT((st.composed - expected.t).norm(), 1e-12);
  EXPECT_LT((st.composed * st.composed_inverse - Mat3::Identity()).norm(), 1e-12);
}

TEST(Cascade, SE2StaysInGroupForAnyHead) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 5; ++trial) {
    auto m = small_model(4, 10 + trial, 0.5);
    const auto u = test::random_map(3, 8, 8, rng);
    const auto st = ic_stn_forward(m, u, GroupFamily::SE2, 4);
    EXPECT_TRUE(satisfies_group(st.transform()));
    EXPECT_NEAR(st.composed.determinant(), 1.0, 1e-9);
    EXPECT_NEAR(st.composed(2, 0), 0.0, 1e-12);
    EXPECT_NEAR(st.composed(2, 1), 0.0, 1e-12);
  }
}

TEST(Cascade, NonFiniteThetaThrows) {
  auto m = small_model(4, 4, 0.3);
  m.head.bias[0] = std::numeric_limits<double>::quiet_NaN();
  std::mt19937_64 rng(4);
  try {
    ic_stn_forward(m, test::random_map(3, 8, 8, rng), GroupFamily::SE2, 2);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::non_finite);
  }
}

class CascadeGradient : public ::testing::TestWithParam<Parameterization> {};

TEST_P(CascadeGradient, MatchesFiniteDifferences) {
  std::mt19937_64 rng(5);
  for (auto fam : {GroupFamily::SE2, GroupFamily::AFF2, GroupFamily::SL3}) {
    auto m = small_model(4, 5, 0.2);
    auto u = test::smooth_map(3, 8, 8, rng);
    Mat3 wf = Mat3::Random(), wi = Mat3::Random();
    const auto loss = [&] {
      const auto st = ic_stn_forward(m, u, fam, 3, GetParam());
      return (st.composed.cwiseProduct(wf)).sum() + (st.composed_inverse.cwiseProduct(wi)).sum();
    };
    const auto st = ic_stn_forward(m, u, fam, 3, GetParam());
    Model<double> grad = m.zeros_like();
    FeatureMap<double> du(u.channels(), u.height(), u.width());
    ic_stn_backward(m, u, st, wf, wi, grad, du);
    std::vector<double> num, ana;
    for (std::size_t i = 0; i < u.size(); i += 3) {
      num.push_back(test::central_difference(loss, u.values()[i], 1e-5));
      ana.push_back(du.values()[i]);
    }
    auto params = m.parameters();
    auto grads = grad.parameters();
    for (std::size_t p = 0; p < params.size(); ++p) {
      if (params[p].name.rfind("loc.", 0) != 0) continue;
      for (std::size_t i = 0; i < params[p].values->size(); i += 11) {
        num.push_back(test::central_difference(loss, (*params[p].values)[i], 1e-5));
        ana.push_back((*grads[p].values)[i]);
      }
    }
    EXPECT_LT(test::relative_error(ana, num), 1e-4) << to_string(fam);
  }
}

INSTANTIATE_TEST_SUITE_P(Parameterizations, CascadeGradient,
                         ::testing::Values(Parameterization::lie, Parameterization::direct_matrix));

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

TEST(PairLoss, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(6);
  const auto src = test::smooth_map(3, 9, 11, rng);
  const auto dst = test::smooth_map(3, 9, 11, rng);
  Mat3 s = Mat3::Identity();
  s(0, 0) = 1.05;
  s(0, 1) = 0.1;
  s(0, 2) = 0.07;
  s(1, 2) = -0.04;
  s(2, 0) = 0.03;
  Mat3 ds;
  pair_loss(src, dst, s, &ds);
  std::vector<double> num, ana;
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) {
      num.push_back(test::central_difference([&] { return pair_loss(src, dst, s, nullptr); }, s(r, c), 1e-6));
      ana.push_back(ds(r, c));
    }
  }
  EXPECT_LT(test::relative_error(ana, num), 1e-4);
}

TEST(IcLoss, IdentityIsSumOfSquaredDistances) {
  std::mt19937_64 rng(7);
  const auto maps = to_float({test::random_map(3, 6, 6, rng), test::random_map(3, 6, 6, rng),
                              test::random_map(3, 6, 6, rng)});
  const std::vector<Mat3> id(3, Mat3::Identity());
  const auto r = ic_loss<float>(maps, id, id, false);
  EXPECT_NEAR(r.loss, identity_baseline_loss(maps), 1e-9 * r.loss);
  EXPECT_NEAR(identity_baseline_loss(maps), 2.0 * (squared_distance(maps[0], maps[1]) +
                                                   squared_distance(maps[0], maps[2]) +
                                                   squared_distance(maps[1], maps[2])),
              1e-6 * r.loss);
}

TEST(IcLoss, IdenticalImagesAndSharedTransformGiveZero) {
  std::mt19937_64 rng(8);
  const auto v = to_float({test::random_map(3, 6, 6, rng)})[0];
  const std::vector<FeatureMap<float>> maps{v, v, v};
  const Mat3 t = exp_params(AlgebraParams(test::random_theta(rng, 0.2), GroupFamily::SL3)).t;
  const std::vector<Mat3> fwd(3, t), inv(3, Mat3(t.inverse()));
  EXPECT_NEAR(ic_loss<float>(maps, fwd, inv, false).loss, 0.0, 1e-9);
}

TEST(IcLoss, InvariantToRelabeling) {
  std::mt19937_64 rng(9);
  std::vector<FeatureMap<float>> maps;
  std::vector<Mat3> fwd, inv;
  for (int i = 0; i < 4; ++i) {
    maps.push_back(to_float({test::smooth_map(3, 8, 8, rng)})[0]);
    const Mat3 t = exp_params(AlgebraParams(test::random_theta(rng, 0.1), GroupFamily::AFF2)).t;
    fwd.push_back(t);
    inv.push_back(t.inverse());
  }
  const double base = ic_loss<float>(maps, fwd, inv, false).loss;
  const std::vector<int> perm{2, 0, 3, 1};
  std::vector<FeatureMap<float>> pm;
  std::vector<Mat3> pf, pi;
  for (int k : perm) pm.push_back(maps[k]), pf.push_back(fwd[k]), pi.push_back(inv[k]);
  EXPECT_NEAR(ic_loss<float>(pm, pf, pi, false).loss, base, 1e-9 * base);
}

TEST(IcLoss, RejectsSingleImage) {
  const std::vector<FeatureMap<float>> one{FeatureMap<float>(3, 4, 4)};
  const std::vector<Mat3> id(1, Mat3::Identity());
  EXPECT_THROW(ic_loss<float>(one, id, id, false), Error);
}

TEST(FlipLoss, NeverExceedsIdentityTarget) {
  std::mt19937_64 rng(10);
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<PerFlip<FeatureMap<float>>> maps(4);
    std::vector<PerFlip<Mat3>> fwd(4), inv(4);
    for (int i = 0; i < 4; ++i) {
      const auto v = to_float({test::smooth_map(3, 8, 8, rng)})[0];
      for (int k = 0; k < 2; ++k) {
        maps[i][k] = flip(v, kFlipConfigs[k]);
        const Mat3 t = exp_params(AlgebraParams(test::random_theta(rng, 0.1), GroupFamily::SL3)).t;
        fwd[i][k] = t;
        inv[i][k] = t.inverse();
      }
    }
    const auto r = ic_loss_flips<float>(maps, fwd, inv, false);
    EXPECT_LE(r.loss, r.identity_target_loss);
  }
}

TEST(FlipLoss, MirroredPairSelectsFlip) {
  std::mt19937_64 rng(11);
  const auto v = to_float({test::smooth_map(3, 9, 9, rng)})[0];
  const auto mv = flip(v, FlipConfig::horizontal);
  const std::vector<PerFlip<FeatureMap<float>>> maps{{v, flip(v, FlipConfig::horizontal)},
                                                     {mv, flip(mv, FlipConfig::horizontal)}};
  const std::vector<PerFlip<Mat3>> id(2, {Mat3::Identity(), Mat3::Identity()});
  const auto r = ic_loss_flips<float>(maps, id, id, false);
  EXPECT_EQ(r.selected[(0 * 2 + 1) * 2 + 0], 1);
  EXPECT_EQ(r.selected[(0 * 2 + 1) * 2 + 1], 0);
  EXPECT_NEAR(r.loss, 0.0, 1e-9);
  const auto flips = assign_flips(2, r.selected);
  EXPECT_NE(flips[0], flips[1]);
  EXPECT_EQ(flips[0], FlipConfig::identity);
}

TEST(FlipLoss, GradientFollowsSelectedTerms) {
  std::mt19937_64 rng(12);
  std::vector<PerFlip<FeatureMap<float>>> maps(3);
  std::vector<PerFlip<Mat3>> fwd(3), inv(3);
  for (int i = 0; i < 3; ++i) {
    const auto v = to_float({test::smooth_map(2, 8, 8, rng)})[0];
    for (int k = 0; k < 2; ++k) {
      maps[i][k] = flip(v, kFlipConfigs[k]);
      fwd[i][k] = exp_params(AlgebraParams(test::random_theta(rng, 0.1), GroupFamily::AFF2)).t;
      inv[i][k] = fwd[i][k].inverse();
    }
  }
  const auto r = ic_loss_flips<float>(maps, fwd, inv, true);
  // Perturb one forward matrix; the selected set stays fixed for a small step.
  std::vector<double> num, ana;
  for (int i = 0; i < 3; ++i) {
    for (int k = 0; k < 2; ++k) {
      for (int e = 0; e < 9; ++e) {
        num.push_back(test::central_difference(
            [&] { return ic_loss_flips<float>(maps, fwd, inv, false).loss; }, fwd[i][k].data()[e], 1e-6));
        ana.push_back(r.d_forward[i][k].data()[e]);
      }
    }
  }
  EXPECT_LT(test::relative_error(ana, num), 1e-4);
}

TEST(AssignFlips, RecoversConsistentLabelling) {
  const std::vector<int> truth{0, 1, 1, 0, 1, 0};
  const std::size_t n = truth.size();
  std::vector<std::uint8_t> sel(n * n * 2, 0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      for (int ki = 0; ki < 2; ++ki) sel[(i * n + j) * 2 + ki] = static_cast<std::uint8_t>(ki ^ truth[i] ^ truth[j]);
    }
  }
  // One corrupted vote must not change the outcome.
  sel[(0 * n + 1) * 2 + 0] ^= 1;
  const auto f = assign_flips(n, sel);
  for (std::size_t k = 0; k < n; ++k) EXPECT_EQ(static_cast<int>(f[k]), truth[k]) << k;
}

TEST(AssignFlips, MajorityIsIdentity) {
  const std::size_t n = 5;
  std::vector<std::uint8_t> sel(n * n * 2, 0);
  const std::vector<int> truth{1, 1, 1, 0, 0};
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      for (int ki = 0; ki < 2; ++ki) sel[(i * n + j) * 2 + ki] = static_cast<std::uint8_t>(ki ^ truth[i] ^ truth[j]);
    }
  }
  const auto f = assign_flips(n, sel);
  EXPECT_EQ(std::count(f.begin(), f.end(), FlipConfig::identity), 3);
  EXPECT_EQ(f[3], FlipConfig::horizontal);
}

// ---------------------------------------------------------------------------
// Joint step
// ---------------------------------------------------------------------------

class JointGradient : public ::testing::TestWithParam<bool> {};

// End to end: encoder, cascade, loss and reconstruction term together.
TEST_P(JointGradient, MatchesFiniteDifferences) {
  const bool flips = GetParam();
  auto m = small_model(4, 13, 0.2);
  std::mt19937_64 rng(13);
  const std::vector<FeatureMap<double>> batch{test::smooth_map(4, 8, 8, rng), test::smooth_map(4, 8, 8, rng)};
  JointOptions opt;
  opt.family = GroupFamily::SL3;
  opt.recurrences = 2;
  opt.flips = flips;
  Model<double> grad = m.zeros_like();
  joint_step<double>(m, batch, opt, &grad);
  const auto loss = [&] {
    const auto r = joint_step<double>(m, batch, opt, nullptr);
    return r.loss + r.ae_loss;
  };
  std::vector<double> num, ana;
  auto params = m.parameters();
  auto grads = grad.parameters();
  for (std::size_t p = 0; p < params.size(); ++p) {
    for (std::size_t i = 0; i < params[p].values->size(); i += 13) {
      num.push_back(test::central_difference(loss, (*params[p].values)[i], 1e-6));
      ana.push_back((*grads[p].values)[i]);
    }
  }
  EXPECT_LT(test::relative_error(ana, num), 1e-3);
}

INSTANTIATE_TEST_SUITE_P(FlipModes, JointGradient, ::testing::Bool());

TEST(JointStep, FrozenAutoencoderGetsNoGradient) {
  auto m = small_model(4, 14, 0.2);
  std::mt19937_64 rng(14);
  const std::vector<FeatureMap<double>> batch{test::smooth_map(4, 8, 8, rng), test::smooth_map(4, 8, 8, rng)};
  JointOptions opt;
  opt.freeze_ae = true;
  opt.recurrences = 2;
  Model<double> grad = m.zeros_like();
  const auto r = joint_step<double>(m, batch, opt, &grad);
  EXPECT_EQ(r.ae_loss, 0.0);
  for (const auto& p : grad.parameters()) {
    if (p.name.rfind("loc.", 0) == 0) continue;
    for (double v : *p.values) EXPECT_EQ(v, 0.0) << p.name;
  }
}

TEST(JointStep, ThreadCountDoesNotChangeResult) {
  auto m = small_model(4, 15, 0.2);
  std::mt19937_64 rng(15);
  std::vector<FeatureMap<double>> batch;
  for (int k = 0; k < 5; ++k) batch.push_back(test::smooth_map(4, 8, 8, rng));
  JointOptions opt;
  opt.recurrences = 2;
  opt.flips = true;
  Model<double> g1 = m.zeros_like(), g4 = m.zeros_like();
  const auto r1 = joint_step<double>(m, batch, opt, &g1);
  opt.threads = 4;
  const auto r4 = joint_step<double>(m, batch, opt, &g4);
  EXPECT_EQ(r1.loss, r4.loss);
  EXPECT_EQ(r1.ae_loss, r4.ae_loss);
  EXPECT_EQ(r1.flips, r4.flips);
  auto a = g1.parameters();
  auto b = g4.parameters();
  for (std::size_t k = 0; k < a.size(); ++k) EXPECT_EQ(*a[k].values, *b[k].values) << a[k].name;
}

// ---------------------------------------------------------------------------
// Curriculum promotion
// ---------------------------------------------------------------------------

TEST(Promotion, HeadKeepsPredictedTransform) {
  Model<float> m;
  m.initialize(16);
  std::mt19937_64 rng(16);
  std::normal_distribution<float> g(0.0F, 0.05F);
  for (auto& w : m.head.weight) w = g(rng);
  for (auto& b : m.head.bias) b = g(rng);
  const auto u = to_float({test::smooth_map(3, 16, 16, rng)})[0];
  auto params = m.parameters();
  Adam<float> adam(params);
  const auto before = ic_stn_forward(m, u, GroupFamily::SE2, 1).composed;
  promote_head(m, adam, GroupFamily::SE2, GroupFamily::AFF2);
  const auto mid = ic_stn_forward(m, u, GroupFamily::AFF2, 1).composed;
  promote_head(m, adam, GroupFamily::AFF2, GroupFamily::SL3);
  const auto after = ic_stn_forward(m, u, GroupFamily::SL3, 1).composed;
  EXPECT_LT((mid - before).norm(), 1e-5);
  EXPECT_LT((after / after(2, 2) - before).norm(), 1e-5);
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

TEST(Pretrain, LossDecreases) {
  const auto maps = rank3_maps(4, 6, 12, 17);
  TrainConfig cfg;
  cfg.ae_epochs = 40;
  cfg.learning_rate = 1e-2;
  auto m = detail::build_model(6, cfg);
  const auto log = pretrain_ae(m, maps, cfg);
  ASSERT_EQ(log.size(), 40U);
  EXPECT_LT(log.back().loss, 0.5 * log.front().loss);
}

TEST(Pretrain, ReconstructsRankThreeData) {
  const auto maps = rank3_maps(6, 8, 12, 18);
  TrainConfig cfg;
  cfg.ae_epochs = 1500;
  cfg.learning_rate = 1e-2;
  cfg.lr_step = 300;
  cfg.lr_decay = 0.5;
  auto m = detail::build_model(8, cfg);
  pretrain_ae(m, maps, cfg);
  double err = 0.0, energy = 0.0;
  for (const auto& v : maps) {
    const auto rec = m.decode(m.encode(v));
    err += squared_distance(rec, v);
    for (float x : v.values()) energy += static_cast<double>(x) * x;
  }
  EXPECT_LT(err / energy, 1e-2);
}

TEST(Pretrain, ZeroInputStaysZero) {
  TrainConfig cfg;
  cfg.ae_epochs = 5;
  const std::vector<FeatureMap<float>> zeros(3, FeatureMap<float>(5, 6, 6));
  auto m = detail::build_model(5, cfg);
  const auto log = pretrain_ae(m, zeros, cfg);
  for (const auto& e : log) EXPECT_EQ(e.loss, 0.0);
}

TEST(Pretrain, NonFiniteLossAbortsWithEpoch) {
  auto maps = rank3_maps(3, 4, 8, 19);
  maps[1].values()[5] = std::numeric_limits<float>::infinity();
  TrainConfig cfg;
  cfg.ae_epochs = 3;
  auto m = detail::build_model(4, cfg);
  try {
    pretrain_ae(m, maps, cfg);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::non_finite);
    EXPECT_NE(std::string(e.what()).find("epoch 0"), std::string::npos);
  }
}

TEST(Train, DeterministicForSeed) {
  const auto maps = rank3_maps(4, 5, 16, 20);
  const auto cfg = quick_config();
  const auto a = train(maps, cfg);
  const auto b = train(maps, cfg);
  EXPECT_EQ(a.final_loss, b.final_loss);
  ASSERT_EQ(a.joint_log.size(), b.joint_log.size());
  for (std::size_t k = 0; k < a.joint_log.size(); ++k) EXPECT_EQ(a.joint_log[k].loss, b.joint_log[k].loss);
  for (std::size_t i = 0; i < a.alignment.images.size(); ++i) {
    EXPECT_EQ(a.alignment.images[i].transform.t, b.alignment.images[i].transform.t);
  }
}

TEST(Train, ThreadsMatchSingleThread) {
  const auto maps = rank3_maps(4, 5, 16, 21);
  auto cfg = quick_config();
  const auto a = train(maps, cfg);
  cfg.threads = 2;
  const auto b = train(maps, cfg);
  EXPECT_EQ(a.final_loss, b.final_loss);
}

TEST(Train, FollowsCurriculumAndRecordsTransforms) {
  const auto maps = rank3_maps(3, 5, 16, 22);
  auto cfg = quick_config();
  cfg.record_transforms = true;
  std::vector<GroupFamily> seen;
  const auto r = train(maps, cfg, [&](const EpochLog& e) { seen.push_back(e.family); });
  ASSERT_EQ(seen.size(), 6U);
  EXPECT_EQ(seen[0], GroupFamily::SE2);
  EXPECT_EQ(seen[2], GroupFamily::AFF2);
  EXPECT_EQ(seen[5], GroupFamily::SL3);
  for (const auto& e : r.joint_log) {
    EXPECT_EQ(e.transforms.size(), 3U);
    if (e.family == GroupFamily::SE2) {
      for (const auto& t : e.transforms) EXPECT_TRUE(satisfies_group(t));
    }
  }
  EXPECT_EQ(r.alignment.family, GroupFamily::SL3);
  EXPECT_EQ(r.ae_log.size(), 5U);
}

TEST(Train, FlipsLossBoundedByIdentityTarget) {
  const auto maps = rank3_maps(4, 5, 16, 23);
  auto cfg = quick_config();
  cfg.flips_enabled = true;
  const auto r = train(maps, cfg);
  for (const auto& e : r.joint_log) EXPECT_LE(e.loss, e.identity_target_loss);
}

TEST(Train, RejectsTooFewImages) {
  const auto maps = rank3_maps(1, 5, 16, 24);
  EXPECT_THROW(train(maps, quick_config()), Error);
}

TEST(Train, DivergenceAbortsWithEpochAndRate) {
  const auto maps = rank3_maps(3, 5, 16, 25);
  auto cfg = quick_config();
  cfg.ae_epochs = 0;
  cfg.learning_rate = 1e30;
  try {
    train(maps, cfg);
    FAIL() << "expected divergence";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::non_finite);
    EXPECT_NE(std::string(e.what()).find("epoch"), std::string::npos);
  }
}
