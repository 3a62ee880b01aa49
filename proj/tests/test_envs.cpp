#include "dali/envs.hpp"

#include <gtest/gtest.h>

#include <cmath>

namespace dali {
namespace {

Context ctx2(double a, double b, EnvId id = EnvId::swing) {
  Context c;
  c.values = {a, b};
  c.names = {CmdpEnv::space(id).dims[0].name, CmdpEnv::space(id).dims[1].name};
  return c;
}

TEST(Envs, MakeEnvDefaultsAndRejections) {
  auto env = make_env(EnvId::swing, ctx2(9.81, 0.3), 0);
  EXPECT_EQ(env.obs_dim(), 2);
  EXPECT_EQ(env.act_dim(), 1);
  // gravity 0 is outside the train/eval union
  EXPECT_THROW(make_env(EnvId::swing, ctx2(0.0, 0.3), 0), std::invalid_argument);
  Context c1;
  c1.values = {9.81};
  EXPECT_THROW(make_env(EnvId::swing, c1, 0), std::invalid_argument);
}

TEST(Envs, SameSeedSameFirstObservation) {
  auto a = make_env(EnvId::hopper, ctx2(9.81, 1.0, EnvId::hopper), 7);
  auto b = make_env(EnvId::hopper, ctx2(9.81, 1.0, EnvId::hopper), 7);
  EXPECT_EQ(a.reset(), b.reset());
}

TEST(Envs, DeterministicTrajectoriesBitExact) {
  for (EnvId id : {EnvId::swing, EnvId::hopper}) {
    Context c = CmdpEnv::space(id).default_context();
    auto a = make_env(id, c, 42);
    auto b = make_env(id, c, 42);
    a.reset();
    b.reset();
    Rng arng(5);
    Rng brng(5);
    for (int t = 0; t < 50; ++t) {
      Vec act(1);
      act << arng.uniform(-1, 1);
      Vec bct(1);
      bct << brng.uniform(-1, 1);
      auto ra = a.step(act);
      auto rb = b.step(bct);
      ASSERT_EQ(ra.observation, rb.observation);
      ASSERT_EQ(ra.reward, rb.reward);
    }
  }
}

TEST(Envs, RestAtStableEquilibriumIsFixedPoint) {
  auto env = make_env(EnvId::swing, ctx2(9.81, 0.3), 3, /*noise_sigma=*/0.0);
  env.reset();
  env.set_state((Vec(2) << 0.0, 0.0).finished());
  Vec zero_act = Vec::Zero(1);
  auto r = env.step(zero_act);
  EXPECT_EQ(r.observation(0), 0.0);
  EXPECT_EQ(r.observation(1), 0.0);
}

// Hand-computed Euler step; independent of the implementation.
TEST(Envs, MatchesHandComputedEulerStep) {
  const double g = 11.0, len = 0.2;
  auto env = make_env(EnvId::swing, ctx2(g, len), 9, 0.0);
  env.reset();
  Vec s(2);
  s << 0.7, -1.3;
  env.set_state(s);
  Vec act(1);
  act << 0.4;
  auto r = env.step(act);
  const double dt = CmdpEnv::kDt;
  const double accel = -(g / len) * std::sin(0.7) - CmdpEnv::kSwingDamping * (-1.3) +
                       (CmdpEnv::kSwingTorqueGain / len) * 0.4;
  const double theta_n = 0.7 + dt * (-1.3);
  const double omega_n = -1.3 + dt * accel;
  EXPECT_NEAR(r.observation(0), theta_n, 1e-12);
  EXPECT_NEAR(r.observation(1), omega_n, 1e-12);
  EXPECT_NEAR(r.reward, 0.5 * (1.0 - std::cos(theta_n)), 1e-12);

  const double beta = 1.2, gh = 6.0;
  auto hop = make_env(EnvId::hopper, ctx2(gh, beta, EnvId::hopper), 4, 0.0);
  hop.reset();
  hop.set_state((Vec(1) << 2.0).finished());
  Vec ha(1);
  ha << -0.5;
  auto hr = hop.step(ha);
  const double v_n =
      2.0 + dt * (CmdpEnv::kHopperDrive * beta * (-0.5) - CmdpEnv::kHopperFriction * gh * 2.0);
  EXPECT_NEAR(hr.observation(0), v_n, 1e-12);
}

TEST(Envs, LipschitzInGravity) {
  const double dg = 1e-3;
  const double len = 0.3;
  Vec s(2);
  s << 0.9, 0.4;
  Vec act(1);
  act << 0.2;
  auto a = make_env(EnvId::swing, ctx2(9.81, len), 0, 0.0);
  auto b = make_env(EnvId::swing, ctx2(9.81 + dg, len), 0, 0.0);
  a.reset();
  b.reset();
  a.set_state(s);
  b.set_state(s);
  auto ra = a.step(act);
  auto rb = b.step(act);
  const double l1 = (ra.observation - rb.observation).lpNorm<1>();
  const double L = CmdpEnv::kDt / len;  // analytic bound: dt*|sin(theta)|/len
  EXPECT_LE(l1, L * dg + 1e-12);
}

TEST(Envs, SteppingFinishedEpisodeThrows) {
  auto env = make_env(EnvId::swing, ctx2(9.81, 0.3), 0, 0.01, /*episode_len=*/3);
  env.reset();
  Vec a = Vec::Zero(1);
  for (int i = 0; i < 3; ++i) env.step(a);
  EXPECT_TRUE(env.done());
  EXPECT_THROW(env.step(a), std::logic_error);
}

TEST(Envs, RewardBounded) {
  for (EnvId id : {EnvId::swing, EnvId::hopper}) {
    Context c = CmdpEnv::space(id).default_context();
    auto env = make_env(id, c, 11);
    env.reset();
    Rng rng(2);
    while (!env.done()) {
      Vec a(1);
      a << rng.uniform(-1, 1);
      auto r = env.step(a);
      ASSERT_GE(r.reward, 0.0);
      ASSERT_LE(r.reward, 1.0);
      ASSERT_TRUE(r.observation.allFinite());
    }
  }
}

TEST(Envs, StatesStayFiniteUnderExtremeContexts) {
  // Short string and strong gravity make explicit Euler unstable; the
  // documented clamp box has to keep everything finite.
  auto env = make_env(EnvId::swing, ctx2(19.6, 0.03), 5);
  env.reset();
  Rng rng(3);
  while (!env.done()) {
    Vec a(1);
    a << rng.uniform(-1, 1);
    auto r = env.step(a);
    ASSERT_TRUE(r.observation.allFinite());
    ASSERT_LE(std::abs(env.state()(0)), CmdpEnv::kSwingAngleBound);
    ASSERT_LE(std::abs(env.state()(1)), CmdpEnv::kSwingVelBound);
  }
}

// Small-oscillation period from a perturbed start, measured by zero
// crossings of the angle under zero action.
double measure_period(double gravity) {
  auto env = make_env(EnvId::swing, ctx2(gravity, 0.3), 0, 0.0, 2000);
  env.reset();
  env.set_state((Vec(2) << 0.25, 0.0).finished());
  Vec a = Vec::Zero(1);
  double prev = 0.25;
  std::vector<int> crossings;
  for (int t = 0; t < 2000; ++t) {
    auto r = env.step(a);
    double cur = env.state()(0);
    if (prev > 0 && cur <= 0) crossings.push_back(t);
    prev = cur;
    if (crossings.size() >= 4) break;
  }
  EXPECT_GE(crossings.size(), 3u) << "oscillation never crossed zero";
  return CmdpEnv::kDt * (crossings[2] - crossings[0]);  // one full period
}

TEST(Envs, DoublingGravityShortensPeriod) {
  EXPECT_LT(measure_period(2 * 4.9), measure_period(4.9));
  EXPECT_LT(measure_period(19.6), measure_period(9.8));
}

TEST(Envs, NoiseMatchesGaussianLaw) {
  const double sigma = 0.05;
  auto env = make_env(EnvId::hopper, ctx2(9.81, 1.0, EnvId::hopper), 123, sigma, 100000);
  env.reset();
  Vec a = Vec::Zero(1);
  const int n = 100000;
  double sum = 0, sumsq = 0;
  for (int t = 0; t < n; ++t) {
    auto r = env.step(a);
    double eta = r.observation(0) - env.state()(0);
    sum += eta;
    sumsq += eta * eta;
  }
  const double mean = sum / n;
  const double var = sumsq / n - mean * mean;
  // 3 standard errors of the mean and of the variance estimate
  EXPECT_LT(std::abs(mean), 3.0 * sigma / std::sqrt(1.0 * n));
  EXPECT_LT(std::abs(var - sigma * sigma), 3.0 * sigma * sigma * std::sqrt(2.0 / n));
}

TEST(Envs, SampleContextsSingleAndDouble) {
  ContextSpace sp = CmdpEnv::space(EnvId::swing);
  auto single = sample_contexts(sp, ContextMode::single_0, 100, 1);
  ASSERT_EQ(single.size(), 100u);
  for (const auto& c : single) {
    EXPECT_EQ(c.values[1], 0.3);
    EXPECT_GE(c.values[0], 4.9);
    EXPECT_LE(c.values[0], 14.7);
  }
  auto dbl = sample_contexts(sp, ContextMode::double_both, 3, 99);
  auto dbl2 = sample_contexts(sp, ContextMode::double_both, 3, 99);
  for (int i = 0; i < 3; ++i) {
    EXPECT_EQ(dbl[i].values, dbl2[i].values);
    EXPECT_TRUE(sp.dims[0].in_train(dbl[i].values[0]));
    EXPECT_TRUE(sp.dims[1].in_train(dbl[i].values[1]));
  }

  ContextSpace one_dim;
  one_dim.dims = {sp.dims[0]};
  EXPECT_THROW(sample_contexts(one_dim, ContextMode::single_1, 5, 0), std::invalid_argument);
  EXPECT_THROW(sample_contexts(sp, ContextMode::single_0, 0, 0), std::invalid_argument);
}

TEST(Envs, SampleCoverageMonteCarlo) {
  ContextSpace sp = CmdpEnv::space(EnvId::swing);
  auto cs = sample_contexts(sp, ContextMode::single_0, 100000, 7);
  double mn = 1e9, mx = -1e9;
  for (const auto& c : cs) {
    mn = std::min(mn, c.values[0]);
    mx = std::max(mx, c.values[0]);
  }
  EXPECT_GE(mn, 4.9);
  EXPECT_LE(mx, 14.7);
  EXPECT_GE((mx - mn) / (14.7 - 4.9), 0.99);
}

TEST(Envs, RegimeOfPartition) {
  ContextSpace sp = CmdpEnv::space(EnvId::swing);
  EXPECT_EQ(regime_of(sp, ctx2(9.81, 0.3)), Regime::interpolate);
  EXPECT_EQ(regime_of(sp, ctx2(19.6, 0.6)), Regime::extrapolate);
  EXPECT_EQ(regime_of(sp, ctx2(19.6, 0.3)), Regime::mixed);
  EXPECT_EQ(regime_of(sp, ctx2(9.81, 0.03)), Regime::mixed);
  EXPECT_THROW(regime_of(sp, ctx2(25.0, 0.3)), std::invalid_argument);

  // Every valid context gets exactly one label; all-train => interpolate.
  Rng rng(17);
  for (int i = 0; i < 500; ++i) {
    Context c = sp.default_context();
    for (int d = 0; d < 2; ++d) {
      c.values[d] = rng.uniform() < 0.5 ? sp.dims[d].sample_train(rng)
                                        : sp.dims[d].sample_eval(rng);
    }
    Regime r = regime_of(sp, c);
    bool t0 = sp.dims[0].in_train(c.values[0]);
    bool t1 = sp.dims[1].in_train(c.values[1]);
    if (t0 && t1) EXPECT_EQ(r, Regime::interpolate);
    if (!t0 && !t1) EXPECT_EQ(r, Regime::extrapolate);
    if (t0 != t1) EXPECT_EQ(r, Regime::mixed);
  }
}

TEST(Envs, NormalizeMapsUnionIntoUnitInterval) {
  ContextSpace sp = CmdpEnv::space(EnvId::swing);
  EXPECT_NEAR(sp.dims[0].normalize(0.98), -1.0, 1e-12);
  EXPECT_NEAR(sp.dims[0].normalize(19.6), 1.0, 1e-12);
  double mid = sp.dims[0].normalize(9.81);
  EXPECT_GT(mid, -1.0);
  EXPECT_LT(mid, 1.0);
}

}  // namespace
}  // namespace dali
