#include "dali/behavior.hpp"

#include "grad_check.hpp"

#include <gtest/gtest.h>

namespace dali {
namespace {

struct Setup {
  ParamRegistry reg;
  WorldModel wm;
  ActorCritic ac;
};

std::unique_ptr<Setup> make_setup(Variant v, std::uint64_t seed = 1) {
  auto s = std::make_unique<Setup>();
  Rng rng(seed);
  WorldModelConfig cfg;
  cfg.obs_dim = 2;
  cfg.act_dim = 1;
  cfg.d_h = 8;
  cfg.hidden = 10;
  cfg.ctx_dim = (v == Variant::dreamer_dr) ? 0 : 8;
  s->wm = WorldModel::make(s->reg, "wm", v, cfg, rng);
  ActorCriticConfig acc;
  acc.feat_dim = cfg.feat_dim();
  acc.act_dim = 1;
  acc.hidden = 10;
  acc.ctx_dim = variant_deep(v) ? cfg.ctx_dim : 0;
  s->ac = ActorCritic::make(s->reg, "ac", v, acc, rng);
  return s;
}

TEST(Imagine, HorizonZeroIsJustStartState) {
  auto s = make_setup(Variant::dreamer_dr);
  EvalEngine e;
  Rng rng(2);
  auto h0 = e.constant(Mat::Zero(8, 3));
  auto z0 = e.constant(Mat::Zero(32, 3));
  auto traj = imagine(e, s->wm, s->ac, h0, z0, std::nullopt, 0, rng);
  EXPECT_EQ(traj.h.size(), 1u);
  EXPECT_EQ(traj.actions.size(), 0u);
}

TEST(Imagine, DefaultHorizonShapesAndDeterminism) {
  auto s = make_setup(Variant::dreamer_dr);
  EvalEngine e;
  Rng r1(3), r2(3);
  auto h0 = e.constant(Mat::Zero(8, 2));
  auto z0 = e.constant(Mat::Zero(32, 2));
  auto t1 = imagine(e, s->wm, s->ac, h0, z0, std::nullopt, 15, r1);
  auto t2 = imagine(e, s->wm, s->ac, h0, z0, std::nullopt, 15, r2);
  EXPECT_EQ(t1.h.size(), 16u);
  EXPECT_EQ(t1.actions.size(), 15u);
  EXPECT_EQ(t1.rewards.size(), 15u);
  for (int i = 0; i < 15; ++i) EXPECT_EQ(e.value(t1.actions[i]), e.value(t2.actions[i]));
}

TEST(Imagine, DeepVariantRequiresFixedContext) {
  auto s = make_setup(Variant::dali_d);
  EvalEngine e;
  Rng rng(4);
  auto h0 = e.constant(Mat::Zero(8, 2));
  auto z0 = e.constant(Mat::Zero(32, 2));
  EXPECT_THROW(imagine(e, s->wm, s->ac, h0, z0, std::nullopt, 3, rng), std::invalid_argument);
  Rng crng(5);
  auto ctx = e.constant(crng.normal_matrix(8, 2));
  auto traj = imagine(e, s->wm, s->ac, h0, z0, ctx, 3, rng);
  ASSERT_TRUE(traj.ctx.has_value());
  // one fixed context vector reused at every step
  EXPECT_EQ(e.value(*traj.ctx), e.value(ctx));

  // different fixed context changes the rollout from the first transition
  Rng rng2(4);
  auto ctx2 = e.constant((e.value(ctx).array() + 0.5).matrix());
  auto traj2 = imagine(e, s->wm, s->ac, h0, z0, ctx2, 3, rng2);
  EXPECT_GT((e.value(traj.h[1]) - e.value(traj2.h[1])).norm(), 0.0);
}

TEST(Imagine, ShallowVariantTakesNoContext) {
  auto s = make_setup(Variant::dali_s);
  EvalEngine e;
  Rng rng(6);
  auto h0 = e.constant(Mat::Zero(8, 1));
  auto z0 = e.constant(Mat::Zero(32, 1));
  auto ctx = e.constant(Mat::Zero(8, 1));
  EXPECT_THROW(imagine(e, s->wm, s->ac, h0, z0, ctx, 2, rng), std::invalid_argument);
  EXPECT_NO_THROW(imagine(e, s->wm, s->ac, h0, z0, std::nullopt, 2, rng));
}

TEST(LambdaReturns, BaseCasesMatchClosedForms) {
  EvalEngine e;
  Rng rng(7);
  const int H = 5;
  std::vector<EvalEngine::V> r, v, n;
  for (int i = 0; i < H; ++i) {
    r.push_back(e.constant(rng.normal_matrix(1, 3)));
    v.push_back(e.constant(rng.normal_matrix(1, 3)));
    n.push_back(e.constant(Mat::Ones(1, 3)));
  }
  // lambda = 0: one-step targets r + gamma * n * v
  auto t0 = lambda_returns(e, r, v, n, 0.9, 0.0);
  for (int i = 0; i < H; ++i) {
    Mat expect = e.value(r[i]) + 0.9 * e.value(v[i]);
    EXPECT_LT((e.value(t0[i]) - expect).norm(), 1e-12);
  }
  // lambda = 1, n = 1: discounted Monte-Carlo with terminal bootstrap
  auto t1 = lambda_returns(e, r, v, n, 0.9, 1.0);
  Mat expect = Mat::Zero(1, 3);
  for (int i = H - 1; i >= 0; --i) {
    if (i == H - 1)
      expect = e.value(r[i]) + 0.9 * e.value(v[i]);
    else
      expect = e.value(r[i]) + 0.9 * expect;
  }
  EXPECT_LT((e.value(t1[0]) - expect).norm(), 1e-12);

  EXPECT_THROW(lambda_returns(e, r, v, n, 1.5, 0.5), std::invalid_argument);
  EXPECT_THROW(lambda_returns(e, r, v, n, 0.9, -0.1), std::invalid_argument);
}

// Brute-force oracle: lambda-return as the (1-lambda)-weighted mixture of
// n-step returns, expanded directly from the definition.
Mat brute_force_lambda(const std::vector<Mat>& r, const std::vector<Mat>& v,
                       const std::vector<Mat>& n, double gamma, double lambda, int i) {
  const int H = static_cast<int>(r.size());
  const int max_n = H - i;
  Mat total = Mat::Zero(r[0].rows(), r[0].cols());
  for (int steps = 1; steps <= max_n; ++steps) {
    // n-step return from state i
    Mat g = Mat::Zero(r[0].rows(), r[0].cols());
    Mat discount = Mat::Ones(r[0].rows(), r[0].cols());
    for (int m = 0; m < steps; ++m) {
      g += discount.cwiseProduct(r[i + m]);
      discount = gamma * discount.cwiseProduct(n[i + m]);
    }
    g += discount.cwiseProduct(v[i + steps - 1]);
    double w = (steps == max_n) ? std::pow(lambda, steps - 1)
                                : (1.0 - lambda) * std::pow(lambda, steps - 1);
    total += w * g;
  }
  return total;
}

TEST(LambdaReturns, MatchesBruteForceOracle) {
  Rng rng(8);
  EvalEngine e;
  for (int trial = 0; trial < 200; ++trial) {
    const int H = 1 + static_cast<int>(rng.below(8));
    double gamma = rng.uniform();
    double lambda = rng.uniform();
    std::vector<Mat> rm, vm, nm;
    std::vector<EvalEngine::V> r, v, n;
    for (int i = 0; i < H; ++i) {
      rm.push_back(rng.normal_matrix(1, 2));
      vm.push_back(rng.normal_matrix(1, 2));
      nm.push_back(Mat::Constant(1, 2, rng.uniform()));
      r.push_back(e.constant(rm.back()));
      v.push_back(e.constant(vm.back()));
      n.push_back(e.constant(nm.back()));
    }
    auto targets = lambda_returns(e, r, v, n, gamma, lambda);
    for (int i = 0; i < H; ++i) {
      Mat expect = brute_force_lambda(rm, vm, nm, gamma, lambda, i);
      ASSERT_LT((e.value(targets[i]) - expect).cwiseAbs().maxCoeff(), 1e-10)
          << "trial " << trial << " step " << i;
    }
  }
}

TEST(Behavior, CriticLossZeroAtTargets) {
  Rng rng(9);
  Mat t = rng.normal_matrix(1, 10);
  EXPECT_EQ(critic_regression_loss(t, t), 0.0);
  Mat off = t.array() + 2.0;
  EXPECT_NEAR(critic_regression_loss(off, t), 2.0, 1e-12);
}

TEST(Behavior, UpdateFreezesWorldModelAndMovesActorCritic) {
  auto s = make_setup(Variant::dali_d, 10);
  Rng rng(11);
  const int B = 4;
  Mat h0 = rng.normal_matrix(8, B);
  Mat z0 = Mat::Zero(32, B);
  Mat ctx = rng.normal_matrix(8, B);
  Adam actor_opt(s->ac.actor_parameters(), 1e-3);
  Adam critic_opt(s->ac.critic_parameters(), 1e-3);
  auto wm_params = s->wm.parameters();
  const std::uint64_t wm_hash = hash_params(wm_params);
  const std::uint64_t actor_hash = hash_params(s->ac.actor_parameters());
  const std::uint64_t critic_hash = hash_params(s->ac.critic_parameters());
  BehaviorConfig bc;
  bc.horizon = 5;
  auto diag = actor_critic_update(s->wm, s->ac, h0, z0, ctx, bc, actor_opt, critic_opt, rng);
  EXPECT_TRUE(std::isfinite(diag.actor_loss));
  EXPECT_TRUE(std::isfinite(diag.critic_loss));
  EXPECT_EQ(hash_params(wm_params), wm_hash);  // bit-identical
  EXPECT_NE(hash_params(s->ac.actor_parameters()), actor_hash);
  EXPECT_NE(hash_params(s->ac.critic_parameters()), critic_hash);
}

TEST(Behavior, EntropyTermVanishesWithZeroCoefficient) {
  auto s = make_setup(Variant::dreamer_dr, 12);
  Rng r1(13), r2(13);
  const int B = 3;
  Mat h0 = Mat::Zero(8, B);
  Mat z0 = Mat::Zero(32, B);
  BehaviorConfig bc;
  bc.horizon = 4;
  bc.entropy_coef = 0.0;

  // With zero coefficient the actor loss must be exactly -mean(sum targets).
  Adam aopt(s->ac.actor_parameters(), 0.0);
  Adam copt(s->ac.critic_parameters(), 0.0);
  auto diag = actor_critic_update(s->wm, s->ac, h0, z0, Mat(), bc, aopt, copt, r1);
  EXPECT_EQ(diag.entropy, 0.0);

  Tape tape;
  TapeEngine e(tape);
  auto traj = imagine(e, s->wm, s->ac, e.constant(h0), e.constant(z0), std::nullopt,
                      bc.horizon, r2);
  std::vector<Var> values;
  for (int i = 1; i <= bc.horizon; ++i) values.push_back(s->ac.value(e, traj.feat[i]));
  auto targets = lambda_returns(e, traj.rewards, values, traj.continues, bc.gamma, bc.td_lambda);
  Var sum = targets[0];
  for (int i = 1; i < bc.horizon; ++i) sum = e.add(sum, targets[i]);
  EXPECT_EQ(diag.actor_loss, -tape.value(sum).mean());
}

TEST(Behavior, ActorGradientsMatchFiniteDifferencesSoftPath) {
  // Fully differentiable configuration: soft latents and greedy actions; the
  // actor objective then admits an exact finite-difference check.
  auto s = make_setup(Variant::dreamer_dr, 14);
  Rng rng(15);
  const int B = 2, H = 3;
  Mat h0 = rng.normal_matrix(8, B);
  Mat z0 = Mat::Zero(32, B);
  auto actor_params = s->ac.actor_parameters();
  auto build = [&](auto& e) {
    Rng srng(20);
    auto traj = imagine(e, s->wm, s->ac, e.constant(h0), e.constant(z0), std::nullopt, H, srng,
                        ZMode::soft, /*greedy=*/true);
    std::vector<typename std::decay_t<decltype(e)>::V> values;
    for (int i = 1; i <= H; ++i) values.push_back(s->ac.value(e, traj.feat[i]));
    auto targets = lambda_returns(e, traj.rewards, values, traj.continues, 0.99, 0.95);
    auto sum = targets[0];
    for (int i = 1; i < H; ++i) sum = e.add(sum, targets[i]);
    return e.scale(e.mean_all(sum), -1.0);
  };
  for (Parameter* p : actor_params) p->zero_grad();
  {
    Tape tape;
    TapeEngine e(tape);
    Var loss = build(e);
    tape.backward(loss);
    e.accumulate_param_grads();
  }
  auto loss_fn = [&]() {
    EvalEngine e;
    return e.value(build(e))(0, 0);
  };
  auto res = testing::check_gradients(loss_fn, actor_params, 1e-4, 1e-6);
  EXPECT_TRUE(res.ok) << res.worst_coord << " rel err " << res.worst_rel_err;
}

TEST(Behavior, CriticGradientsMatchFiniteDifferences) {
  auto s = make_setup(Variant::dreamer_dr, 16);
  Rng rng(17);
  Mat feats = rng.normal_matrix(8 + 32, 6);
  Mat targets = rng.normal_matrix(1, 6);
  auto params = s->ac.critic_parameters();
  for (Parameter* p : params) p->zero_grad();
  {
    Tape tape;
    TapeEngine e(tape);
    Var v = s->ac.value(e, e.constant(feats));
    Var loss = e.scale(e.mean_all(e.square(e.sub(v, e.constant(targets)))), 0.5);
    tape.backward(loss);
    e.accumulate_param_grads();
  }
  auto loss_fn = [&]() {
    EvalEngine e;
    auto v = s->ac.value(e, e.constant(feats));
    return 0.5 * (e.value(v) - targets).array().square().mean();
  };
  auto res = testing::check_gradients(loss_fn, params, 1e-4);
  EXPECT_TRUE(res.ok) << res.worst_coord << " rel err " << res.worst_rel_err;
}

}  // namespace
}  // namespace dali
