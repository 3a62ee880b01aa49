#pragma once

#include "dali/world_model.hpp"

#include <optional>
#include <vector>

namespace dali {

struct ActorCriticConfig {
  int feat_dim = 0;  // d_h + z_dim
  int act_dim = 0;
  int hidden = 128;
  int ctx_dim = 0;  // > 0 only for deep variants
  double log_std_lo = -4.0;
  double log_std_hi = 1.0;
};

template <class V>
struct ActionDist {
  V mean;     // act_dim x B (pre-squash)
  V log_std;  // act_dim x B, bounded via tanh
};

// Tanh-squashed Gaussian actor and scalar critic, with context fan-in for
// deep variants only.
struct ActorCritic {
  Variant variant = Variant::dreamer_dr;
  ActorCriticConfig cfg;
  Mlp actor;   // -> 2*act_dim (mean, raw log_std)
  Mlp critic;  // -> 1

  static ActorCritic make(ParamRegistry& reg, const std::string& prefix, Variant variant,
                          const ActorCriticConfig& cfg, Rng& rng) {
    if (variant_deep(variant) != (cfg.ctx_dim > 0))
      throw std::invalid_argument("actor-critic ctx_dim must be set exactly for deep variants");
    ActorCritic ac;
    ac.variant = variant;
    ac.cfg = cfg;
    const int in = cfg.feat_dim + cfg.ctx_dim;
    ac.actor = Mlp::make(reg, prefix + ".actor", in, {cfg.hidden, cfg.hidden}, 2 * cfg.act_dim, rng);
    ac.critic = Mlp::make(reg, prefix + ".critic", in, {cfg.hidden, cfg.hidden}, 1, rng);
    return ac;
  }

  std::vector<Parameter*> actor_parameters() const {
    std::vector<Parameter*> ps;
    for (const Linear& l : actor.layers) {
      ps.push_back(l.W);
      ps.push_back(l.b);
    }
    return ps;
  }

  std::vector<Parameter*> critic_parameters() const {
    std::vector<Parameter*> ps;
    for (const Linear& l : critic.layers) {
      ps.push_back(l.W);
      ps.push_back(l.b);
    }
    return ps;
  }

  template <class E>
  typename E::V with_ctx(E& e, typename E::V feat, std::optional<typename E::V> ctx) const {
    if (variant_deep(variant) != ctx.has_value())
      throw std::invalid_argument(std::string("actor-critic: context ") +
                                  (ctx ? "supplied to a non-deep variant"
                                       : "missing for a deep variant"));
    if (!ctx) return feat;
    return e.concat_rows({feat, *ctx});
  }

  template <class E>
  ActionDist<typename E::V> action_dist(E& e, typename E::V feat,
                                        std::optional<typename E::V> ctx = std::nullopt) const {
    auto out = actor(e, with_ctx(e, feat, ctx));
    auto mean = e.slice_rows(out, 0, cfg.act_dim);
    auto raw = e.slice_rows(out, cfg.act_dim, cfg.act_dim);
    // log_std squashed into [lo, hi]
    auto unit = e.scale(e.add_scalar(e.tanh_(raw), 1.0), 0.5);
    auto log_std = e.add_scalar(e.scale(unit, cfg.log_std_hi - cfg.log_std_lo), cfg.log_std_lo);
    return {mean, log_std};
  }

  // Reparameterized sample: tanh(mean + std * eps) with eps drawn once.
  template <class E>
  typename E::V sample_action(E& e, const ActionDist<typename E::V>& dist, Rng& rng) const {
    const Mat& m = e.value(dist.mean);
    Mat eps(m.rows(), m.cols());
    for (int c = 0; c < eps.cols(); ++c)
      for (int r = 0; r < eps.rows(); ++r) eps(r, c) = rng.normal();
    auto pre = e.add(dist.mean, e.mul(e.exp_(dist.log_std), e.constant(eps)));
    return e.tanh_(pre);
  }

  template <class E>
  typename E::V greedy_action(E& e, const ActionDist<typename E::V>& dist) const {
    return e.tanh_(dist.mean);
  }

  // Pre-squash Gaussian entropy per batch column (1 x B).
  template <class E>
  typename E::V entropy(E& e, const ActionDist<typename E::V>& dist) const {
    const double c = 0.5 * std::log(2.0 * M_PI * std::exp(1.0));
    auto per_dim = e.add_scalar(dist.log_std, c);
    return e.matmul(e.constant(Mat::Ones(1, cfg.act_dim)), per_dim);
  }

  template <class E>
  typename E::V value(E& e, typename E::V feat,
                      std::optional<typename E::V> ctx = std::nullopt) const {
    return critic(e, with_ctx(e, feat, ctx));
  }
};

// H-step imagined rollout from posterior start states. The context vector is
// fixed once for the whole trajectory; deep variants thread it through the
// sequence model, heads, and actor.
template <class V>
struct ImaginedTrajectory {
  std::vector<V> h;          // H+1
  std::vector<V> z;          // H+1
  std::vector<V> feat;       // H+1, concat(h, z)
  std::vector<V> actions;    // H
  std::vector<V> rewards;    // H, predicted at the successor state
  std::vector<V> continues;  // H, continue probability at the successor state
  std::optional<V> ctx;      // the single fixed context (absent for dreamer_dr / shallow)
};

template <class E>
ImaginedTrajectory<typename E::V> imagine(E& e, const WorldModel& wm, const ActorCritic& ac,
                                          typename E::V h0, typename E::V z0,
                                          std::optional<typename E::V> ctx, int H, Rng& rng,
                                          ZMode zmode = ZMode::sample, bool greedy = false) {
  if (H < 0) throw std::invalid_argument("imagine: horizon must be >= 0");
  const bool deep = variant_deep(wm.variant);
  if (deep != ctx.has_value())
    throw std::invalid_argument("imagine: context must be present exactly for deep variants");
  ImaginedTrajectory<typename E::V> traj;
  traj.ctx = ctx;
  traj.h.push_back(h0);
  traj.z.push_back(z0);
  traj.feat.push_back(e.concat_rows({h0, z0}));
  for (int tau = 0; tau < H; ++tau) {
    auto dist = ac.action_dist(e, traj.feat.back(), deep ? ctx : std::nullopt);
    auto a = greedy ? ac.greedy_action(e, dist) : ac.sample_action(e, dist, rng);
    auto h = wm.sequence_step(e, traj.h.back(), traj.z.back(), a, deep ? ctx : std::nullopt);
    if (!e.value(h).allFinite()) throw std::runtime_error("imagine: non-finite state at step " +
                                                          std::to_string(tau + 1));
    auto pri = wm.prior(e, h);
    auto z = wm.realize_z(e, pri, zmode, rng);
    auto out = wm.heads(e, h, z, deep ? ctx : std::nullopt);
    traj.actions.push_back(a);
    traj.h.push_back(h);
    traj.z.push_back(z);
    traj.feat.push_back(e.concat_rows({h, z}));
    traj.rewards.push_back(out.reward);
    traj.continues.push_back(e.sigmoid(out.cont_logit));
  }
  return traj;
}

// TD(lambda) return targets, computed backward. Arrays are aligned on
// post-action steps: rewards[i], continues[i] and values[i] all belong to the
// state reached by action i; targets[i] is the return target for the state
// action i was taken from.
template <class E>
std::vector<typename E::V> lambda_returns(E& e, const std::vector<typename E::V>& rewards,
                                          const std::vector<typename E::V>& values,
                                          const std::vector<typename E::V>& continues,
                                          double gamma, double lambda) {
  if (gamma < 0 || gamma > 1 || lambda < 0 || lambda > 1)
    throw std::invalid_argument("lambda_returns: gamma and lambda must be in [0,1]");
  const int H = static_cast<int>(rewards.size());
  if (static_cast<int>(values.size()) != H || static_cast<int>(continues.size()) != H)
    throw std::invalid_argument("lambda_returns: arrays must have equal length");
  std::vector<typename E::V> targets(H);
  for (int i = H - 1; i >= 0; --i) {
    typename E::V tail;
    if (i == H - 1) {
      tail = values[i];
    } else {
      tail = e.add(e.scale(values[i], 1.0 - lambda), e.scale(targets[i + 1], lambda));
    }
    targets[i] = e.add(rewards[i], e.scale(e.mul(continues[i], tail), gamma));
  }
  return targets;
}

inline double critic_regression_loss(const Mat& values, const Mat& targets) {
  return 0.5 * (values - targets).array().square().mean();
}

struct BehaviorUpdateDiag {
  double actor_loss = 0.0;
  double critic_loss = 0.0;
  double entropy = 0.0;
  double mean_return = 0.0;
};

struct BehaviorConfig {
  int horizon = 15;
  double gamma = 0.99;
  double td_lambda = 0.95;
  double entropy_coef = 3e-4;
};

// One actor step and one critic step from a batch of detached start states.
// The actor maximizes summed lambda-returns by backprop through the frozen
// dynamics; the critic regresses to stop-gradient targets on detached
// features. World-model and encoder parameters receive no update.
inline BehaviorUpdateDiag actor_critic_update(const WorldModel& wm, const ActorCritic& ac,
                                              const Mat& h0, const Mat& z0, const Mat& ctx0,
                                              const BehaviorConfig& bc, Adam& actor_opt,
                                              Adam& critic_opt, Rng& rng) {
  BehaviorUpdateDiag diag;
  const bool deep = variant_deep(wm.variant);
  if (deep == (ctx0.size() == 0))
    throw std::invalid_argument("actor_critic_update: ctx must be given exactly for deep variants");
  const int H = bc.horizon;
  if (H < 1) throw std::invalid_argument("actor_critic_update: horizon must be >= 1");

  std::vector<Mat> feats_detached;  // for the critic pass
  std::vector<Mat> targets_detached;
  Mat ctx_rep;
  {
    Tape tape;
    TapeEngine e(tape);
    std::optional<Var> ctx;
    if (deep) ctx = e.constant(ctx0);
    auto traj = imagine(e, wm, ac, e.constant(h0), e.constant(z0), ctx, H, rng);

    std::vector<Var> values;  // v(s_{tau+1}), tau = 0..H-1
    for (int i = 1; i <= H; ++i)
      values.push_back(ac.value(e, traj.feat[i], deep ? traj.ctx : std::nullopt));
    auto targets = lambda_returns(e, traj.rewards, values, traj.continues, bc.gamma, bc.td_lambda);

    Var sum_returns = targets[0];
    for (int i = 1; i < H; ++i) sum_returns = e.add(sum_returns, targets[i]);
    Var actor_loss = e.scale(e.mean_all(sum_returns), -1.0);
    if (bc.entropy_coef != 0.0) {
      Var ent = ac.entropy(e, ac.action_dist(e, traj.feat[0], deep ? traj.ctx : std::nullopt));
      for (int i = 1; i < H; ++i) {
        auto d = ac.action_dist(e, traj.feat[i], deep ? traj.ctx : std::nullopt);
        ent = e.add(ent, ac.entropy(e, d));
      }
      diag.entropy = tape.value(ent).mean() / H;
      actor_loss = e.sub(actor_loss, e.scale(e.mean_all(ent), bc.entropy_coef));
    }
    diag.actor_loss = tape.value(actor_loss)(0, 0);
    diag.mean_return = tape.value(targets[0]).mean();
    if (!std::isfinite(diag.actor_loss))
      throw std::runtime_error("actor_critic_update: non-finite actor loss");

    actor_opt.zero_grad();
    tape.backward(actor_loss);
    e.accumulate_param_grads();
    actor_opt.step();

    for (int i = 0; i < H; ++i) {
      feats_detached.push_back(tape.value(traj.feat[i]));
      targets_detached.push_back(tape.value(targets[i]));
    }
    if (deep) ctx_rep = tape.value(*traj.ctx);
  }

  {
    // Critic pass on detached features; one wide forward over H*B columns.
    const int B = static_cast<int>(h0.cols());
    Mat feats(feats_detached[0].rows(), H * B);
    Mat targs(1, H * B);
    for (int i = 0; i < H; ++i) {
      feats.middleCols(i * B, B) = feats_detached[i];
      targs.middleCols(i * B, B) = targets_detached[i];
    }
    Tape tape;
    TapeEngine e(tape);
    std::optional<Var> ctx;
    if (deep) {
      Mat ctx_tiled(ctx_rep.rows(), H * B);
      for (int i = 0; i < H; ++i) ctx_tiled.middleCols(i * B, B) = ctx_rep;
      ctx = e.constant(ctx_tiled);
    }
    Var v = ac.value(e, e.constant(feats), ctx);
    Var loss = e.scale(e.mean_all(e.square(e.sub(v, e.constant(targs)))), 0.5);
    diag.critic_loss = tape.value(loss)(0, 0);
    if (!std::isfinite(diag.critic_loss))
      throw std::runtime_error("actor_critic_update: non-finite critic loss");
    critic_opt.zero_grad();
    tape.backward(loss);
    e.accumulate_param_grads();
    critic_opt.step();
  }
  return diag;
}

}  // namespace dali
