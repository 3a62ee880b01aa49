#pragma once

#include "dali/common.hpp"

#include <algorithm>
#include <string>
#include <vector>

namespace dali {

// Physical context vector; fixed within an episode, resampled across
// episodes.
struct Context {
  std::vector<double> values;
  std::vector<std::string> names;

  int dim() const { return static_cast<int>(values.size()); }
};

// Per-dimension train range plus two disjoint evaluation intervals flanking
// it: [eval_lo, train_lo) below and (train_hi, eval_hi] above.
struct ContextDim {
  std::string name;
  double default_value = 0.0;
  double train_lo = 0.0, train_hi = 0.0;
  double eval_lo = 0.0, eval_hi = 0.0;

  bool in_train(double v) const { return v >= train_lo && v <= train_hi; }
  bool in_eval(double v) const {
    return (v >= eval_lo && v < train_lo) || (v > train_hi && v <= eval_hi);
  }
  bool in_union(double v) const { return in_train(v) || in_eval(v); }

  double sample_train(Rng& rng) const { return rng.uniform(train_lo, train_hi); }

  // Uniform over the two eval intervals, weighted by their lengths.
  double sample_eval(Rng& rng) const {
    double lo_len = train_lo - eval_lo;
    double hi_len = eval_hi - train_hi;
    double u = rng.uniform() * (lo_len + hi_len);
    if (u < lo_len) return eval_lo + u;
    return train_hi + (u - lo_len);
  }

  // Maps train-union-eval onto [-1, 1]; used when ground-truth context is fed
  // to a model.
  double normalize(double v) const { return -1.0 + 2.0 * (v - eval_lo) / (eval_hi - eval_lo); }
};

struct ContextSpace {
  std::vector<ContextDim> dims;

  int dim() const { return static_cast<int>(dims.size()); }

  Context default_context() const {
    Context c;
    for (const auto& d : dims) {
      c.values.push_back(d.default_value);
      c.names.push_back(d.name);
    }
    return c;
  }

  void validate(const Context& c) const {
    if (c.dim() != dim()) throw std::invalid_argument("context dimension mismatch");
    for (int i = 0; i < dim(); ++i) {
      if (!std::isfinite(c.values[i]))
        throw std::invalid_argument("context value not finite: " + dims[i].name);
      if (!dims[i].in_union(c.values[i]))
        throw std::invalid_argument("context value outside train/eval ranges: " + dims[i].name +
                                    " = " + format_double(c.values[i]));
    }
  }

  Vec normalized(const Context& c) const {
    Vec out(dim());
    for (int i = 0; i < dim(); ++i) out(i) = dims[i].normalize(c.values[i]);
    return out;
  }
};

enum class Regime { interpolate, extrapolate, mixed };

inline const char* to_string(Regime r) {
  switch (r) {
    case Regime::interpolate: return "interpolate";
    case Regime::extrapolate: return "extrapolate";
    case Regime::mixed: return "mixed";
  }
  return "?";
}

// Labels a valid context by how many of its dimensions are outside the
// training range: none -> interpolate, all -> extrapolate, some -> mixed.
inline Regime regime_of(const ContextSpace& space, const Context& c) {
  space.validate(c);
  int ood = 0;
  for (int i = 0; i < space.dim(); ++i)
    if (!space.dims[i].in_train(c.values[i])) ++ood;
  if (ood == 0) return Regime::interpolate;
  if (ood == space.dim()) return Regime::extrapolate;
  return Regime::mixed;
}

enum class ContextMode { single_0, single_1, double_both };

inline ContextMode context_mode_from_string(const std::string& s) {
  if (s == "single_0") return ContextMode::single_0;
  if (s == "single_1") return ContextMode::single_1;
  if (s == "double") return ContextMode::double_both;
  throw std::invalid_argument("unknown context mode: " + s);
}

inline const char* to_string(ContextMode m) {
  switch (m) {
    case ContextMode::single_0: return "single_0";
    case ContextMode::single_1: return "single_1";
    case ContextMode::double_both: return "double";
  }
  return "?";
}

// Training contexts: single_k varies dimension k uniformly over its train
// range with the other dimension at default; double samples every dimension
// uniformly over its train range.
inline std::vector<Context> sample_contexts(const ContextSpace& space, ContextMode mode, int n,
                                            std::uint64_t seed) {
  if (n < 1) throw std::invalid_argument("sample_contexts: n must be >= 1");
  if (mode == ContextMode::single_1 && space.dim() < 2)
    throw std::invalid_argument("sample_contexts: single_1 requires a 2-dimensional space");
  Rng rng(seed);
  std::vector<Context> out;
  out.reserve(n);
  for (int k = 0; k < n; ++k) {
    Context c = space.default_context();
    switch (mode) {
      case ContextMode::single_0:
        c.values[0] = space.dims[0].sample_train(rng);
        break;
      case ContextMode::single_1:
        c.values[1] = space.dims[1].sample_train(rng);
        break;
      case ContextMode::double_both:
        for (int i = 0; i < space.dim(); ++i) c.values[i] = space.dims[i].sample_train(rng);
        break;
    }
    out.push_back(std::move(c));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Environments. Both are analytic, Euler-integrated at a fixed dt with states
// clamped to a documented box; closed forms are in docs/environments.md.
// ---------------------------------------------------------------------------

enum class EnvId { swing, hopper };

inline EnvId env_id_from_string(const std::string& s) {
  if (s == "swing") return EnvId::swing;
  if (s == "hopper") return EnvId::hopper;
  throw std::invalid_argument("unknown env id: " + s);
}

inline const char* to_string(EnvId id) {
  return id == EnvId::swing ? "swing" : "hopper";
}

struct StepResult {
  Vec observation;
  double reward = 0.0;
  bool done = false;
};

class CmdpEnv {
 public:
  static constexpr double kDt = 0.05;

  // swing constants
  static constexpr double kSwingDamping = 0.15;
  static constexpr double kSwingTorqueGain = 1.5;
  static constexpr double kSwingAngleBound = 4.0 * M_PI;
  static constexpr double kSwingVelBound = 20.0;

  // hopper constants
  static constexpr double kHopperDrive = 4.0;
  static constexpr double kHopperFriction = 0.05;
  static constexpr double kHopperVelBound = 25.0;
  static constexpr double kHopperRewardVel = 8.0;

  static ContextSpace space(EnvId id) {
    ContextSpace s;
    if (id == EnvId::swing) {
      s.dims = {{"gravity", 9.81, 4.9, 14.7, 0.98, 19.6},
                {"length", 0.3, 0.15, 0.45, 0.03, 0.6}};
    } else {
      s.dims = {{"gravity", 9.81, 4.9, 14.7, 0.98, 19.6},
                {"actuator", 1.0, 0.5, 1.5, 0.1, 2.0}};
    }
    return s;
  }

  CmdpEnv(EnvId id, Context c, std::uint64_t seed, double noise_sigma = 0.01,
          int episode_len = 200)
      : id_(id), context_(std::move(c)), rng_(seed), sigma_(noise_sigma), T_(episode_len) {
    if (sigma_ < 0) throw std::invalid_argument("noise sigma must be >= 0");
    if (T_ < 1) throw std::invalid_argument("episode length must be >= 1");
    space(id_).validate(context_);
    state_ = Vec::Zero(state_dim());
  }

  int state_dim() const { return id_ == EnvId::swing ? 2 : 1; }
  int obs_dim() const { return state_dim(); }
  int act_dim() const { return 1; }
  int episode_len() const { return T_; }
  int t() const { return t_; }
  bool done() const { return t_ >= T_; }
  const Vec& state() const { return state_; }
  const Context& context() const { return context_; }
  EnvId id() const { return id_; }

  // Test/analysis hook: overwrite the physical state in place.
  void set_state(const Vec& s) {
    if (s.size() != state_dim()) throw std::invalid_argument("set_state: bad dimension");
    state_ = s;
  }

  Vec reset() {
    t_ = 0;
    if (id_ == EnvId::swing) {
      state_ = Vec::Zero(2);
      state_(0) = rng_.uniform(-0.1, 0.1);  // near the stable equilibrium
    } else {
      state_ = Vec::Zero(1);
    }
    return observe();
  }

  StepResult step(const Vec& action) {
    if (done()) throw std::logic_error("step: episode already finished");
    if (action.size() != act_dim()) throw std::invalid_argument("step: bad action dimension");
    const double a = std::clamp(action(0), -1.0, 1.0);
    double reward = 0.0;
    if (id_ == EnvId::swing) {
      const double g = context_.values[0];
      const double len = context_.values[1];
      const double theta = state_(0), omega = state_(1);
      const double accel =
          -(g / len) * std::sin(theta) - kSwingDamping * omega + (kSwingTorqueGain / len) * a;
      double theta_n = theta + kDt * omega;
      double omega_n = omega + kDt * accel;
      theta_n = std::clamp(theta_n, -kSwingAngleBound, kSwingAngleBound);
      omega_n = std::clamp(omega_n, -kSwingVelBound, kSwingVelBound);
      state_(0) = theta_n;
      state_(1) = omega_n;
      reward = 0.5 * (1.0 - std::cos(theta_n));
    } else {
      const double g = context_.values[0];
      const double beta = context_.values[1];
      const double v = state_(0);
      double v_n = v + kDt * (kHopperDrive * beta * a - kHopperFriction * g * v);
      v_n = std::clamp(v_n, -kHopperVelBound, kHopperVelBound);
      state_(0) = v_n;
      reward = std::clamp(v_n / kHopperRewardVel, 0.0, 1.0);
    }
    ++t_;
    StepResult res;
    res.observation = observe();
    res.reward = reward;
    res.done = done();
    return res;
  }

 private:
  Vec observe() {
    Vec o = state_;
    if (sigma_ > 0)
      for (int i = 0; i < o.size(); ++i) o(i) += sigma_ * rng_.normal();
    return o;
  }

  EnvId id_;
  Context context_;
  Rng rng_;
  double sigma_;
  int T_;
  int t_ = 0;
  Vec state_;
};

inline CmdpEnv make_env(EnvId id, const Context& c, std::uint64_t seed,
                        double noise_sigma = 0.01, int episode_len = 200) {
  return CmdpEnv(id, c, seed, noise_sigma, episode_len);
}

}  // namespace dali
