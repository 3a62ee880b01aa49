#pragma once

#include "dali/behavior.hpp"
#include "dali/checkpoint.hpp"
#include "dali/config.hpp"
#include "dali/context_encoder.hpp"
#include "dali/envs.hpp"
#include "dali/world_model.hpp"

#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace dali {

// ---------------------------------------------------------------------------
// Replay storage
// ---------------------------------------------------------------------------

struct Episode {
  Mat obs;      // d_o x (T+1): o_0..o_T
  Mat act;      // d_a x T: act.col(t) taken after observing o_t
  Vec rew;      // T: rew(t) arrives with o_{t+1}
  Context ctx;  // ground truth; only crssm_* training paths may read it

  int length() const { return static_cast<int>(act.cols()); }
  double episode_return() const { return rew.sum(); }
};

class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity_steps = 1000000)
      : capacity_steps_(capacity_steps) {}

  void add(Episode ep) {
    total_steps_ += ep.length();
    episodes_.push_back(std::move(ep));
    while (total_steps_ > capacity_steps_ && episodes_.size() > 1) {
      total_steps_ -= episodes_.front().length();
      episodes_.erase(episodes_.begin());
    }
  }

  std::size_t steps() const { return total_steps_; }
  std::size_t size() const { return episodes_.size(); }
  const Episode& episode(std::size_t i) const { return episodes_[i]; }
  Episode& episode_mutable(std::size_t i) { return episodes_[i]; }

  struct SeqRef {
    int ep = 0;
    int start = 0;  // step index into 0..T (T+1 per-step records per episode)
  };

  // Uniform over all valid (episode, start) pairs; sequences of L per-step
  // records never cross an episode boundary.
  SeqRef sample_ref(Rng& rng, int L) const {
    std::size_t total = 0;
    for (const auto& ep : episodes_) {
      const int n = ep.length() + 1;  // per-step records
      if (n >= L) total += static_cast<std::size_t>(n - L + 1);
    }
    if (total == 0) throw std::runtime_error("replay: no episode long enough for requested L");
    std::uint64_t r = rng.below(total);
    for (std::size_t i = 0; i < episodes_.size(); ++i) {
      const int n = episodes_[i].length() + 1;
      if (n < L) continue;
      const std::uint64_t span = static_cast<std::uint64_t>(n - L + 1);
      if (r < span) return {static_cast<int>(i), static_cast<int>(r)};
      r -= span;
    }
    throw std::logic_error("replay: sampler fell off the end");
  }

 private:
  std::vector<Episode> episodes_;
  std::size_t capacity_steps_;
  std::size_t total_steps_ = 0;
};

// Per-step record view used to assemble batches: (o_i, a_prev_i, r_i, cont_i)
// with zeros at the episode start and cont = 0 at the terminal step.
inline void step_record(const Episode& ep, int i, Vec* o, Vec* a_prev, double* r, double* cont) {
  *o = ep.obs.col(i);
  *a_prev = (i == 0) ? Vec::Zero(ep.act.rows()) : Vec(ep.act.col(i - 1));
  *r = (i == 0) ? 0.0 : ep.rew(i - 1);
  *cont = (i == ep.length()) ? 0.0 : 1.0;
}

// Append-only episode persistence (binary; layout in docs/formats.md).
namespace replay_io {

inline void append(std::ofstream& out, const Episode& ep) {
  const char magic[4] = {'D', 'E', 'P', '1'};
  out.write(magic, 4);
  std::int32_t dims[4] = {static_cast<std::int32_t>(ep.obs.rows()),
                          static_cast<std::int32_t>(ep.act.rows()), ep.length(),
                          static_cast<std::int32_t>(ep.ctx.values.size())};
  out.write(reinterpret_cast<const char*>(dims), sizeof(dims));
  out.write(reinterpret_cast<const char*>(ep.ctx.values.data()),
            static_cast<std::streamsize>(sizeof(double) * ep.ctx.values.size()));
  auto dump = [&](const double* p, std::size_t n) {
    out.write(reinterpret_cast<const char*>(p), static_cast<std::streamsize>(sizeof(double) * n));
  };
  dump(ep.obs.data(), ep.obs.size());
  dump(ep.act.data(), ep.act.size());
  dump(ep.rew.data(), ep.rew.size());
  out.flush();
}

inline std::vector<Episode> load_all(const std::string& path, const ContextSpace& space) {
  std::vector<Episode> out;
  std::ifstream in(path, std::ios::binary);
  if (!in) return out;
  while (true) {
    char magic[4];
    in.read(magic, 4);
    if (!in) break;
    if (std::memcmp(magic, "DEP1", 4) != 0) throw std::runtime_error("corrupt episode file");
    std::int32_t dims[4];
    in.read(reinterpret_cast<char*>(dims), sizeof(dims));
    Episode ep;
    ep.ctx.values.resize(dims[3]);
    in.read(reinterpret_cast<char*>(ep.ctx.values.data()),
            static_cast<std::streamsize>(sizeof(double) * dims[3]));
    for (const auto& d : space.dims) ep.ctx.names.push_back(d.name);
    ep.obs.resize(dims[0], dims[2] + 1);
    ep.act.resize(dims[1], dims[2]);
    ep.rew.resize(dims[2]);
    auto slurp = [&](double* p, std::size_t n) {
      in.read(reinterpret_cast<char*>(p), static_cast<std::streamsize>(sizeof(double) * n));
    };
    slurp(ep.obs.data(), ep.obs.size());
    slurp(ep.act.data(), ep.act.size());
    slurp(ep.rew.data(), ep.rew.size());
    if (!in) throw std::runtime_error("truncated episode file");
    out.push_back(std::move(ep));
  }
  return out;
}

}  // namespace replay_io

// ---------------------------------------------------------------------------
// Train configuration (mirrors the config schema; see config.hpp)
// ---------------------------------------------------------------------------

struct TrainConfig {
  EnvId env = EnvId::swing;
  Variant variant = Variant::dali_s;
  ContextMode context_mode = ContextMode::double_both;
  std::uint64_t seed = 0;
  long total_steps = 50000;
  int episode_len = 200;   // T
  int context_k = 32;      // K
  int batch_size = 16;     // B
  int seq_len = 64;        // L
  int horizon = 15;        // H
  int seed_episodes = 5;   // S
  int collect_interval = 4;  // C
  double lambda_cross = 1.0;
  double lr = 3e-4;
  double lr_ctx = 1e-3;
  double gamma = 0.99;
  double td_lambda = 0.95;
  double entropy_coef = 3e-4;
  double free_bits = 1.0;
  double kl_balance = 0.8;
  double grad_clip = 100.0;
  int imag_starts = 128;
  int n_train_contexts = 100;
  long checkpoint_every = 5000;
  int d_h = 128;
  int wm_hidden = 128;
  int enc_width = 256;
  int fwd_hidden = 128;
  int ac_hidden = 128;
  bool pos_encoding = true;
  Pooling pooling = Pooling::last;
  bool learned_h0 = false;
  double noise_sigma = 0.01;
  std::string out_dir = "runs/run";
  std::string resolved_config_text;  // provenance; set when built from Config

  static TrainConfig from_config(const Config& c) {
    TrainConfig t;
    t.env = env_id_from_string(c.get_text("env"));
    t.variant = variant_from_string(c.get_text("variant"));
    t.context_mode = context_mode_from_string(c.get_text("context_mode"));
    t.seed = static_cast<std::uint64_t>(c.get_int("seed"));
    t.total_steps = c.get_int("total_steps");
    t.episode_len = static_cast<int>(c.get_int("episode_len"));
    t.context_k = static_cast<int>(c.get_int("context_k"));
    t.batch_size = static_cast<int>(c.get_int("batch_size"));
    t.seq_len = static_cast<int>(c.get_int("seq_len"));
    t.horizon = static_cast<int>(c.get_int("horizon"));
    t.seed_episodes = static_cast<int>(c.get_int("seed_episodes"));
    t.collect_interval = static_cast<int>(c.get_int("collect_interval"));
    t.lambda_cross = c.get_real("lambda_cross");
    t.lr = c.get_real("lr");
    t.lr_ctx = c.get_real("lr_ctx");
    t.gamma = c.get_real("gamma");
    t.td_lambda = c.get_real("td_lambda");
    t.entropy_coef = c.get_real("entropy_coef");
    t.free_bits = c.get_real("free_bits");
    t.kl_balance = c.get_real("kl_balance");
    t.grad_clip = c.get_real("grad_clip");
    t.imag_starts = static_cast<int>(c.get_int("imag_starts"));
    t.n_train_contexts = static_cast<int>(c.get_int("n_train_contexts"));
    t.checkpoint_every = c.get_int("checkpoint_every");
    t.d_h = static_cast<int>(c.get_int("d_h"));
    t.wm_hidden = static_cast<int>(c.get_int("wm_hidden"));
    t.enc_width = static_cast<int>(c.get_int("enc_width"));
    t.fwd_hidden = static_cast<int>(c.get_int("fwd_hidden"));
    t.ac_hidden = static_cast<int>(c.get_int("ac_hidden"));
    t.pos_encoding = c.get_bool("pos_encoding");
    t.pooling = c.get_text("pooling") == "mean" ? Pooling::mean : Pooling::last;
    t.learned_h0 = c.get_bool("learned_h0");
    t.noise_sigma = c.get_real("noise_sigma");
    t.out_dir = c.get_text("out_dir");
    t.resolved_config_text = c.resolved_text();
    return t;
  }
};

// Applies ctx*_train/eval/default overrides ("lo:hi" strings) to an
// environment's context space.
inline ContextSpace context_space_from_config(const Config& c) {
  ContextSpace sp = CmdpEnv::space(env_id_from_string(c.get_text("env")));
  auto parse_range = [](const std::string& s, double* lo, double* hi) {
    auto colon = s.find(':');
    if (colon == std::string::npos) throw ConfigError("range must be 'lo:hi': " + s);
    *lo = std::stod(s.substr(0, colon));
    *hi = std::stod(s.substr(colon + 1));
  };
  for (int d = 0; d < sp.dim() && d < 2; ++d) {
    const std::string p = "ctx" + std::to_string(d) + "_";
    if (!c.get_text(p + "train").empty())
      parse_range(c.get_text(p + "train"), &sp.dims[d].train_lo, &sp.dims[d].train_hi);
    if (!c.get_text(p + "eval").empty())
      parse_range(c.get_text(p + "eval"), &sp.dims[d].eval_lo, &sp.dims[d].eval_hi);
    if (!c.get_text(p + "default").empty())
      sp.dims[d].default_value = std::stod(c.get_text(p + "default"));
  }
  return sp;
}

// ---------------------------------------------------------------------------
// Agent bundle: modules + registry + optimizers, built deterministically.
// ---------------------------------------------------------------------------

struct Agent {
  TrainConfig cfg;
  ContextSpace space;
  int obs_dim = 0, act_dim = 0, ctx_dim = 0;

  ParamRegistry reg;
  std::optional<ContextEncoder> encoder;
  WorldModel wm;
  ActorCritic ac;
  std::unique_ptr<Adam> opt_world, opt_ctx, opt_actor, opt_critic;

  explicit Agent(const TrainConfig& tc, std::optional<ContextSpace> space_override = std::nullopt)
      : cfg(tc) {
    space = space_override ? *space_override : CmdpEnv::space(cfg.env);
    CmdpEnv probe(cfg.env, space.default_context(), 0, cfg.noise_sigma, cfg.episode_len);
    obs_dim = probe.obs_dim();
    act_dim = probe.act_dim();

    Rng init_rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
    if (variant_uses_encoder(cfg.variant)) {
      ContextEncoderConfig ecfg;
      ecfg.obs_dim = obs_dim;
      ecfg.act_dim = act_dim;
      ecfg.width = cfg.enc_width;
      ecfg.fwd_hidden = cfg.fwd_hidden;
      ecfg.positional_encoding = cfg.pos_encoding;
      ecfg.pooling = cfg.pooling;
      encoder = ContextEncoder::make(reg, "enc", ecfg, init_rng);
      ctx_dim = ecfg.ctx_dim;
    } else if (variant_uses_true_context(cfg.variant)) {
      ctx_dim = space.dim();
    }

    WorldModelConfig wcfg;
    wcfg.obs_dim = obs_dim;
    wcfg.act_dim = act_dim;
    wcfg.d_h = cfg.d_h;
    wcfg.hidden = cfg.wm_hidden;
    wcfg.ctx_dim = ctx_dim;
    wcfg.learned_h0 = cfg.learned_h0;
    wcfg.free_bits = cfg.free_bits;
    wcfg.kl_balance = cfg.kl_balance;
    wm = WorldModel::make(reg, "wm", cfg.variant, wcfg, init_rng);

    ActorCriticConfig acfg;
    acfg.feat_dim = wcfg.feat_dim();
    acfg.act_dim = act_dim;
    acfg.hidden = cfg.ac_hidden;
    acfg.ctx_dim = variant_deep(cfg.variant) ? ctx_dim : 0;
    ac = ActorCritic::make(reg, "ac", cfg.variant, acfg, init_rng);

    opt_world = std::make_unique<Adam>(wm.parameters(), cfg.lr, cfg.grad_clip);
    if (encoder)
      opt_ctx = std::make_unique<Adam>(encoder->parameters(), cfg.lr_ctx, cfg.grad_clip);
    opt_actor = std::make_unique<Adam>(ac.actor_parameters(), cfg.lr, cfg.grad_clip);
    opt_critic = std::make_unique<Adam>(ac.critic_parameters(), cfg.lr, cfg.grad_clip);
  }

  bool needs_step_ctx() const { return ctx_dim > 0; }
};

// ---------------------------------------------------------------------------
// Online inference state shared by collection, evaluation and analysis.
// ---------------------------------------------------------------------------

enum class PolicyMode { random, actor, greedy };

class OnlineRunner {
 public:
  OnlineRunner(Agent& agent, const Context& true_ctx, std::uint64_t* encoder_evals)
      : agent_(agent), encoder_evals_(encoder_evals) {
    h_ = Mat::Zero(agent.cfg.d_h, 1);
    if (agent.cfg.learned_h0 && agent.wm.h0) h_ = agent.wm.h0->value;
    z_ = Mat::Zero(agent.wm.cfg.z_dim(), 1);
    a_prev_ = Mat::Zero(agent.act_dim, 1);
    if (variant_uses_true_context(agent.cfg.variant))
      ctx_const_ = agent.space.normalized(true_ctx);
  }

  // Feeds one observation; updates (h, z) and returns the chosen action.
  Vec step(const Vec& obs, PolicyMode mode, Rng& rng) {
    append_history(obs);
    EvalEngine e(&rng);
    std::optional<EvalEngine::V> ctx;
    if (agent_.needs_step_ctx()) ctx = e.constant(current_ctx());
    auto h_v = agent_.wm.sequence_step(
        e, e.constant(h_), e.constant(z_), e.constant(a_prev_),
        variant_deep(agent_.cfg.variant) ? ctx : std::nullopt);
    auto post = agent_.wm.posterior(e, h_v, e.constant(Mat(obs)),
                                    variant_shallow(agent_.cfg.variant) ? ctx : std::nullopt);
    auto z_v = agent_.wm.sample_z(e, post, rng);
    h_ = e.value(h_v);
    z_ = e.value(z_v);

    Vec action(agent_.act_dim);
    if (mode == PolicyMode::random) {
      for (int i = 0; i < action.size(); ++i) action(i) = rng.uniform(-1.0, 1.0);
    } else {
      auto feat = e.concat_rows({e.constant(h_), e.constant(z_)});
      auto dist = agent_.ac.action_dist(e, feat,
                                        variant_deep(agent_.cfg.variant) ? ctx : std::nullopt);
      auto a = (mode == PolicyMode::greedy) ? agent_.ac.greedy_action(e, dist)
                                            : agent_.ac.sample_action(e, dist, rng);
      action = e.value(a).col(0);
    }
    a_prev_ = action;
    act_hist_.conservativeResize(agent_.act_dim, act_hist_.cols() + 1);
    act_hist_.col(act_hist_.cols() - 1) = action;
    return action;
  }

  const Mat& h() const { return h_; }
  const Mat& z() const { return z_; }

  // Context fed to the model at the current step (inferred or normalized
  // ground truth); empty for dreamer_dr.
  Mat current_ctx() {
    if (variant_uses_encoder(agent_.cfg.variant)) {
      auto w = pad_window(obs_hist_, act_hist_, agent_.cfg.context_k);
      EvalEngine e;
      if (encoder_evals_) ++(*encoder_evals_);
      return e.value(agent_.encoder->encode(e, w));
    }
    if (variant_uses_true_context(agent_.cfg.variant)) return ctx_const_;
    return Mat();
  }

 private:
  void append_history(const Vec& obs) {
    obs_hist_.conservativeResize(obs.size(), obs_hist_.cols() + 1);
    obs_hist_.col(obs_hist_.cols() - 1) = obs;
  }

  Agent& agent_;
  std::uint64_t* encoder_evals_;
  Mat h_, z_, a_prev_;
  Mat obs_hist_{0, 0};
  Mat act_hist_{0, 0};
  Mat ctx_const_;
};

// ---------------------------------------------------------------------------
// Trainer: the full loop (dynamics -> context -> behavior -> interaction).
// ---------------------------------------------------------------------------

struct IterationDiag {
  WorldModelLossDiag wm;
  double ctx_loss = 0.0;
  BehaviorUpdateDiag behavior;
  double episode_return = 0.0;
};

class Trainer {
 public:
  explicit Trainer(const TrainConfig& cfg,
                   std::optional<ContextSpace> space_override = std::nullopt)
      : agent_(cfg, space_override), cfg_(agent_.cfg), rng_(cfg.seed) {
    train_contexts_ = sample_contexts(agent_.space, cfg_.context_mode, cfg_.n_train_contexts,
                                      cfg_.seed ^ 0xc0ffee);
  }

  Agent& agent() { return agent_; }
  ReplayBuffer& buffer() { return buffer_; }
  Rng& rng() { return rng_; }
  long env_steps() const { return env_steps_; }
  long episodes() const { return episodes_; }
  std::uint64_t encoder_eval_count() const { return encoder_evals_; }

  Episode collect_episode(PolicyMode mode) {
    const Context& ctx = train_contexts_[rng_.below(train_contexts_.size())];
    std::uint64_t env_seed = rng_.raw();
    CmdpEnv env(cfg_.env, ctx, env_seed, cfg_.noise_sigma, cfg_.episode_len);
    Episode ep;
    ep.ctx = ctx;
    const int T = cfg_.episode_len;
    ep.obs.resize(agent_.obs_dim, T + 1);
    ep.act.resize(agent_.act_dim, T);
    ep.rew.resize(T);
    Vec obs = env.reset();
    ep.obs.col(0) = obs;
    OnlineRunner runner(agent_, ctx, &encoder_evals_);
    for (int t = 0; t < T; ++t) {
      Vec action = runner.step(obs, mode, rng_);
      auto res = env.step(action);
      ep.act.col(t) = action;
      ep.rew(t) = res.reward;
      obs = res.observation;
      ep.obs.col(t + 1) = obs;
    }
    env_steps_ += T;
    ++episodes_;
    return ep;
  }

  void add_episode(Episode ep) {
    if (episode_sink_ && episode_sink_->is_open()) replay_io::append(*episode_sink_, ep);
    buffer_.add(std::move(ep));
  }

  // Detached per-step context for a sampled sequence position: inferred
  // embedding for dali variants, normalized truth for crssm.
  Mat step_context(const Episode& ep, int start, int j) {
    if (variant_uses_encoder(cfg_.variant)) {
      // History windows are relative to the sequence start, zero-padded.
      Mat obs_hist = ep.obs.middleCols(start, j + 1);
      Mat act_hist = j > 0 ? Mat(ep.act.middleCols(start, j)) : Mat(agent_.act_dim, 0);
      auto w = pad_window(obs_hist, act_hist, cfg_.context_k);
      EvalEngine e;
      ++encoder_evals_;
      return e.value(agent_.encoder->encode(e, w));
    }
    if (variant_uses_true_context(cfg_.variant)) return agent_.space.normalized(ep.ctx);
    return Mat();
  }

  SequenceBatch assemble_batch(const std::vector<ReplayBuffer::SeqRef>& refs, int L) {
    const int B = static_cast<int>(refs.size());
    SequenceBatch batch;
    const bool with_ctx = agent_.needs_step_ctx();
    for (int t = 0; t < L; ++t) {
      batch.obs.emplace_back(agent_.obs_dim, B);
      batch.act_prev.emplace_back(agent_.act_dim, B);
      batch.reward.emplace_back(1, B);
      batch.cont.emplace_back(1, B);
      if (with_ctx) batch.ctx.emplace_back(agent_.ctx_dim, B);
    }
    for (int b = 0; b < B; ++b) {
      const Episode& ep = buffer_.episode(refs[b].ep);
      for (int t = 0; t < L; ++t) {
        Vec o, a_prev;
        double r, cont;
        step_record(ep, refs[b].start + t, &o, &a_prev, &r, &cont);
        batch.obs[t].col(b) = o;
        batch.act_prev[t].col(b) = a_prev;
        batch.reward[t](0, b) = r;
        batch.cont[t](0, b) = cont;
        if (with_ctx) batch.ctx[t].col(b) = step_context(ep, refs[b].start, t);
      }
    }
    return batch;
  }

  // Phase 1: update world model parameters only.
  WorldModelLossDiag world_model_phase() {
    std::vector<ReplayBuffer::SeqRef> refs;
    for (int b = 0; b < cfg_.batch_size; ++b) refs.push_back(buffer_.sample_ref(rng_, cfg_.seq_len));
    SequenceBatch batch = assemble_batch(refs, cfg_.seq_len);
    WorldModelLossDiag diag;
    agent_.opt_world->zero_grad();
    Tape tape;
    TapeEngine e(tape);
    Var loss = world_model_loss(e, agent_.wm, batch, rng_, &diag);
    tape.backward(loss);
    e.accumulate_param_grads();
    agent_.opt_world->step();
    return diag;
  }

  // Phase 2: context representation learning; updates {encoder, W_z, W_ctx}.
  // Returns 0 for variants without an encoder.
  double context_phase() {
    if (!variant_uses_encoder(cfg_.variant)) return 0.0;
    const int K = cfg_.context_k;
    const int seg_len = K + 2;  // K+1 window steps plus the prediction target
    ContextBatch cb;
    const int B = cfg_.batch_size;
    cb.o_t.resize(agent_.obs_dim, B);
    cb.a_t.resize(agent_.act_dim, B);
    cb.o_next.resize(agent_.obs_dim, B);
    const bool cross = cfg_.lambda_cross == 1.0;
    if (cross) cb.z_post.resize(agent_.wm.cfg.z_dim(), B);
    for (int b = 0; b < B; ++b) {
      auto ref = buffer_.sample_ref(rng_, seg_len);
      const Episode& ep = buffer_.episode(ref.ep);
      // full K-window ending at segment index K
      Mat obs_hist = ep.obs.middleCols(ref.start, K + 1);
      Mat act_hist = K > 0 ? Mat(ep.act.middleCols(ref.start, K)) : Mat(agent_.act_dim, 0);
      cb.windows.push_back(pad_window(obs_hist, act_hist, K));
      Vec o, a_prev;
      double r, cont;
      step_record(ep, ref.start + K, &o, &a_prev, &r, &cont);
      cb.o_t.col(b) = o;
      cb.a_t.col(b) = ep.act.col(ref.start + K);
      cb.o_next.col(b) = ep.obs.col(ref.start + K + 1);
      if (cross) cb.z_post.col(b) = posterior_unroll(ep, ref.start, K);
    }
    agent_.opt_ctx->zero_grad();
    Tape tape;
    TapeEngine e(tape);
    Var loss = loss_total(e, *agent_.encoder, cb, cfg_.lambda_cross);
    const double lv = tape.value(loss)(0, 0);
    if (!std::isfinite(lv)) throw std::runtime_error("context_phase: non-finite loss");
    tape.backward(loss);
    e.accumulate_param_grads();
    agent_.opt_ctx->step();
    return lv;
  }

  // Phase 3: behavior learning on imagined rollouts from posterior states.
  BehaviorUpdateDiag behavior_phase() {
    std::vector<ReplayBuffer::SeqRef> refs;
    for (int b = 0; b < cfg_.batch_size; ++b) refs.push_back(buffer_.sample_ref(rng_, cfg_.seq_len));
    SequenceBatch batch = assemble_batch(refs, cfg_.seq_len);
    const int B = cfg_.batch_size, L = cfg_.seq_len;

    // Posterior unroll on real data, values only (no gradient into theta).
    EvalEngine e(&rng_);
    const bool deep = variant_deep(cfg_.variant);
    const bool shallow = variant_shallow(cfg_.variant);
    auto h = agent_.wm.initial_h(e, B);
    auto z = agent_.wm.initial_z(e, B);
    Mat starts_h(cfg_.d_h, B * L), starts_z(agent_.wm.cfg.z_dim(), B * L);
    Mat starts_ctx;
    if (agent_.needs_step_ctx()) starts_ctx.resize(agent_.ctx_dim, B * L);
    for (int t = 0; t < L; ++t) {
      std::optional<EvalEngine::V> ctx_t;
      if (agent_.needs_step_ctx()) ctx_t = e.constant(batch.ctx[t]);
      h = agent_.wm.sequence_step(e, h, z, e.constant(batch.act_prev[t]),
                                  deep ? ctx_t : std::nullopt);
      auto post = agent_.wm.posterior(e, h, e.constant(batch.obs[t]),
                                      shallow ? ctx_t : std::nullopt);
      z = agent_.wm.sample_z(e, post, rng_);
      starts_h.middleCols(t * B, B) = e.value(h);
      starts_z.middleCols(t * B, B) = e.value(z);
      if (agent_.needs_step_ctx()) starts_ctx.middleCols(t * B, B) = batch.ctx[t];
    }

    // Deterministic subsample of start states.
    const int total = B * L;
    const int n = std::min(cfg_.imag_starts, total);
    const int stride = std::max(1, total / n);
    Mat h0(cfg_.d_h, n), z0(agent_.wm.cfg.z_dim(), n);
    Mat ctx0;
    if (deep) ctx0.resize(agent_.ctx_dim, n);
    for (int i = 0; i < n; ++i) {
      const int src = std::min(total - 1, i * stride);
      h0.col(i) = starts_h.col(src);
      z0.col(i) = starts_z.col(src);
      if (deep) ctx0.col(i) = starts_ctx.col(src);
    }

    BehaviorConfig bc;
    bc.horizon = cfg_.horizon;
    bc.gamma = cfg_.gamma;
    bc.td_lambda = cfg_.td_lambda;
    bc.entropy_coef = cfg_.entropy_coef;
    return actor_critic_update(agent_.wm, agent_.ac, h0, z0, ctx0, bc, *agent_.opt_actor,
                               *agent_.opt_critic, rng_);
  }

  // C update steps (three phases each), then one collected episode.
  IterationDiag train_iteration() {
    if (buffer_.steps() < static_cast<std::size_t>(cfg_.batch_size) * cfg_.seq_len)
      throw std::runtime_error("train_iteration: replay buffer smaller than one batch");
    IterationDiag diag;
    for (int c = 0; c < cfg_.collect_interval; ++c) {
      diag.wm = world_model_phase();
      diag.ctx_loss = context_phase();
      diag.behavior = behavior_phase();
    }
    Episode ep = collect_episode(PolicyMode::actor);
    diag.episode_return = ep.episode_return();
    add_episode(std::move(ep));
    return diag;
  }

  // Greedy evaluation episodes on the default training context; used for the
  // periodic snapshot line in the training log.
  double eval_snapshot(int episodes = 2) {
    double total = 0.0;
    Rng eval_rng(cfg_.seed ^ 0xEEAA0000u ^ static_cast<std::uint64_t>(env_steps_));
    for (int i = 0; i < episodes; ++i) {
      Context c = agent_.space.default_context();
      CmdpEnv env(cfg_.env, c, eval_rng.raw(), cfg_.noise_sigma, cfg_.episode_len);
      OnlineRunner runner(agent_, c, &encoder_evals_);
      Vec obs = env.reset();
      while (!env.done()) {
        Vec a = runner.step(obs, PolicyMode::greedy, eval_rng);
        auto res = env.step(a);
        total += res.reward;
        obs = res.observation;
      }
    }
    return total / episodes / cfg_.episode_len;
  }

  // Full experiment: seeding, training loop, logging, checkpoints, resume.
  void run() {
    namespace fs = std::filesystem;
    fs::create_directories(cfg_.out_dir);
    if (!cfg_.resolved_config_text.empty()) {
      std::ofstream cf(cfg_.out_dir + "/config.resolved");
      cf << cfg_.resolved_config_text;
    }
    open_episode_sink(/*truncate=*/episodes_ == 0);
    std::ofstream log;
    if (episodes_ == 0) {
      log.open(log_path(), std::ios::trunc);
    } else {
      truncate_log_after(env_steps_);
      log.open(log_path(), std::ios::app);
    }

    while (episodes_ < cfg_.seed_episodes ||
           buffer_.steps() < static_cast<std::size_t>(cfg_.batch_size) * cfg_.seq_len) {
      Episode ep = collect_episode(PolicyMode::random);
      write_log_line(log, "seed", ep.episode_return(), nullptr);
      add_episode(std::move(ep));
      maybe_checkpoint(log);
      if (env_steps_ >= cfg_.total_steps) break;
    }
    while (env_steps_ < cfg_.total_steps) {
      IterationDiag diag = train_iteration();
      write_log_line(log, "train", diag.episode_return, &diag);
      maybe_checkpoint(log);
    }
    save_checkpoint(cfg_.out_dir + "/final.ckpt");
  }

  std::string log_path() const { return cfg_.out_dir + "/log.jsonl"; }
  std::string episodes_path() const { return cfg_.out_dir + "/episodes.bin"; }

  void save_checkpoint(const std::string& path) {
    std::map<std::string, std::string> meta;
    meta["config"] = cfg_.resolved_config_text;
    meta["config_hash"] = hex64(fnv1a(cfg_.resolved_config_text));
    meta["variant"] = to_string(cfg_.variant);
    meta["env"] = to_string(cfg_.env);
    meta["env_steps"] = std::to_string(env_steps_);
    meta["episodes"] = std::to_string(episodes_);
    meta["encoder_evals"] = std::to_string(encoder_evals_);
    meta["rng"] = rng_.serialize();
    meta["opt_world_t"] = std::to_string(agent_.opt_world->step_count());
    meta["opt_actor_t"] = std::to_string(agent_.opt_actor->step_count());
    meta["opt_critic_t"] = std::to_string(agent_.opt_critic->step_count());
    if (agent_.opt_ctx) meta["opt_ctx_t"] = std::to_string(agent_.opt_ctx->step_count());
    ckpt::save(path, agent_.reg, meta);
  }

  // Restores parameters, counters, rng and the replay buffer; the trainer
  // must have been constructed from the identical config.
  void restore(const std::string& path) {
    auto loaded = ckpt::load(path);
    if (loaded.meta("config_hash") != hex64(fnv1a(cfg_.resolved_config_text)))
      throw std::runtime_error("restore: config does not match checkpoint");
    ckpt::apply(loaded, agent_.reg);
    env_steps_ = std::stol(loaded.meta("env_steps"));
    episodes_ = std::stol(loaded.meta("episodes"));
    encoder_evals_ = std::stoull(loaded.meta("encoder_evals"));
    rng_.deserialize(loaded.meta("rng"));
    agent_.opt_world->set_step_count(std::stol(loaded.meta("opt_world_t")));
    agent_.opt_actor->set_step_count(std::stol(loaded.meta("opt_actor_t")));
    agent_.opt_critic->set_step_count(std::stol(loaded.meta("opt_critic_t")));
    if (agent_.opt_ctx) agent_.opt_ctx->set_step_count(std::stol(loaded.meta("opt_ctx_t")));
    // replay: reload the persisted episodes, keeping only those collected
    // before the checkpoint
    auto eps = replay_io::load_all(episodes_path(), agent_.space);
    if (static_cast<long>(eps.size()) < episodes_)
      throw std::runtime_error("restore: episode file behind checkpoint");
    eps.resize(episodes_);
    rewrite_episode_file(eps);
    for (auto& ep : eps) buffer_.add(std::move(ep));
  }

 private:
  void open_episode_sink(bool truncate) {
    namespace fs = std::filesystem;
    fs::create_directories(cfg_.out_dir);
    episode_sink_ = std::make_unique<std::ofstream>(
        episodes_path(), truncate ? (std::ios::binary | std::ios::trunc)
                                  : (std::ios::binary | std::ios::app));
  }

  void rewrite_episode_file(const std::vector<Episode>& eps) {
    std::ofstream out(episodes_path(), std::ios::binary | std::ios::trunc);
    for (const auto& ep : eps) replay_io::append(out, ep);
  }

  // Drops log lines recorded after the given step so a resumed run rebuilds
  // an identical file.
  void truncate_log_after(long step) {
    std::ifstream in(log_path());
    if (!in) return;
    std::vector<std::string> keep;
    std::string line;
    while (std::getline(in, line)) {
      auto pos = line.find("\"step\":");
      if (pos == std::string::npos) continue;
      long s = std::stol(line.substr(pos + 7));
      if (s <= step) keep.push_back(line);
    }
    in.close();
    std::ofstream out(log_path(), std::ios::trunc);
    for (const auto& l : keep) out << l << "\n";
  }

  void write_log_line(std::ofstream& log, const char* phase, double episode_return,
                      const IterationDiag* diag) {
    log << "{\"step\":" << env_steps_ << ",\"episode\":" << episodes_ << ",\"phase\":\"" << phase
        << "\",\"return\":" << format_double(episode_return);
    if (diag) {
      log << ",\"wm_loss\":" << format_double(diag->wm.total)
          << ",\"wm_recon\":" << format_double(diag->wm.recon)
          << ",\"wm_kl\":" << format_double(diag->wm.kl)
          << ",\"ctx_loss\":" << format_double(diag->ctx_loss)
          << ",\"actor_loss\":" << format_double(diag->behavior.actor_loss)
          << ",\"critic_loss\":" << format_double(diag->behavior.critic_loss);
    }
    log << "}\n";
    log.flush();
  }

  void maybe_checkpoint(std::ofstream& log) {
    if (cfg_.checkpoint_every <= 0) return;
    if (env_steps_ / cfg_.checkpoint_every > last_checkpoint_block_) {
      last_checkpoint_block_ = env_steps_ / cfg_.checkpoint_every;
      double ev = eval_snapshot();
      log << "{\"step\":" << env_steps_ << ",\"episode\":" << episodes_
          << ",\"phase\":\"eval\",\"eval_return\":" << format_double(ev) << "}\n";
      log.flush();
      save_checkpoint(cfg_.out_dir + "/step_" + std::to_string(env_steps_) + ".ckpt");
    }
  }

  // Algorithm-faithful inner unroll producing the posterior sample z_t for
  // the cross-modal loss: zero-initialized h, every recurrent input detached
  // (values only), padded sub-windows for the per-step embeddings.
  Vec posterior_unroll(const Episode& ep, int start, int K) {
    EvalEngine e(&rng_);
    const bool deep = variant_deep(cfg_.variant);
    const bool shallow = variant_shallow(cfg_.variant);
    auto h = agent_.wm.initial_h(e, 1);
    auto z = agent_.wm.initial_z(e, 1);
    for (int tau = 0; tau <= K; ++tau) {
      Mat obs_hist = ep.obs.middleCols(start, tau + 1);
      Mat act_hist = tau > 0 ? Mat(ep.act.middleCols(start, tau)) : Mat(agent_.act_dim, 0);
      ++encoder_evals_;
      auto ctx = agent_.encoder->encode(e, pad_window(obs_hist, act_hist, K));
      Vec o, a_prev;
      double r, cont;
      step_record(ep, start + tau, &o, &a_prev, &r, &cont);
      h = agent_.wm.sequence_step(e, h, z, e.constant(Mat(a_prev)),
                                  deep ? std::optional<EvalEngine::V>(ctx) : std::nullopt);
      auto post = agent_.wm.posterior(e, h, e.constant(Mat(o)),
                                      shallow ? std::optional<EvalEngine::V>(ctx) : std::nullopt);
      z = agent_.wm.sample_z(e, post, rng_);
    }
    return e.value(z).col(0);
  }

  Agent agent_;
  TrainConfig cfg_;
  Rng rng_;
  ReplayBuffer buffer_;
  std::vector<Context> train_contexts_;
  std::unique_ptr<std::ofstream> episode_sink_;
  long env_steps_ = 0;
  long episodes_ = 0;
  long last_checkpoint_block_ = 0;
  std::uint64_t encoder_evals_ = 0;
};

}  // namespace dali
