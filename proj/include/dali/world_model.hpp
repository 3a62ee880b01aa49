#pragma once

#include "dali/nn.hpp"

#include <optional>
#include <string>
#include <vector>

namespace dali {

// Conditioning variants. dali_* infer context with the encoder; crssm_* are
// ground-truth-context baselines; dreamer_dr is context-unaware domain
// randomization.
enum class Variant { dreamer_dr, dali_s, dali_d, crssm_s, crssm_d };

inline Variant variant_from_string(const std::string& s) {
  if (s == "dreamer_dr") return Variant::dreamer_dr;
  if (s == "dali_s") return Variant::dali_s;
  if (s == "dali_d") return Variant::dali_d;
  if (s == "crssm_s") return Variant::crssm_s;
  if (s == "crssm_d") return Variant::crssm_d;
  throw std::invalid_argument("unknown variant: " + s);
}

inline const char* to_string(Variant v) {
  switch (v) {
    case Variant::dreamer_dr: return "dreamer_dr";
    case Variant::dali_s: return "dali_s";
    case Variant::dali_d: return "dali_d";
    case Variant::crssm_s: return "crssm_s";
    case Variant::crssm_d: return "crssm_d";
  }
  return "?";
}

inline bool variant_uses_encoder(Variant v) {
  return v == Variant::dali_s || v == Variant::dali_d;
}
inline bool variant_uses_true_context(Variant v) {
  return v == Variant::crssm_s || v == Variant::crssm_d;
}
// Deep integration: context enters the sequence model, heads, actor, critic.
inline bool variant_deep(Variant v) { return v == Variant::dali_d || v == Variant::crssm_d; }
// Shallow integration: context enters the posterior encoder only.
inline bool variant_shallow(Variant v) { return v == Variant::dali_s || v == Variant::crssm_s; }

struct WorldModelConfig {
  int obs_dim = 0;
  int act_dim = 0;
  int d_h = 128;     // deterministic recurrent state size
  int hidden = 128;  // MLP hidden width for posterior/prior/heads
  int z_blocks = 4;
  int z_classes = 8;
  int ctx_dim = 0;  // 0 for dreamer_dr; 8 for dali_*; context dim for crssm_*
  bool learned_h0 = false;
  double free_bits = 1.0;   // nats per categorical block
  double kl_balance = 0.8;  // weight on the dynamics-side KL

  int z_dim() const { return z_blocks * z_classes; }
  int feat_dim() const { return d_h + z_dim(); }
};

template <class V>
struct CategoricalDist {
  V logits;  // z_dim x B
  V probs;   // block-softmaxed
};

// How stochastic states are realized. `sample` draws straight-through
// one-hots (training); `mode` takes the argmax (greedy evaluation); `soft`
// uses the probabilities themselves, which keeps the whole loss exactly
// differentiable for finite-difference checks.
enum class ZMode { sample, mode, soft };

template <class V>
struct HeadOutputs {
  V obs_mean;    // d_o x B
  V reward;      // 1 x B (Gaussian mean, unit variance)
  V cont_logit;  // 1 x B (Bernoulli logit)
};

// Recurrent state-space model with variant-dependent context wiring, enforced
// at every call site: the prior never sees context in any variant.
struct WorldModel {
  Variant variant = Variant::dreamer_dr;
  WorldModelConfig cfg;

  GruCell gru;
  Mlp posterior_net;
  Mlp prior_net;
  Mlp decoder;
  Mlp reward_head;
  Mlp continue_head;
  Parameter* h0 = nullptr;

  static WorldModel make(ParamRegistry& reg, const std::string& prefix, Variant variant,
                         const WorldModelConfig& cfg, Rng& rng) {
    if ((variant == Variant::dreamer_dr) != (cfg.ctx_dim == 0))
      throw std::invalid_argument("ctx_dim must be 0 exactly for dreamer_dr");
    WorldModel wm;
    wm.variant = variant;
    wm.cfg = cfg;
    const int zd = cfg.z_dim();
    const int deep_ctx = variant_deep(variant) ? cfg.ctx_dim : 0;
    const int shallow_ctx = variant_shallow(variant) ? cfg.ctx_dim : 0;
    wm.gru = GruCell::make(reg, prefix + ".gru", zd + cfg.act_dim + deep_ctx, cfg.d_h, rng);
    wm.posterior_net = Mlp::make(reg, prefix + ".post", cfg.d_h + cfg.obs_dim + shallow_ctx,
                                 {cfg.hidden}, zd, rng);
    wm.prior_net = Mlp::make(reg, prefix + ".prior", cfg.d_h, {cfg.hidden}, zd, rng);
    wm.decoder =
        Mlp::make(reg, prefix + ".dec", cfg.feat_dim() + deep_ctx, {cfg.hidden}, cfg.obs_dim, rng);
    wm.reward_head =
        Mlp::make(reg, prefix + ".rew", cfg.feat_dim() + deep_ctx, {cfg.hidden}, 1, rng);
    wm.continue_head =
        Mlp::make(reg, prefix + ".cont", cfg.feat_dim() + deep_ctx, {cfg.hidden}, 1, rng);
    if (cfg.learned_h0) wm.h0 = &reg.zeros(prefix + ".h0", cfg.d_h, 1);
    return wm;
  }

  std::vector<Parameter*> parameters() const {
    std::vector<Parameter*> ps;
    auto push_mlp = [&](const Mlp& m) {
      for (const Linear& l : m.layers) {
        ps.push_back(l.W);
        ps.push_back(l.b);
      }
    };
    ps.push_back(gru.wx.W);
    ps.push_back(gru.wx.b);
    ps.push_back(gru.uh);
    push_mlp(posterior_net);
    push_mlp(prior_net);
    push_mlp(decoder);
    push_mlp(reward_head);
    push_mlp(continue_head);
    if (h0) ps.push_back(h0);
    return ps;
  }

  // Input fan-in per component; lets tests assert the conditioning table.
  std::vector<std::pair<std::string, int>> fan_in_report() const {
    return {{"sequence", gru.wx.in_dim()},
            {"posterior", posterior_net.layers.front().in_dim()},
            {"prior", prior_net.layers.front().in_dim()},
            {"decoder", decoder.layers.front().in_dim()},
            {"reward", reward_head.layers.front().in_dim()},
            {"continue", continue_head.layers.front().in_dim()}};
  }

  template <class E>
  typename E::V initial_h(E& e, int batch) const {
    if (h0) return e.matmul(e.param(*h0), e.constant(Mat::Ones(1, batch)));
    return e.constant(Mat::Zero(cfg.d_h, batch));
  }

  template <class E>
  typename E::V initial_z(E& e, int batch) const {
    return e.constant(Mat::Zero(cfg.z_dim(), batch));
  }

  // h_t = f(h_{t-1}, z_{t-1}, a_{t-1}[, ctx_t]); ctx is mandatory for deep
  // variants and rejected everywhere else.
  template <class E>
  typename E::V sequence_step(E& e, typename E::V h_prev, typename E::V z_prev,
                              typename E::V a_prev,
                              std::optional<typename E::V> ctx = std::nullopt) const {
    if (variant_deep(variant) != ctx.has_value())
      throw std::invalid_argument(std::string("sequence_step: context ") +
                                  (ctx ? "supplied to a non-deep variant"
                                       : "missing for a deep variant"));
    std::vector<typename E::V> parts = {z_prev, a_prev};
    if (ctx) parts.push_back(*ctx);
    return gru.step(e, e.concat_rows(parts), h_prev);
  }

  // z_t ~ q(z | h_t, o_t[, ctx_t]); ctx is mandatory for shallow variants and
  // rejected everywhere else.
  template <class E>
  CategoricalDist<typename E::V> posterior(E& e, typename E::V h, typename E::V o,
                                           std::optional<typename E::V> ctx = std::nullopt) const {
    if (variant_shallow(variant) != ctx.has_value())
      throw std::invalid_argument(std::string("posterior: context ") +
                                  (ctx ? "supplied to a non-shallow variant"
                                       : "missing for a shallow variant"));
    std::vector<typename E::V> parts = {h, o};
    if (ctx) parts.push_back(*ctx);
    auto logits = posterior_net(e, e.concat_rows(parts));
    return {logits, e.softmax_blocks(logits, cfg.z_classes)};
  }

  // ẑ_t ~ p(ẑ | h_t); never conditioned on context in any variant.
  template <class E>
  CategoricalDist<typename E::V> prior(E& e, typename E::V h) const {
    auto logits = prior_net(e, h);
    return {logits, e.softmax_blocks(logits, cfg.z_classes)};
  }

  // Decoder, reward and continue heads on (h, z[, ctx]).
  template <class E>
  HeadOutputs<typename E::V> heads(E& e, typename E::V h, typename E::V z,
                                   std::optional<typename E::V> ctx = std::nullopt) const {
    if (variant_deep(variant) != ctx.has_value())
      throw std::invalid_argument(std::string("heads: context ") +
                                  (ctx ? "supplied to a non-deep variant"
                                       : "missing for a deep variant"));
    std::vector<typename E::V> parts = {h, z};
    if (ctx) parts.push_back(*ctx);
    auto feat = e.concat_rows(parts);
    return {decoder(e, feat), reward_head(e, feat), continue_head(e, feat)};
  }

  // Straight-through one-hot sample per categorical block. The returned value
  // is exactly one-hot; gradients flow to the probabilities.
  template <class E>
  typename E::V sample_z(E& e, const CategoricalDist<typename E::V>& dist, Rng& rng) const {
    const Mat& p = e.value(dist.probs);
    Mat hard = Mat::Zero(p.rows(), p.cols());
    for (int c = 0; c < p.cols(); ++c) {
      for (int b = 0; b < cfg.z_blocks; ++b) {
        const int base = b * cfg.z_classes;
        double u = rng.uniform();
        double acc = 0.0;
        int pick = cfg.z_classes - 1;
        for (int k = 0; k < cfg.z_classes; ++k) {
          acc += p(base + k, c);
          if (u < acc) {
            pick = k;
            break;
          }
        }
        hard(base + pick, c) = 1.0;
      }
    }
    return e.straight_through(dist.probs, std::move(hard));
  }

  template <class E>
  typename E::V realize_z(E& e, const CategoricalDist<typename E::V>& dist, ZMode zmode,
                          Rng& rng) const {
    switch (zmode) {
      case ZMode::sample: return sample_z(e, dist, rng);
      case ZMode::mode: return mode_z(e, dist);
      case ZMode::soft: return dist.probs;
    }
    throw std::logic_error("realize_z: bad mode");
  }

  // Mode (argmax) z, straight-through as well.
  template <class E>
  typename E::V mode_z(E& e, const CategoricalDist<typename E::V>& dist) const {
    const Mat& p = e.value(dist.probs);
    Mat hard = Mat::Zero(p.rows(), p.cols());
    for (int c = 0; c < p.cols(); ++c) {
      for (int b = 0; b < cfg.z_blocks; ++b) {
        const int base = b * cfg.z_classes;
        int pick = 0;
        p.col(c).segment(base, cfg.z_classes).maxCoeff(&pick);
        hard(base + pick, c) = 1.0;
      }
    }
    return e.straight_through(dist.probs, std::move(hard));
  }

  // KL(q || p) per block, per batch column: (z_blocks x B).
  template <class E>
  typename E::V kl_blocks(E& e, typename E::V logits_q, typename E::V logits_p) const {
    auto pq = e.softmax_blocks(logits_q, cfg.z_classes);
    auto diff = e.sub(e.log_softmax_blocks(logits_q, cfg.z_classes),
                      e.log_softmax_blocks(logits_p, cfg.z_classes));
    return e.block_colsum(e.mul(pq, diff), cfg.z_classes);
  }
};

// Per-block categorical entropy of probabilities (plain values).
inline Mat entropy_blocks(const Mat& probs, int classes) {
  const int nb = static_cast<int>(probs.rows()) / classes;
  Mat h = Mat::Zero(nb, probs.cols());
  for (int c = 0; c < probs.cols(); ++c)
    for (int b = 0; b < nb; ++b)
      for (int k = 0; k < classes; ++k) {
        double p = probs(b * classes + k, c);
        if (p > 0) h(b, c) -= p * std::log(p);
      }
  return h;
}

// One training batch of sequences, time-major: element t holds the step-t
// slice across the batch. act_prev[t] is the action that led into o_t (zero
// at an episode start); cont[t] is 0 where o_t is terminal. ctx, when
// present, is the per-step conditioning input (already detached).
struct SequenceBatch {
  std::vector<Mat> obs;
  std::vector<Mat> act_prev;
  std::vector<Mat> reward;
  std::vector<Mat> cont;
  std::vector<Mat> ctx;

  int length() const { return static_cast<int>(obs.size()); }
  int batch() const { return obs.empty() ? 0 : static_cast<int>(obs[0].cols()); }
};

struct WorldModelLossDiag {
  double total = 0.0;
  double recon = 0.0;
  double reward = 0.0;
  double cont = 0.0;
  double kl = 0.0;
};

// ELBO-style loss: Gaussian NLL for observations and reward (unit variance,
// constants dropped), Bernoulli NLL for continue, balanced block KL with a
// free-bits floor. Mean over batch and time.
template <class E>
typename E::V world_model_loss(E& e, const WorldModel& wm, const SequenceBatch& batch, Rng& rng,
                               WorldModelLossDiag* diag = nullptr, ZMode zmode = ZMode::sample) {
  const int L = batch.length();
  const int B = batch.batch();
  if (L == 0 || B == 0) throw std::invalid_argument("world_model_loss: empty batch");
  const bool needs_ctx = variant_deep(wm.variant) || variant_shallow(wm.variant);
  if (needs_ctx && batch.ctx.size() != static_cast<std::size_t>(L))
    throw std::invalid_argument("world_model_loss: variant requires per-step ctx");

  auto h = wm.initial_h(e, B);
  auto z = wm.initial_z(e, B);
  typename E::V recon, rew, cont, kl;
  bool first = true;
  for (int t = 0; t < L; ++t) {
    std::optional<typename E::V> ctx_t;
    if (needs_ctx) ctx_t = e.constant(batch.ctx[t]);
    h = wm.sequence_step(e, h, z, e.constant(batch.act_prev[t]),
                         variant_deep(wm.variant) ? ctx_t : std::nullopt);
    auto post = wm.posterior(e, h, e.constant(batch.obs[t]),
                             variant_shallow(wm.variant) ? ctx_t : std::nullopt);
    auto pri = wm.prior(e, h);
    z = wm.realize_z(e, post, zmode, rng);
    auto out = wm.heads(e, h, z, variant_deep(wm.variant) ? ctx_t : std::nullopt);

    auto recon_t = e.scale(e.sum(e.square(e.sub(out.obs_mean, e.constant(batch.obs[t])))), 0.5);
    auto rew_t = e.scale(e.sum(e.square(e.sub(out.reward, e.constant(batch.reward[t])))), 0.5);
    // BCE from logits: softplus(x) - n*x
    auto cont_t = e.sum(e.sub(e.softplus(out.cont_logit),
                              e.mul(e.constant(batch.cont[t]), out.cont_logit)));
    auto kl_dyn = e.cmax(wm.kl_blocks(e, e.detach(post.logits), pri.logits), wm.cfg.free_bits);
    auto kl_rep = e.cmax(wm.kl_blocks(e, post.logits, e.detach(pri.logits)), wm.cfg.free_bits);
    auto kl_t = e.sum(e.add(e.scale(kl_dyn, wm.cfg.kl_balance),
                            e.scale(kl_rep, 1.0 - wm.cfg.kl_balance)));
    if (first) {
      recon = recon_t;
      rew = rew_t;
      cont = cont_t;
      kl = kl_t;
      first = false;
    } else {
      recon = e.add(recon, recon_t);
      rew = e.add(rew, rew_t);
      cont = e.add(cont, cont_t);
      kl = e.add(kl, kl_t);
    }
  }
  const double denom = 1.0 / (static_cast<double>(L) * B);
  auto total = e.scale(e.add(e.add(recon, rew), e.add(cont, kl)), denom);
  const double tv = e.value(total)(0, 0);
  if (!std::isfinite(tv)) throw std::runtime_error("world_model_loss: non-finite loss");
  if (diag) {
    diag->total = tv;
    diag->recon = e.value(recon)(0, 0) * denom;
    diag->reward = e.value(rew)(0, 0) * denom;
    diag->cont = e.value(cont)(0, 0) * denom;
    diag->kl = e.value(kl)(0, 0) * denom;
  }
  return total;
}

}  // namespace dali
