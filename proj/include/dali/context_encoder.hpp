#pragma once

#include "dali/nn.hpp"

#include <string>
#include <vector>

namespace dali {

// A K+1-observation / K-action slice of history feeding the context encoder.
// Prefix entries that predate the episode are exactly zero.
struct TrajectoryWindow {
  Mat observations;  // d_o x (K+1), time-ordered, newest last
  Mat actions;       // d_a x K
  int valid = 0;     // number of real observations (<= K+1)

  int window_k() const { return static_cast<int>(actions.cols()); }
};

// obs_history: d_o x t (o_1..o_t), act_history: d_a x (t-1). If t <= K the
// window is prefix zero-padded; otherwise it is the most recent K+1 / K
// entries.
inline TrajectoryWindow pad_window(const Mat& obs_history, const Mat& act_history, int K) {
  const int t = static_cast<int>(obs_history.cols());
  if (t < 1) throw std::invalid_argument("pad_window: empty observation history");
  if (act_history.cols() != t - 1)
    throw std::invalid_argument("pad_window: need exactly t-1 actions");
  if (K < 1) throw std::invalid_argument("pad_window: K must be >= 1");
  TrajectoryWindow w;
  w.observations = Mat::Zero(obs_history.rows(), K + 1);
  w.actions = Mat::Zero(act_history.rows(), K);
  const int no = std::min(t, K + 1);
  w.observations.rightCols(no) = obs_history.rightCols(no);
  const int na = std::min(static_cast<int>(act_history.cols()), K);
  if (na > 0) w.actions.rightCols(na) = act_history.rightCols(na);
  w.valid = no;
  return w;
}

enum class Pooling { last, mean };

struct ContextEncoderConfig {
  int obs_dim = 0;
  int act_dim = 0;
  int width = 256;       // dense / attention / MLP width
  int fwd_hidden = 128;  // forward-model hidden units
  int ctx_dim = 8;
  int z_dim = 32;        // posterior stochastic state, for the cross-modal maps
  bool positional_encoding = true;
  Pooling pooling = Pooling::last;
};

// Sinusoidal positions, one column per timestep.
inline Mat sinusoidal_positions(int width, int n) {
  Mat pe(width, n);
  for (int pos = 0; pos < n; ++pos) {
    for (int i = 0; i < width; ++i) {
      const double freq = std::exp(-std::log(10000.0) * (2.0 * (i / 2)) / width);
      const double x = pos * freq;
      pe(i, pos) = (i % 2 == 0) ? std::sin(x) : std::cos(x);
    }
  }
  return pe;
}

// Self-supervised context encoder: a dense projection, one pre-norm
// single-head self-attention block with skip, a two-layer MLP block with
// residual, pooled and projected to an 8-dimensional context embedding.
// Also owns the one-step forward model and the cross-modal maps.
struct ContextEncoder {
  ContextEncoderConfig cfg;

  Linear input_dense;
  LayerNorm ln1, ln2;
  Linear q, k, v, attn_out;
  Linear mlp1, mlp2;
  Linear out;
  Mlp forward_model;   // (o, a, ctx) -> o_next
  Parameter* w_z = nullptr;    // z_dim x ctx_dim
  Parameter* w_ctx = nullptr;  // ctx_dim x z_dim

  static ContextEncoder make(ParamRegistry& reg, const std::string& prefix,
                             const ContextEncoderConfig& cfg, Rng& rng) {
    ContextEncoder enc;
    enc.cfg = cfg;
    const int in = cfg.obs_dim + cfg.act_dim;
    const int w = cfg.width;
    enc.input_dense = Linear::make(reg, prefix + ".in", in, w, rng);
    enc.ln1 = LayerNorm::make(reg, prefix + ".ln1", w);
    enc.ln2 = LayerNorm::make(reg, prefix + ".ln2", w);
    enc.q = Linear::make(reg, prefix + ".q", w, w, rng);
    enc.k = Linear::make(reg, prefix + ".k", w, w, rng);
    enc.v = Linear::make(reg, prefix + ".v", w, w, rng);
    enc.attn_out = Linear::make(reg, prefix + ".attn_out", w, w, rng);
    enc.mlp1 = Linear::make(reg, prefix + ".mlp1", w, w, rng);
    enc.mlp2 = Linear::make(reg, prefix + ".mlp2", w, w, rng);
    enc.out = Linear::make(reg, prefix + ".out", w, cfg.ctx_dim, rng);
    enc.forward_model = Mlp::make(reg, prefix + ".fwd", cfg.obs_dim + cfg.act_dim + cfg.ctx_dim,
                                  {cfg.fwd_hidden, cfg.fwd_hidden}, cfg.obs_dim, rng);
    enc.w_z = &reg.xavier(prefix + ".w_z", cfg.z_dim, cfg.ctx_dim, rng);
    enc.w_ctx = &reg.xavier(prefix + ".w_ctx", cfg.ctx_dim, cfg.z_dim, rng);
    return enc;
  }

  // All parameters updated by the context phase (encoder + forward model +
  // cross-modal maps).
  std::vector<Parameter*> parameters() const {
    std::vector<Parameter*> ps = {input_dense.W, input_dense.b, ln1.gain, ln1.bias,
                                  ln2.gain,      ln2.bias,      q.W,      q.b,
                                  k.W,           k.b,           v.W,      v.b,
                                  attn_out.W,    attn_out.b,    mlp1.W,   mlp1.b,
                                  mlp2.W,        mlp2.b,        out.W,    out.b};
    for (const Linear& l : forward_model.layers) {
      ps.push_back(l.W);
      ps.push_back(l.b);
    }
    ps.push_back(w_z);
    ps.push_back(w_ctx);
    return ps;
  }

  void check_window(const TrajectoryWindow& w) const {
    if (w.observations.rows() != cfg.obs_dim || w.actions.rows() != cfg.act_dim)
      throw std::invalid_argument("encode: window feature dimensions mismatch");
    if (w.observations.cols() != w.actions.cols() + 1)
      throw std::invalid_argument("encode: need K+1 observations and K actions");
    if (!w.observations.allFinite() || !w.actions.allFinite())
      throw std::invalid_argument("encode: non-finite window input");
  }

  // Window -> context embedding (ctx_dim x 1). Attention runs unmasked over
  // the full window; rows are per-timestep (o, a) pairs with a zero action in
  // the final position.
  template <class E>
  typename E::V encode(E& e, const TrajectoryWindow& w) const {
    check_window(w);
    const int n = static_cast<int>(w.observations.cols());
    Mat rows(cfg.obs_dim + cfg.act_dim, n);
    rows.topRows(cfg.obs_dim) = w.observations;
    rows.bottomRows(cfg.act_dim).setZero();
    rows.block(cfg.obs_dim, 0, cfg.act_dim, n - 1) = w.actions;

    auto x = input_dense(e, e.constant(std::move(rows)));
    if (cfg.positional_encoding) x = e.add(x, e.constant(sinusoidal_positions(cfg.width, n)));
    auto x1 = ln1(e, x);
    auto qs = q(e, x1);
    auto ks = k(e, x1);
    auto vs = v(e, x1);
    // attention weights: column per query position, softmax over keys
    auto scores = e.scale(e.matmul(e.transpose(ks), qs), 1.0 / std::sqrt(double(cfg.width)));
    auto attn = attn_out(e, e.matmul(vs, e.softmax_cols(scores)));
    auto x2 = e.add(attn, x);  // skip from the dense layer's output
    auto x3 = ln2(e, x2);
    auto m = e.silu(mlp2(e, e.silu(mlp1(e, x3))));
    auto x4 = e.add(m, x3);

    typename E::V pooled;
    if (cfg.pooling == Pooling::last) {
      pooled = e.slice_cols(x4, n - 1, 1);
    } else {
      pooled = e.scale(e.matmul(x4, e.constant(Mat::Ones(n, 1))), 1.0 / n);
    }
    return out(e, pooled);
  }

  // Batched wrapper: one embedding column per window.
  template <class E>
  typename E::V encode_batch(E& e, const std::vector<TrajectoryWindow>& ws) const {
    if (ws.empty()) throw std::invalid_argument("encode_batch: empty batch");
    std::vector<typename E::V> cols;
    cols.reserve(ws.size());
    for (const auto& w : ws) cols.push_back(encode(e, w));
    return ws.size() == 1 ? cols[0] : e.concat_cols(cols);
  }

  // One-step forward model prediction from (o_t, a_t, ctx).
  template <class E>
  typename E::V predict_next_obs(E& e, typename E::V o, typename E::V a,
                                 typename E::V ctx) const {
    if (e.value(o).rows() != cfg.obs_dim || e.value(a).rows() != cfg.act_dim ||
        e.value(ctx).rows() != cfg.ctx_dim)
      throw std::invalid_argument("predict_next_obs: shape mismatch");
    return forward_model(e, e.concat_rows({o, a, ctx}));
  }
};

// Mini-batch for the context losses. z_post (if present) is the posterior
// sample aligned with each window's final step; it is always treated as a
// constant.
struct ContextBatch {
  std::vector<TrajectoryWindow> windows;
  Mat o_t;     // d_o x B
  Mat a_t;     // d_a x B
  Mat o_next;  // d_o x B
  Mat z_post;  // z_dim x B or empty
};

// Mean over the batch of squared next-observation error.
template <class E>
typename E::V loss_fd(E& e, const ContextEncoder& enc, const ContextBatch& batch) {
  const int B = static_cast<int>(batch.windows.size());
  if (B == 0) throw std::invalid_argument("loss_fd: empty batch");
  if (batch.o_t.cols() != B || batch.a_t.cols() != B || batch.o_next.cols() != B)
    throw std::invalid_argument("loss_fd: batch size mismatch");
  auto ctx = enc.encode_batch(e, batch.windows);
  auto pred = enc.predict_next_obs(e, e.constant(batch.o_t), e.constant(batch.a_t), ctx);
  auto err = e.sub(e.constant(batch.o_next), pred);
  return e.scale(e.sum(e.square(err)), 1.0 / B);
}

// Bidirectional linear alignment between the context embedding and the
// posterior sample. z is a constant: gradients reach the encoder and the two
// maps only.
template <class E>
typename E::V loss_cross(E& e, const ContextEncoder& enc, typename E::V ctx, const Mat& z_post) {
  if (z_post.rows() != enc.cfg.z_dim) throw std::invalid_argument("loss_cross: z dimension");
  if (z_post.cols() != e.value(ctx).cols()) throw std::invalid_argument("loss_cross: batch size");
  const int B = static_cast<int>(z_post.cols());
  auto z = e.constant(z_post);
  auto z_hat = e.matmul(e.param(*enc.w_z), ctx);
  auto ctx_hat = e.matmul(e.param(*enc.w_ctx), z);
  auto l = e.add(e.sum(e.square(e.sub(z, z_hat))), e.sum(e.square(e.sub(ctx, ctx_hat))));
  return e.scale(l, 1.0 / B);
}

// L_total = L_FD + lambda_cross * L_cross with lambda_cross in {0, 1}. With
// lambda_cross == 0 this IS the forward-dynamics loss node (bit-exact).
template <class E>
typename E::V loss_total(E& e, const ContextEncoder& enc, const ContextBatch& batch,
                         double lambda_cross) {
  if (lambda_cross != 0.0 && lambda_cross != 1.0)
    throw std::invalid_argument("loss_total: lambda_cross must be 0 or 1");
  if (lambda_cross == 0.0) return loss_fd(e, enc, batch);
  if (batch.z_post.size() == 0)
    throw std::invalid_argument("loss_total: cross term requires z_post");
  auto ctx = enc.encode_batch(e, batch.windows);
  auto pred = enc.predict_next_obs(e, e.constant(batch.o_t), e.constant(batch.a_t), ctx);
  auto fd = e.scale(e.sum(e.square(e.sub(e.constant(batch.o_next), pred))),
                    1.0 / static_cast<double>(batch.windows.size()));
  return e.add(fd, loss_cross(e, enc, ctx, batch.z_post));
}

}  // namespace dali
