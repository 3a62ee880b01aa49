#pragma once

#include "dali/autodiff.hpp"

#include <map>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

namespace dali {

struct Parameter {
  std::string name;
  Mat value;
  Mat grad;  // same shape as value, accumulated between zero_grad() calls

  // Adam state, owned here so checkpoints can capture it.
  Mat adam_m;
  Mat adam_v;

  void zero_grad() { grad.setZero(); }
};

// Owns parameters with stable addresses; creation order is the canonical
// order for hashing and serialization.
class ParamRegistry {
 public:
  Parameter& create(const std::string& name, int rows, int cols, Mat init) {
    if (by_name_.count(name)) throw std::invalid_argument("duplicate parameter: " + name);
    auto p = std::make_unique<Parameter>();
    p->name = name;
    p->value = std::move(init);
    if (p->value.rows() != rows || p->value.cols() != cols)
      throw std::invalid_argument("init shape mismatch for " + name);
    p->grad = Mat::Zero(rows, cols);
    p->adam_m = Mat::Zero(rows, cols);
    p->adam_v = Mat::Zero(rows, cols);
    Parameter* raw = p.get();
    params_.push_back(std::move(p));
    by_name_[name] = raw;
    return *raw;
  }

  Parameter& xavier(const std::string& name, int rows, int cols, Rng& rng) {
    double stddev = std::sqrt(2.0 / (rows + cols));
    return create(name, rows, cols, rng.normal_matrix(rows, cols, stddev));
  }

  Parameter& zeros(const std::string& name, int rows, int cols) {
    return create(name, rows, cols, Mat::Zero(rows, cols));
  }

  Parameter& ones(const std::string& name, int rows, int cols) {
    return create(name, rows, cols, Mat::Ones(rows, cols));
  }

  Parameter& get(const std::string& name) {
    auto it = by_name_.find(name);
    if (it == by_name_.end()) throw std::out_of_range("no parameter named " + name);
    return *it->second;
  }

  bool contains(const std::string& name) const { return by_name_.count(name) != 0; }

  std::vector<Parameter*> all() {
    std::vector<Parameter*> out;
    out.reserve(params_.size());
    for (auto& p : params_) out.push_back(p.get());
    return out;
  }

  std::size_t size() const { return params_.size(); }

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
  std::map<std::string, Parameter*> by_name_;
};

inline std::size_t param_count(const std::vector<Parameter*>& ps) {
  std::size_t n = 0;
  for (const Parameter* p : ps) n += static_cast<std::size_t>(p->value.size());
  return n;
}

inline std::uint64_t hash_params(const std::vector<Parameter*>& ps) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const Parameter* p : ps) {
    h = fnv1a(p->name.data(), p->name.size(), h);
    h = hash_matrix(p->value, h);
  }
  return h;
}

// ---------------------------------------------------------------------------
// Execution engines. Model forward code is written once, templated on an
// engine: TapeEngine records a graph for backprop, EvalEngine just computes.
// ---------------------------------------------------------------------------

class TapeEngine {
 public:
  using V = Var;
  static constexpr bool tracks_gradients = true;

  explicit TapeEngine(Tape& tape, Rng* rng = nullptr) : tape_(tape), rng_(rng) {}

  V param(Parameter& p) {
    auto it = cache_.find(&p);
    if (it != cache_.end()) return it->second;
    V v = tape_.leaf(p.value);
    cache_.emplace(&p, v);
    return v;
  }

  // Adds tape gradients of every touched parameter into Parameter::grad.
  void accumulate_param_grads() {
    for (auto& [p, v] : cache_) p->grad += tape_.grad(v);
  }

  V constant(Mat m) { return tape_.leaf(std::move(m)); }
  const Mat& value(V v) const { return tape_.value(v); }

  V add(V a, V b) { return tape_.add(a, b); }
  V sub(V a, V b) { return tape_.sub(a, b); }
  V mul(V a, V b) { return tape_.mul(a, b); }
  V scale(V a, double s) { return tape_.scale(a, s); }
  V add_scalar(V a, double s) { return tape_.add_scalar(a, s); }
  V matmul(V a, V b) { return tape_.matmul(a, b); }
  V transpose(V a) { return tape_.transpose(a); }
  V colwise_add(V a, V b) { return tape_.colwise_add(a, b); }
  V sigmoid(V a) { return tape_.sigmoid(a); }
  V tanh_(V a) { return tape_.tanh_(a); }
  V silu(V a) { return tape_.silu(a); }
  V exp_(V a) { return tape_.exp_(a); }
  V log_(V a) { return tape_.log_(a); }
  V square(V a) { return tape_.square(a); }
  V softplus(V a) { return tape_.softplus(a); }
  V sum(V a) { return tape_.sum(a); }
  V mean_all(V a) { return tape_.mean_all(a); }
  V slice_rows(V a, int r0, int n) { return tape_.slice_rows(a, r0, n); }
  V concat_rows(const std::vector<V>& parts) { return tape_.concat_rows(parts); }
  V slice_cols(V a, int c0, int n) { return tape_.slice_cols(a, c0, n); }
  V concat_cols(const std::vector<V>& parts) { return tape_.concat_cols(parts); }
  V softmax_cols(V a) { return tape_.softmax_cols(a); }
  V softmax_blocks(V a, int block) { return tape_.softmax_blocks(a, block); }
  V log_softmax_blocks(V a, int block) { return tape_.log_softmax_blocks(a, block); }
  V block_colsum(V a, int block) { return tape_.block_colsum(a, block); }
  V cmax(V a, double floor) { return tape_.cmax(a, floor); }
  V detach(V a) { return tape_.detach(a); }
  V straight_through(V soft, Mat hard) { return tape_.straight_through(soft, std::move(hard)); }
  V layer_norm(V x, V gain, V bias) { return tape_.layer_norm_cols(x, gain, bias); }

  Rng& rng() {
    if (!rng_) throw std::logic_error("TapeEngine: no rng attached");
    return *rng_;
  }

  Tape& tape() { return tape_; }

 private:
  Tape& tape_;
  Rng* rng_;
  std::unordered_map<Parameter*, V> cache_;
};

class EvalEngine {
 public:
  using V = std::shared_ptr<const Mat>;
  static constexpr bool tracks_gradients = false;

  explicit EvalEngine(Rng* rng = nullptr) : rng_(rng) {}

  V param(Parameter& p) { return V(&p.value, [](const Mat*) {}); }
  V constant(Mat m) { return std::make_shared<Mat>(std::move(m)); }
  const Mat& value(V v) const { return *v; }

  V add(V a, V b) { return constant(*a + *b); }
  V sub(V a, V b) { return constant(*a - *b); }
  V mul(V a, V b) { return constant(a->cwiseProduct(*b)); }
  V scale(V a, double s) { return constant(*a * s); }
  V add_scalar(V a, double s) { return constant((a->array() + s).matrix()); }
  V matmul(V a, V b) { return constant(*a * *b); }
  V transpose(V a) { return constant(a->transpose()); }
  V colwise_add(V a, V b) { return constant(a->colwise() + b->col(0)); }
  V sigmoid(V a) { return constant(fwd::sigmoid(*a)); }
  V tanh_(V a) { return constant(a->array().tanh().matrix()); }
  V silu(V a) { return constant(a->cwiseProduct(fwd::sigmoid(*a))); }
  V exp_(V a) { return constant(a->array().exp().matrix()); }
  V log_(V a) { return constant(a->array().log().matrix()); }
  V square(V a) { return constant(a->array().square().matrix()); }
  V softplus(V a) { return constant(fwd::softplus(*a)); }
  V sum(V a) { return constant(Mat::Constant(1, 1, a->sum())); }
  V mean_all(V a) { return constant(Mat::Constant(1, 1, a->mean())); }
  V slice_rows(V a, int r0, int n) { return constant(a->middleRows(r0, n)); }
  V concat_rows(const std::vector<V>& parts) {
    int rows = 0;
    for (const V& p : parts) rows += static_cast<int>(p->rows());
    Mat v(rows, parts[0]->cols());
    int r = 0;
    for (const V& p : parts) {
      v.middleRows(r, static_cast<int>(p->rows())) = *p;
      r += static_cast<int>(p->rows());
    }
    return constant(std::move(v));
  }
  V slice_cols(V a, int c0, int n) { return constant(a->middleCols(c0, n)); }
  V concat_cols(const std::vector<V>& parts) {
    int cols = 0;
    for (const V& p : parts) cols += static_cast<int>(p->cols());
    Mat v(parts[0]->rows(), cols);
    int c = 0;
    for (const V& p : parts) {
      v.middleCols(c, static_cast<int>(p->cols())) = *p;
      c += static_cast<int>(p->cols());
    }
    return constant(std::move(v));
  }
  V softmax_cols(V a) { return constant(fwd::softmax_blocks(*a, static_cast<int>(a->rows()))); }
  V softmax_blocks(V a, int block) { return constant(fwd::softmax_blocks(*a, block)); }
  V log_softmax_blocks(V a, int block) { return constant(fwd::log_softmax_blocks(*a, block)); }
  V block_colsum(V a, int block) { return constant(fwd::block_colsum(*a, block)); }
  V cmax(V a, double floor) { return constant(a->cwiseMax(floor)); }
  V detach(V a) { return a; }
  V straight_through(V /*soft*/, Mat hard) { return constant(std::move(hard)); }
  V layer_norm(V x, V gain, V bias) {
    return constant(fwd::layer_norm_cols(*x, *gain, *bias, 1e-5, nullptr, nullptr));
  }

  Rng& rng() {
    if (!rng_) throw std::logic_error("EvalEngine: no rng attached");
    return *rng_;
  }

 private:
  Rng* rng_;
};

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

struct Linear {
  Parameter* W = nullptr;
  Parameter* b = nullptr;

  static Linear make(ParamRegistry& reg, const std::string& name, int in, int out, Rng& rng) {
    Linear l;
    l.W = &reg.xavier(name + ".W", out, in, rng);
    l.b = &reg.zeros(name + ".b", out, 1);
    return l;
  }

  int in_dim() const { return static_cast<int>(W->value.cols()); }
  int out_dim() const { return static_cast<int>(W->value.rows()); }

  template <class E>
  typename E::V operator()(E& e, typename E::V x) const {
    return e.colwise_add(e.matmul(e.param(*W), x), e.param(*b));
  }
};

struct LayerNorm {
  Parameter* gain = nullptr;
  Parameter* bias = nullptr;

  static LayerNorm make(ParamRegistry& reg, const std::string& name, int dim) {
    LayerNorm ln;
    ln.gain = &reg.ones(name + ".gain", dim, 1);
    ln.bias = &reg.zeros(name + ".bias", dim, 1);
    return ln;
  }

  template <class E>
  typename E::V operator()(E& e, typename E::V x) const {
    return e.layer_norm(x, e.param(*gain), e.param(*bias));
  }
};

// MLP with SiLU hidden activations; the output layer is linear.
struct Mlp {
  std::vector<Linear> layers;

  static Mlp make(ParamRegistry& reg, const std::string& name, int in,
                  const std::vector<int>& hidden, int out, Rng& rng) {
    Mlp m;
    int d = in;
    for (std::size_t i = 0; i < hidden.size(); ++i) {
      m.layers.push_back(Linear::make(reg, name + ".l" + std::to_string(i), d, hidden[i], rng));
      d = hidden[i];
    }
    m.layers.push_back(Linear::make(reg, name + ".out", d, out, rng));
    return m;
  }

  template <class E>
  typename E::V operator()(E& e, typename E::V x) const {
    typename E::V h = x;
    for (std::size_t i = 0; i + 1 < layers.size(); ++i) h = e.silu(layers[i](e, h));
    return layers.back()(e, h);
  }
};

// Standard GRU cell. Gate layout in the stacked (3H x *) matrices: reset,
// update, candidate.
struct GruCell {
  Linear wx;        // input projection (3H x in), carries the bias
  Parameter* uh = nullptr;  // hidden projection (3H x H), no bias
  int hidden = 0;

  static GruCell make(ParamRegistry& reg, const std::string& name, int in, int hidden, Rng& rng) {
    GruCell c;
    c.wx = Linear::make(reg, name + ".wx", in, 3 * hidden, rng);
    c.uh = &reg.xavier(name + ".uh", 3 * hidden, hidden, rng);
    c.hidden = hidden;
    return c;
  }

  template <class E>
  typename E::V step(E& e, typename E::V x, typename E::V h) const {
    const int H = hidden;
    auto px = wx(e, x);
    auto ph = e.matmul(e.param(*uh), h);
    auto r = e.sigmoid(e.add(e.slice_rows(px, 0, H), e.slice_rows(ph, 0, H)));
    auto u = e.sigmoid(e.add(e.slice_rows(px, H, H), e.slice_rows(ph, H, H)));
    auto n = e.tanh_(e.add(e.slice_rows(px, 2 * H, H), e.mul(r, e.slice_rows(ph, 2 * H, H))));
    auto one_minus_u = e.add_scalar(e.scale(u, -1.0), 1.0);
    return e.add(e.mul(u, h), e.mul(one_minus_u, n));
  }
};

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

class Adam {
 public:
  Adam(std::vector<Parameter*> params, double lr, double clip_norm = 100.0,
       double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : params_(std::move(params)),
        lr_(lr),
        clip_norm_(clip_norm),
        beta1_(beta1),
        beta2_(beta2),
        eps_(eps) {}

  void zero_grad() {
    for (Parameter* p : params_) p->zero_grad();
  }

  // Applies one update from the accumulated gradients. Gradients are clipped
  // to a global norm across the whole group before the moment update.
  void step() {
    ++t_;
    double sq = 0.0;
    for (Parameter* p : params_) sq += p->grad.squaredNorm();
    double gnorm = std::sqrt(sq);
    double scale = (clip_norm_ > 0 && gnorm > clip_norm_) ? clip_norm_ / gnorm : 1.0;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (Parameter* p : params_) {
      Mat g = p->grad * scale;
      p->adam_m = beta1_ * p->adam_m + (1.0 - beta1_) * g;
      p->adam_v = beta2_ * p->adam_v + (1.0 - beta2_) * g.cwiseProduct(g);
      Mat mhat = p->adam_m / bc1;
      Mat vhat = p->adam_v / bc2;
      p->value -= lr_ * mhat.cwiseQuotient((vhat.cwiseSqrt().array() + eps_).matrix());
    }
  }

  const std::vector<Parameter*>& params() const { return params_; }
  long step_count() const { return t_; }
  void set_step_count(long t) { t_ = t; }

 private:
  std::vector<Parameter*> params_;
  double lr_;
  double clip_norm_;
  double beta1_;
  double beta2_;
  double eps_;
  long t_ = 0;
};

}  // namespace dali
