#pragma once

#include "dali/common.hpp"

#include <functional>
#include <utility>
#include <vector>

namespace dali {

// Forward kernels shared by the taped and untaped execution paths so both
// produce bit-identical values.
namespace fwd {

inline Mat sigmoid(const Mat& x) {
  return x.unaryExpr([](double v) { return 1.0 / (1.0 + std::exp(-v)); });
}

inline Mat softplus(const Mat& x) {
  return x.unaryExpr(
      [](double v) { return std::max(v, 0.0) + std::log1p(std::exp(-std::abs(v))); });
}

inline Mat softmax_blocks(const Mat& x, int block) {
  Mat y(x.rows(), x.cols());
  for (int c = 0; c < x.cols(); ++c) {
    for (int b0 = 0; b0 < x.rows(); b0 += block) {
      auto seg = x.col(c).segment(b0, block);
      double m = seg.maxCoeff();
      Eigen::VectorXd e = (seg.array() - m).exp();
      y.col(c).segment(b0, block) = e / e.sum();
    }
  }
  return y;
}

inline Mat log_softmax_blocks(const Mat& x, int block) {
  Mat y(x.rows(), x.cols());
  for (int c = 0; c < x.cols(); ++c) {
    for (int b0 = 0; b0 < x.rows(); b0 += block) {
      auto seg = x.col(c).segment(b0, block);
      double m = seg.maxCoeff();
      double lse = m + std::log((seg.array() - m).exp().sum());
      y.col(c).segment(b0, block) = seg.array() - lse;
    }
  }
  return y;
}

inline Mat block_colsum(const Mat& x, int block) {
  const int nb = static_cast<int>(x.rows()) / block;
  Mat y(nb, x.cols());
  for (int c = 0; c < x.cols(); ++c)
    for (int b = 0; b < nb; ++b) y(b, c) = x.col(c).segment(b * block, block).sum();
  return y;
}

// Returns y; fills xhat and inv_std for reuse by the backward pass.
inline Mat layer_norm_cols(const Mat& v, const Mat& gain, const Mat& bias, double eps,
                           Mat* xhat_out, Vec* inv_std_out) {
  const int m = static_cast<int>(v.rows());
  Mat xhat(v.rows(), v.cols());
  Vec inv_std(v.cols());
  for (int c = 0; c < v.cols(); ++c) {
    double mu = v.col(c).mean();
    double var = (v.col(c).array() - mu).square().sum() / m;
    double is = 1.0 / std::sqrt(var + eps);
    inv_std(c) = is;
    xhat.col(c) = (v.col(c).array() - mu) * is;
  }
  Mat y = (xhat.array().colwise() * gain.col(0).array()).colwise() + bias.col(0).array();
  if (xhat_out) *xhat_out = std::move(xhat);
  if (inv_std_out) *inv_std_out = std::move(inv_std);
  return y;
}

}  // namespace fwd

// Reverse-mode tape over Eigen matrices. Values are dense double matrices;
// batches live in columns. A Var is an index into the tape that created it.
// Parents always precede children, so backward() is a reverse sweep over the
// node list.
class Tape;

struct Var {
  Tape* tape = nullptr;
  int idx = -1;
  bool valid() const { return tape != nullptr && idx >= 0; }
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Mat value) {
    nodes_.push_back(Node{std::move(value), {}, nullptr});
    return Var{this, static_cast<int>(nodes_.size()) - 1};
  }

  const Mat& value(Var v) const { return nodes_[v.idx].value; }

  // Zero if the node was never reached by backward().
  Mat grad(Var v) const {
    const Node& n = nodes_[v.idx];
    if (n.grad.size() == 0) return Mat::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  void backward(Var loss) {
    Node& ln = nodes_[loss.idx];
    if (ln.value.size() != 1)
      throw std::invalid_argument("Tape::backward: loss must be a 1x1 scalar");
    ln.grad = Mat::Ones(1, 1);
    for (int i = loss.idx; i >= 0; --i) {
      Node& n = nodes_[i];
      if (n.grad.size() == 0 || !n.backward) continue;
      n.backward(*this, n.grad);
    }
  }

  std::size_t size() const { return nodes_.size(); }

  // ---- primitive ops ----

  Var add(Var a, Var b) {
    check_same_shape(a, b, "add");
    Var out = leaf(value(a) + value(b));
    set_backward(out, [ai = a.idx, bi = b.idx](Tape& t, const Mat& g) {
      t.accum(ai, g);
      t.accum(bi, g);
    });
    return out;
  }

  Var sub(Var a, Var b) {
    check_same_shape(a, b, "sub");
    Var out = leaf(value(a) - value(b));
    set_backward(out, [ai = a.idx, bi = b.idx](Tape& t, const Mat& g) {
      t.accum(ai, g);
      t.accum(bi, -g);
    });
    return out;
  }

  Var mul(Var a, Var b) {  // elementwise
    check_same_shape(a, b, "mul");
    Var out = leaf(value(a).cwiseProduct(value(b)));
    set_backward(out, [ai = a.idx, bi = b.idx](Tape& t, const Mat& g) {
      t.accum(ai, g.cwiseProduct(t.nodes_[bi].value));
      t.accum(bi, g.cwiseProduct(t.nodes_[ai].value));
    });
    return out;
  }

  Var scale(Var a, double s) {
    Var out = leaf(value(a) * s);
    set_backward(out, [ai = a.idx, s](Tape& t, const Mat& g) { t.accum(ai, g * s); });
    return out;
  }

  Var add_scalar(Var a, double s) {
    Var out = leaf(value(a).array() + s);
    set_backward(out, [ai = a.idx](Tape& t, const Mat& g) { t.accum(ai, g); });
    return out;
  }

  Var matmul(Var a, Var b) {
    if (value(a).cols() != value(b).rows())
      throw std::invalid_argument("matmul: inner dimensions differ");
    Var out = leaf(value(a) * value(b));
    set_backward(out, [ai = a.idx, bi = b.idx](Tape& t, const Mat& g) {
      t.accum(ai, g * t.nodes_[bi].value.transpose());
      t.accum(bi, t.nodes_[ai].value.transpose() * g);
    });
    return out;
  }

  Var transpose(Var a) {
    Var out = leaf(value(a).transpose());
    set_backward(out, [ai = a.idx](Tape& t, const Mat& g) { t.accum(ai, g.transpose()); });
    return out;
  }

  // a (m x n) + b (m x 1) broadcast across columns.
  Var colwise_add(Var a, Var b) {
    if (value(b).cols() != 1 || value(b).rows() != value(a).rows())
      throw std::invalid_argument("colwise_add: bias must be (rows x 1)");
    Var out = leaf(value(a).colwise() + value(b).col(0));
    set_backward(out, [ai = a.idx, bi = b.idx](Tape& t, const Mat& g) {
      t.accum(ai, g);
      t.accum(bi, g.rowwise().sum());
    });
    return out;
  }

  Var sigmoid(Var a) {
    Var out = leaf(fwd::sigmoid(value(a)));
    set_backward(out, [ai = a.idx, oi = out.idx](Tape& t, const Mat& g) {
      const Mat& y = t.nodes_[oi].value;
      t.accum(ai, g.cwiseProduct(y.cwiseProduct(Mat::Ones(y.rows(), y.cols()) - y)));
    });
    return out;
  }

  Var tanh_(Var a) {
    Mat y = value(a).array().tanh();
    Var out = leaf(y);
    set_backward(out, [ai = a.idx, oi = out.idx](Tape& t, const Mat& g) {
      const Mat& y = t.nodes_[oi].value;
      t.accum(ai, g.cwiseProduct((1.0 - y.array().square()).matrix()));
    });
    return out;
  }

  Var silu(Var a) {
    const Mat& x = value(a);
    Mat s = fwd::sigmoid(x);
    Var out = leaf(x.cwiseProduct(s));
    set_backward(out, [ai = a.idx, s](Tape& t, const Mat& g) {
      const Mat& x = t.nodes_[ai].value;
      // d/dx x*s(x) = s + x*s*(1-s)
      Mat d = s.array() + x.array() * s.array() * (1.0 - s.array());
      t.accum(ai, g.cwiseProduct(d));
    });
    return out;
  }

  Var exp_(Var a) {
    Mat y = value(a).array().exp();
    Var out = leaf(y);
    set_backward(out, [ai = a.idx, oi = out.idx](Tape& t, const Mat& g) {
      t.accum(ai, g.cwiseProduct(t.nodes_[oi].value));
    });
    return out;
  }

  Var log_(Var a) {
    Var out = leaf(value(a).array().log());
    set_backward(out, [ai = a.idx](Tape& t, const Mat& g) {
      t.accum(ai, g.cwiseQuotient(t.nodes_[ai].value));
    });
    return out;
  }

  Var square(Var a) {
    Var out = leaf(value(a).array().square());
    set_backward(out, [ai = a.idx](Tape& t, const Mat& g) {
      t.accum(ai, 2.0 * g.cwiseProduct(t.nodes_[ai].value));
    });
    return out;
  }

  // Numerically stable log(1 + exp(x)).
  Var softplus(Var a) {
    Var out = leaf(fwd::softplus(value(a)));
    set_backward(out, [ai = a.idx](Tape& t, const Mat& g) {
      t.accum(ai, g.cwiseProduct(fwd::sigmoid(t.nodes_[ai].value)));
    });
    return out;
  }

  Var sum(Var a) {
    Var out = leaf(Mat::Constant(1, 1, value(a).sum()));
    set_backward(out, [ai = a.idx](Tape& t, const Mat& g) {
      const Mat& v = t.nodes_[ai].value;
      t.accum(ai, Mat::Constant(v.rows(), v.cols(), g(0, 0)));
    });
    return out;
  }

  Var mean_all(Var a) { return scale(sum(a), 1.0 / static_cast<double>(value(a).size())); }

  Var slice_rows(Var a, int r0, int nrows) {
    if (r0 < 0 || r0 + nrows > value(a).rows())
      throw std::invalid_argument("slice_rows: out of range");
    Var out = leaf(value(a).middleRows(r0, nrows));
    set_backward(out, [ai = a.idx, r0, nrows](Tape& t, const Mat& g) {
      const Mat& v = t.nodes_[ai].value;
      Mat full = Mat::Zero(v.rows(), v.cols());
      full.middleRows(r0, nrows) = g;
      t.accum(ai, full);
    });
    return out;
  }

  Var concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: empty");
    int rows = 0;
    const int cols = static_cast<int>(value(parts[0]).cols());
    for (const Var& p : parts) {
      if (value(p).cols() != cols) throw std::invalid_argument("concat_rows: column mismatch");
      rows += static_cast<int>(value(p).rows());
    }
    Mat v(rows, cols);
    int r = 0;
    std::vector<int> idxs;
    std::vector<int> sizes;
    for (const Var& p : parts) {
      const int nr = static_cast<int>(value(p).rows());
      v.middleRows(r, nr) = value(p);
      idxs.push_back(p.idx);
      sizes.push_back(nr);
      r += nr;
    }
    Var out = leaf(std::move(v));
    set_backward(out, [idxs, sizes](Tape& t, const Mat& g) {
      int r = 0;
      for (std::size_t k = 0; k < idxs.size(); ++k) {
        t.accum(idxs[k], g.middleRows(r, sizes[k]));
        r += sizes[k];
      }
    });
    return out;
  }

  Var slice_cols(Var a, int c0, int ncols) {
    if (c0 < 0 || c0 + ncols > value(a).cols())
      throw std::invalid_argument("slice_cols: out of range");
    Var out = leaf(value(a).middleCols(c0, ncols));
    set_backward(out, [ai = a.idx, c0, ncols](Tape& t, const Mat& g) {
      const Mat& v = t.nodes_[ai].value;
      Mat full = Mat::Zero(v.rows(), v.cols());
      full.middleCols(c0, ncols) = g;
      t.accum(ai, full);
    });
    return out;
  }

  Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: empty");
    int cols = 0;
    const int rows = static_cast<int>(value(parts[0]).rows());
    for (const Var& p : parts) {
      if (value(p).rows() != rows) throw std::invalid_argument("concat_cols: row mismatch");
      cols += static_cast<int>(value(p).cols());
    }
    Mat v(rows, cols);
    int c = 0;
    std::vector<int> idxs;
    std::vector<int> sizes;
    for (const Var& p : parts) {
      const int nc = static_cast<int>(value(p).cols());
      v.middleCols(c, nc) = value(p);
      idxs.push_back(p.idx);
      sizes.push_back(nc);
      c += nc;
    }
    Var out = leaf(std::move(v));
    set_backward(out, [idxs, sizes](Tape& t, const Mat& g) {
      int c = 0;
      for (std::size_t k = 0; k < idxs.size(); ++k) {
        t.accum(idxs[k], g.middleCols(c, sizes[k]));
        c += sizes[k];
      }
    });
    return out;
  }

  // Softmax over each column.
  Var softmax_cols(Var a) { return softmax_blocks(a, static_cast<int>(value(a).rows())); }

  // Softmax within each contiguous block of `block` rows, per column.
  Var softmax_blocks(Var a, int block) {
    check_block(value(a), block, "softmax_blocks");
    Var out = leaf(fwd::softmax_blocks(value(a), block));
    set_backward(out, [ai = a.idx, oi = out.idx, block](Tape& t, const Mat& g) {
      const Mat& y = t.nodes_[oi].value;
      Mat gx(y.rows(), y.cols());
      for (int c = 0; c < y.cols(); ++c) {
        for (int b0 = 0; b0 < y.rows(); b0 += block) {
          auto ys = y.col(c).segment(b0, block);
          auto gs = g.col(c).segment(b0, block);
          double dot = ys.dot(gs);
          gx.col(c).segment(b0, block) = ys.cwiseProduct((gs.array() - dot).matrix());
        }
      }
      t.accum(ai, gx);
    });
    return out;
  }

  Var log_softmax_blocks(Var a, int block) {
    check_block(value(a), block, "log_softmax_blocks");
    Var out = leaf(fwd::log_softmax_blocks(value(a), block));
    set_backward(out, [ai = a.idx, oi = out.idx, block](Tape& t, const Mat& g) {
      const Mat& ly = t.nodes_[oi].value;
      Mat gx(ly.rows(), ly.cols());
      for (int c = 0; c < ly.cols(); ++c) {
        for (int b0 = 0; b0 < ly.rows(); b0 += block) {
          auto ls = ly.col(c).segment(b0, block);
          auto gs = g.col(c).segment(b0, block);
          double gsum = gs.sum();
          gx.col(c).segment(b0, block) = gs - gsum * ls.array().exp().matrix();
        }
      }
      t.accum(ai, gx);
    });
    return out;
  }

  // Sum within each block of rows, per column: (m x n) -> (m/block x n).
  Var block_colsum(Var a, int block) {
    check_block(value(a), block, "block_colsum");
    Var out = leaf(fwd::block_colsum(value(a), block));
    set_backward(out, [ai = a.idx, block](Tape& t, const Mat& g) {
      const Mat& v = t.nodes_[ai].value;
      Mat gx(v.rows(), v.cols());
      for (int c = 0; c < g.cols(); ++c)
        for (int b = 0; b < g.rows(); ++b)
          gx.col(c).segment(b * block, block).setConstant(g(b, c));
      t.accum(ai, gx);
    });
    return out;
  }

  // Elementwise max(x, floor) against a constant; gradient is gated to the
  // entries above the floor.
  Var cmax(Var a, double floor) {
    Mat y = value(a).cwiseMax(floor);
    Var out = leaf(y);
    set_backward(out, [ai = a.idx, floor](Tape& t, const Mat& g) {
      const Mat& x = t.nodes_[ai].value;
      Mat mask = (x.array() > floor).cast<double>();
      t.accum(ai, g.cwiseProduct(mask));
    });
    return out;
  }

  Var detach(Var a) { return leaf(value(a)); }

  // Value is exactly `hard`; gradient passes through to `soft` unchanged.
  Var straight_through(Var soft, Mat hard) {
    if (hard.rows() != value(soft).rows() || hard.cols() != value(soft).cols())
      throw std::invalid_argument("straight_through: shape mismatch");
    Var out = leaf(std::move(hard));
    set_backward(out, [si = soft.idx](Tape& t, const Mat& g) { t.accum(si, g); });
    return out;
  }

  // Per-column layer normalization with learned gain/bias ((rows x 1) each).
  Var layer_norm_cols(Var x, Var gain, Var bias, double eps = 1e-5) {
    Mat xhat;
    Vec inv_std;
    Var out = leaf(fwd::layer_norm_cols(value(x), value(gain), value(bias), eps, &xhat, &inv_std));
    set_backward(out, [xi = x.idx, gi = gain.idx, bi = bias.idx, xhat,
                       inv_std](Tape& t, const Mat& g) {
      const Mat& gain = t.nodes_[gi].value;
      Mat gxhat = g.array().colwise() * gain.col(0).array();
      Mat gx(xhat.rows(), xhat.cols());
      for (int c = 0; c < xhat.cols(); ++c) {
        double mean_g = gxhat.col(c).mean();
        double mean_gx = gxhat.col(c).cwiseProduct(xhat.col(c)).mean();
        gx.col(c) =
            inv_std(c) * (gxhat.col(c).array() - mean_g - xhat.col(c).array() * mean_gx);
      }
      t.accum(xi, gx);
      t.accum(gi, g.cwiseProduct(xhat).rowwise().sum());
      t.accum(bi, g.rowwise().sum());
    });
    return out;
  }

 private:
  struct Node {
    Mat value;
    Mat grad;
    std::function<void(Tape&, const Mat&)> backward;
  };

  void set_backward(Var v, std::function<void(Tape&, const Mat&)> fn) {
    nodes_[v.idx].backward = std::move(fn);
  }

  void accum(int idx, const Mat& g) {
    Node& n = nodes_[idx];
    if (n.grad.size() == 0)
      n.grad = g;
    else
      n.grad += g;
  }

  void check_same_shape(Var a, Var b, const char* op) const {
    if (value(a).rows() != value(b).rows() || value(a).cols() != value(b).cols())
      throw std::invalid_argument(std::string(op) + ": shape mismatch");
  }

  static void check_block(const Mat& x, int block, const char* op) {
    if (block <= 0 || x.rows() % block != 0)
      throw std::invalid_argument(std::string(op) + ": rows not divisible by block");
  }

  std::vector<Node> nodes_;
};

}  // namespace dali
