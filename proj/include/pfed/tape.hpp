#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <vector>

#include "pfed/tensor.hpp"

namespace pfed {

// Handle into a GradTape. Invalid handles (id < 0) mark absent optional inputs.
struct Var {
  std::int32_t id = -1;
  bool valid() const { return id >= 0; }
};

namespace detail {

// C(m x n) += A(m x k) * B(k x n)
inline void mm_acc_nn(const Tensor& a, const Tensor& b, Tensor& c) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c.row(i);
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a(i, p);
      const double* brow = b.row(p);
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C(m x n) += A(m x k) * B(n x k)^T
inline void mm_acc_nt(const Tensor& a, const Tensor& b, Tensor& c) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a.row(i);
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = b.row(j);
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      c(i, j) += acc;
    }
  }
}

// C(k x n) += A(m x k)^T * B(m x n)
inline void mm_acc_tn(const Tensor& a, const Tensor& b, Tensor& c) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a.row(i);
    const double* brow = b.row(i);
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      double* crow = c.row(p);
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

constexpr double kGeluKappa = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluCubic = 0.044715;

inline double gelu_scalar(double x) {
  return 0.5 * x * (1.0 + std::tanh(kGeluKappa * (x + kGeluCubic * x * x * x)));
}

inline double gelu_grad_scalar(double x) {
  const double u = kGeluKappa * (x + kGeluCubic * x * x * x);
  const double t = std::tanh(u);
  const double du = kGeluKappa * (1.0 + 3.0 * kGeluCubic * x * x);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

}  // namespace detail

// Record of primitive operations sufficient to replay a reverse pass.
// Single-owner: a tape must not be shared across concurrent tasks; independent
// tapes may run concurrently. The reverse pass visits operations in strict
// reverse order of recording and accumulates gradients additively.
class GradTape {
 public:
  // Tracked input; gradients are produced for it by backward().
  Var leaf(Tensor value) { return push(std::move(value), /*tracked=*/true); }

  // Untracked value; requesting its gradient is an error.
  Var constant(Tensor value) { return push(std::move(value), /*tracked=*/false); }

  const Tensor& value(Var v) const { return node(v).value; }

  bool tracked(Var v) const { return node(v).tracked; }

  // Reverse pass from a traced scalar. May be called again after extending
  // the tape; gradients are recomputed from scratch (deterministic).
  void backward(Var loss) {
    Node& ln = node(loss);
    if (ln.value.numel() != 1) throw std::invalid_argument("backward: loss must be scalar, got " + shape_str(ln.value.shape()));
    if (!ln.tracked) throw std::invalid_argument("backward: loss does not depend on any traced leaf");
    for (Node& n : nodes_)
      if (n.tracked) n.grad = Tensor(n.value.shape());
    ln.grad[0] = 1.0;
    for (auto it = recs_.rbegin(); it != recs_.rend(); ++it) (*it)(*this);
    has_grads_ = true;
  }

  const Tensor& grad(Var v) const {
    const Node& n = node(v);
    if (!n.tracked) throw std::invalid_argument("grad: value is not traced (constant or frozen)");
    if (!has_grads_) throw std::logic_error("grad: backward() has not run");
    return n.grad;
  }

  std::size_t size() const { return nodes_.size(); }

  // ---- primitive operations ----

  Var matmul(Var a, Var b) {
    const Tensor& av = value(a);
    const Tensor& bv = value(b);
    if (av.ndim() != 2 || bv.ndim() != 2 || av.cols() != bv.rows())
      throw std::invalid_argument("matmul: dimension mismatch " + shape_str(av.shape()) + " * " + shape_str(bv.shape()));
    Tensor out({av.rows(), bv.cols()});
    detail::mm_acc_nn(av, bv, out);
    Var o = push(std::move(out), tracked(a) || tracked(b));
    if (node(o).tracked) {
      record([ai = a.id, bi = b.id, oi = o.id](GradTape& t) {
        const Tensor& g = t.nodes_[oi].grad;
        if (t.nodes_[ai].tracked) detail::mm_acc_nt(g, t.nodes_[bi].value, t.nodes_[ai].grad);
        if (t.nodes_[bi].tracked) detail::mm_acc_tn(t.nodes_[ai].value, g, t.nodes_[bi].grad);
      });
    }
    return o;
  }

  Var add(Var a, Var b) {
    const Tensor& av = value(a);
    const Tensor& bv = value(b);
    if (!av.same_shape(bv))
      throw std::invalid_argument("add: shape mismatch " + shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
    Tensor out = av;
    axpy(1.0, bv, out);
    Var o = push(std::move(out), tracked(a) || tracked(b));
    if (node(o).tracked) {
      record([ai = a.id, bi = b.id, oi = o.id](GradTape& t) {
        const Tensor& g = t.nodes_[oi].grad;
        if (t.nodes_[ai].tracked) axpy(1.0, g, t.nodes_[ai].grad);
        if (t.nodes_[bi].tracked) axpy(1.0, g, t.nodes_[bi].grad);
      });
    }
    return o;
  }

  Var mul(Var a, Var b) {
    const Tensor& av = value(a);
    const Tensor& bv = value(b);
    if (!av.same_shape(bv))
      throw std::invalid_argument("mul: shape mismatch " + shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
    Tensor out = av;
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= bv[i];
    Var o = push(std::move(out), tracked(a) || tracked(b));
    if (node(o).tracked) {
      record([ai = a.id, bi = b.id, oi = o.id](GradTape& t) {
        const Tensor& g = t.nodes_[oi].grad;
        const Tensor& av2 = t.nodes_[ai].value;
        const Tensor& bv2 = t.nodes_[bi].value;
        if (t.nodes_[ai].tracked)
          for (std::size_t i = 0; i < g.numel(); ++i) t.nodes_[ai].grad[i] += g[i] * bv2[i];
        if (t.nodes_[bi].tracked)
          for (std::size_t i = 0; i < g.numel(); ++i) t.nodes_[bi].grad[i] += g[i] * av2[i];
      });
    }
    return o;
  }

  Var scale(Var a, double c) {
    Tensor out = value(a);
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= c;
    Var o = push(std::move(out), tracked(a));
    if (node(o).tracked) {
      record([ai = a.id, oi = o.id, c](GradTape& t) { axpy(c, t.nodes_[oi].grad, t.nodes_[ai].grad); });
    }
    return o;
  }

  // x (m x n) + row vector (numel n), broadcast over rows
  Var add_rowvec(Var x, Var r) {
    const Tensor& xv = value(x);
    const Tensor& rv = value(r);
    if (xv.ndim() != 2 || rv.numel() != xv.cols())
      throw std::invalid_argument("add_rowvec: shape mismatch " + shape_str(xv.shape()) + " + " + shape_str(rv.shape()));
    Tensor out = xv;
    for (std::size_t i = 0; i < out.rows(); ++i)
      for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) += rv[j];
    Var o = push(std::move(out), tracked(x) || tracked(r));
    if (node(o).tracked) {
      record([xi = x.id, ri = r.id, oi = o.id](GradTape& t) {
        const Tensor& g = t.nodes_[oi].grad;
        if (t.nodes_[xi].tracked) axpy(1.0, g, t.nodes_[xi].grad);
        if (t.nodes_[ri].tracked) {
          Tensor& rg = t.nodes_[ri].grad;
          for (std::size_t i = 0; i < g.rows(); ++i)
            for (std::size_t j = 0; j < g.cols(); ++j) rg[j] += g(i, j);
        }
      });
    }
    return o;
  }

  Var transpose(Var a) {
    const Tensor& av = value(a);
    if (av.ndim() != 2) throw std::invalid_argument("transpose: expected 2-d tensor, got " + shape_str(av.shape()));
    Tensor out({av.cols(), av.rows()});
    for (std::size_t i = 0; i < av.rows(); ++i)
      for (std::size_t j = 0; j < av.cols(); ++j) out(j, i) = av(i, j);
    Var o = push(std::move(out), tracked(a));
    if (node(o).tracked) {
      record([ai = a.id, oi = o.id](GradTape& t) {
        const Tensor& g = t.nodes_[oi].grad;
        Tensor& ag = t.nodes_[ai].grad;
        for (std::size_t i = 0; i < g.rows(); ++i)
          for (std::size_t j = 0; j < g.cols(); ++j) ag(j, i) += g(i, j);
      });
    }
    return o;
  }

  Var reshape(Var a, Shape shape) {
    const Tensor& av = value(a);
    if (shape_numel(shape) != av.numel())
      throw std::invalid_argument("reshape: cannot view " + shape_str(av.shape()) + " as " + shape_str(shape));
    Tensor out(std::move(shape), av.vec());
    Var o = push(std::move(out), tracked(a));
    if (node(o).tracked) {
      record([ai = a.id, oi = o.id](GradTape& t) {
        const Tensor& g = t.nodes_[oi].grad;
        Tensor& ag = t.nodes_[ai].grad;
        for (std::size_t i = 0; i < g.numel(); ++i) ag[i] += g[i];
      });
    }
    return o;
  }

  // Vertical stack of 2-d blocks with equal column counts. Blocks with zero
  // rows are allowed (degenerate prompt-free sequences).
  Var concat_rows(std::span<const Var> parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
    std::size_t rows = 0, cols = value(parts.front()).cols();
    bool any_tracked = false;
    for (Var p : parts) {
      const Tensor& pv = value(p);
      if (pv.ndim() != 2 || pv.cols() != cols)
        throw std::invalid_argument("concat_rows: column mismatch " + shape_str(pv.shape()));
      rows += pv.rows();
      any_tracked = any_tracked || tracked(p);
    }
    Tensor out({rows, cols});
    std::size_t r = 0;
    for (Var p : parts) {
      const Tensor& pv = value(p);
      for (std::size_t i = 0; i < pv.rows(); ++i, ++r)
        for (std::size_t j = 0; j < cols; ++j) out(r, j) = pv(i, j);
    }
    Var o = push(std::move(out), any_tracked);
    if (node(o).tracked) {
      std::vector<std::int32_t> ids;
      for (Var p : parts) ids.push_back(p.id);
      record([ids, oi = o.id](GradTape& t) {
        const Tensor& g = t.nodes_[oi].grad;
        std::size_t r = 0;
        for (std::int32_t pid : ids) {
          const std::size_t pr = t.nodes_[pid].value.rows();
          if (t.nodes_[pid].tracked) {
            Tensor& pg = t.nodes_[pid].grad;
            for (std::size_t i = 0; i < pr; ++i)
              for (std::size_t j = 0; j < g.cols(); ++j) pg(i, j) += g(r + i, j);
          }
          r += pr;
        }
      });
    }
    return o;
  }

  Var concat_rows(std::initializer_list<Var> parts) { return concat_rows(std::span<const Var>(parts.begin(), parts.size())); }

  Var slice_rows(Var a, std::size_t r0, std::size_t r1) {
    const Tensor& av = value(a);
    if (av.ndim() != 2 || r0 > r1 || r1 > av.rows())
      throw std::invalid_argument("slice_rows: bad range [" + std::to_string(r0) + "," + std::to_string(r1) + ") of " +
                                  shape_str(av.shape()));
    Tensor out({r1 - r0, av.cols()});
    for (std::size_t i = r0; i < r1; ++i)
      for (std::size_t j = 0; j < av.cols(); ++j) out(i - r0, j) = av(i, j);
    Var o = push(std::move(out), tracked(a));
    if (node(o).tracked) {
      record([ai = a.id, oi = o.id, r0](GradTape& t) {
        const Tensor& g = t.nodes_[oi].grad;
        Tensor& ag = t.nodes_[ai].grad;
        for (std::size_t i = 0; i < g.rows(); ++i)
          for (std::size_t j = 0; j < g.cols(); ++j) ag(r0 + i, j) += g(i, j);
      });
    }
    return o;
  }

  Var slice_cols(Var a, std::size_t c0, std::size_t c1) {
    const Tensor& av = value(a);
    if (av.ndim() != 2 || c0 > c1 || c1 > av.cols())
      throw std::invalid_argument("slice_cols: bad range [" + std::to_string(c0) + "," + std::to_string(c1) + ") of " +
                                  shape_str(av.shape()));
    Tensor out({av.rows(), c1 - c0});
    for (std::size_t i = 0; i < av.rows(); ++i)
      for (std::size_t j = c0; j < c1; ++j) out(i, j - c0) = av(i, j);
    Var o = push(std::move(out), tracked(a));
    if (node(o).tracked) {
      record([ai = a.id, oi = o.id, c0](GradTape& t) {
        const Tensor& g = t.nodes_[oi].grad;
        Tensor& ag = t.nodes_[ai].grad;
        for (std::size_t i = 0; i < g.rows(); ++i)
          for (std::size_t j = 0; j < g.cols(); ++j) ag(i, c0 + j) += g(i, j);
      });
    }
    return o;
  }

  Var concat_cols(std::span<const Var> parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
    std::size_t cols = 0, rows = value(parts.front()).rows();
    bool any_tracked = false;
    for (Var p : parts) {
      const Tensor& pv = value(p);
      if (pv.ndim() != 2 || pv.rows() != rows)
        throw std::invalid_argument("concat_cols: row mismatch " + shape_str(pv.shape()));
      cols += pv.cols();
      any_tracked = any_tracked || tracked(p);
    }
    Tensor out({rows, cols});
    std::size_t c = 0;
    for (Var p : parts) {
      const Tensor& pv = value(p);
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < pv.cols(); ++j) out(i, c + j) = pv(i, j);
      c += pv.cols();
    }
    Var o = push(std::move(out), any_tracked);
    if (node(o).tracked) {
      std::vector<std::int32_t> ids;
      for (Var p : parts) ids.push_back(p.id);
      record([ids, oi = o.id](GradTape& t) {
        const Tensor& g = t.nodes_[oi].grad;
        std::size_t c = 0;
        for (std::int32_t pid : ids) {
          const std::size_t pc = t.nodes_[pid].value.cols();
          if (t.nodes_[pid].tracked) {
            Tensor& pg = t.nodes_[pid].grad;
            for (std::size_t i = 0; i < g.rows(); ++i)
              for (std::size_t j = 0; j < pc; ++j) pg(i, j) += g(i, c + j);
          }
          c += pc;
        }
      });
    }
    return o;
  }

  Var concat_cols(std::initializer_list<Var> parts) { return concat_cols(std::span<const Var>(parts.begin(), parts.size())); }

  // Row-wise softmax with per-row max subtraction for stability.
  Var softmax_rows(Var a) {
    const Tensor& av = value(a);
    if (av.ndim() != 2) throw std::invalid_argument("softmax_rows: expected 2-d tensor, got " + shape_str(av.shape()));
    Tensor out = av;
    for (std::size_t i = 0; i < out.rows(); ++i) {
      double mx = out(i, 0);
      for (std::size_t j = 1; j < out.cols(); ++j) mx = std::max(mx, out(i, j));
      double sum = 0.0;
      for (std::size_t j = 0; j < out.cols(); ++j) {
        out(i, j) = std::exp(out(i, j) - mx);
        sum += out(i, j);
      }
      for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) /= sum;
    }
    Var o = push(std::move(out), tracked(a));
    if (node(o).tracked) {
      record([ai = a.id, oi = o.id](GradTape& t) {
        const Tensor& g = t.nodes_[oi].grad;
        const Tensor& y = t.nodes_[oi].value;
        Tensor& ag = t.nodes_[ai].grad;
        for (std::size_t i = 0; i < g.rows(); ++i) {
          double dot = 0.0;
          for (std::size_t j = 0; j < g.cols(); ++j) dot += g(i, j) * y(i, j);
          for (std::size_t j = 0; j < g.cols(); ++j) ag(i, j) += y(i, j) * (g(i, j) - dot);
        }
      });
    }
    return o;
  }

  // Per-row normalization to mean 0 / variance 1 (population), then gain/bias.
  Var layer_norm(Var x, Var gain, Var bias, double eps) {
    const Tensor& xv = value(x);
    const Tensor& gv = value(gain);
    const Tensor& bv = value(bias);
    if (eps <= 0.0) throw std::invalid_argument("layer_norm: eps must be positive");
    if (xv.ndim() != 2 || gv.numel() != xv.cols() || bv.numel() != xv.cols())
      throw std::invalid_argument("layer_norm: shape mismatch x=" + shape_str(xv.shape()) + " gain=" +
                                  shape_str(gv.shape()) + " bias=" + shape_str(bv.shape()));
    const std::size_t m = xv.rows(), n = xv.cols();
    Tensor out({m, n});
    std::vector<double> istd(m);
    Tensor xhat({m, n});
    for (std::size_t i = 0; i < m; ++i) {
      double mu = 0.0;
      for (std::size_t j = 0; j < n; ++j) mu += xv(i, j);
      mu /= static_cast<double>(n);
      double var = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        const double d = xv(i, j) - mu;
        var += d * d;
      }
      var /= static_cast<double>(n);
      istd[i] = 1.0 / std::sqrt(var + eps);
      for (std::size_t j = 0; j < n; ++j) {
        xhat(i, j) = (xv(i, j) - mu) * istd[i];
        out(i, j) = xhat(i, j) * gv[j] + bv[j];
      }
    }
    Var o = push(std::move(out), tracked(x) || tracked(gain) || tracked(bias));
    if (node(o).tracked) {
      record([xi = x.id, gi = gain.id, bi = bias.id, oi = o.id, istd = std::move(istd),
              xhat = std::move(xhat)](GradTape& t) {
        const Tensor& g = t.nodes_[oi].grad;
        const Tensor& gv2 = t.nodes_[gi].value;
        const std::size_t m = g.rows(), n = g.cols();
        if (t.nodes_[gi].tracked) {
          Tensor& gg = t.nodes_[gi].grad;
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) gg[j] += g(i, j) * xhat(i, j);
        }
        if (t.nodes_[bi].tracked) {
          Tensor& bg = t.nodes_[bi].grad;
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) bg[j] += g(i, j);
        }
        if (t.nodes_[xi].tracked) {
          Tensor& xg = t.nodes_[xi].grad;
          for (std::size_t i = 0; i < m; ++i) {
            double mean_dy = 0.0, mean_dyx = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
              const double dy = g(i, j) * gv2[j];
              mean_dy += dy;
              mean_dyx += dy * xhat(i, j);
            }
            mean_dy /= static_cast<double>(n);
            mean_dyx /= static_cast<double>(n);
            for (std::size_t j = 0; j < n; ++j) {
              const double dy = g(i, j) * gv2[j];
              xg(i, j) += istd[i] * (dy - mean_dy - xhat(i, j) * mean_dyx);
            }
          }
        }
      });
    }
    return o;
  }

  // Elementwise GELU, tanh approximation:
  //   0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
  // The derivative follows the same approximated form.
  Var gelu(Var a) {
    const Tensor& av = value(a);
    Tensor out = av;
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = detail::gelu_scalar(out[i]);
    Var o = push(std::move(out), tracked(a));
    if (node(o).tracked) {
      record([ai = a.id, oi = o.id](GradTape& t) {
        const Tensor& g = t.nodes_[oi].grad;
        const Tensor& x = t.nodes_[ai].value;
        Tensor& ag = t.nodes_[ai].grad;
        for (std::size_t i = 0; i < g.numel(); ++i) ag[i] += g[i] * detail::gelu_grad_scalar(x[i]);
      });
    }
    return o;
  }

  // Mean over the batch of -log softmax(logits)[label].
  Var cross_entropy(Var logits, const std::vector<int>& labels) {
    const Tensor& lv = value(logits);
    if (lv.ndim() != 2 || lv.rows() != labels.size())
      throw std::invalid_argument("cross_entropy: logits " + shape_str(lv.shape()) + " vs " +
                                  std::to_string(labels.size()) + " labels");
    const std::size_t b = lv.rows(), y = lv.cols();
    for (std::size_t i = 0; i < b; ++i)
      if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= y)
        throw std::out_of_range("cross_entropy: label " + std::to_string(labels[i]) + " out of range [0," +
                                std::to_string(y) + ") at row " + std::to_string(i));
    Tensor probs({b, y});
    double loss = 0.0;
    for (std::size_t i = 0; i < b; ++i) {
      double mx = lv(i, 0);
      for (std::size_t j = 1; j < y; ++j) mx = std::max(mx, lv(i, j));
      double sum = 0.0;
      for (std::size_t j = 0; j < y; ++j) {
        probs(i, j) = std::exp(lv(i, j) - mx);
        sum += probs(i, j);
      }
      for (std::size_t j = 0; j < y; ++j) probs(i, j) /= sum;
      loss -= lv(i, static_cast<std::size_t>(labels[i])) - mx - std::log(sum);
    }
    loss /= static_cast<double>(b);
    Var o = push(Tensor::scalar(loss), tracked(logits));
    if (node(o).tracked) {
      record([li = logits.id, oi = o.id, labels, probs = std::move(probs)](GradTape& t) {
        const double g = t.nodes_[oi].grad[0];
        Tensor& lg = t.nodes_[li].grad;
        const std::size_t b = lg.rows(), y = lg.cols();
        const double inv_b = 1.0 / static_cast<double>(b);
        for (std::size_t i = 0; i < b; ++i)
          for (std::size_t j = 0; j < y; ++j)
            lg(i, j) += g * inv_b * (probs(i, j) - (static_cast<std::size_t>(labels[i]) == j ? 1.0 : 0.0));
      });
    }
    return o;
  }

  Var sum_all(Var a) {
    const Tensor& av = value(a);
    double s = 0.0;
    for (std::size_t i = 0; i < av.numel(); ++i) s += av[i];
    Var o = push(Tensor::scalar(s), tracked(a));
    if (node(o).tracked) {
      record([ai = a.id, oi = o.id](GradTape& t) {
        const double g = t.nodes_[oi].grad[0];
        Tensor& ag = t.nodes_[ai].grad;
        for (std::size_t i = 0; i < ag.numel(); ++i) ag[i] += g;
      });
    }
    return o;
  }

  Var mean_all(Var a) {
    const Tensor& av = value(a);
    double s = 0.0;
    for (std::size_t i = 0; i < av.numel(); ++i) s += av[i];
    s /= static_cast<double>(av.numel());
    Var o = push(Tensor::scalar(s), tracked(a));
    if (node(o).tracked) {
      record([ai = a.id, oi = o.id](GradTape& t) {
        const double g = t.nodes_[oi].grad[0] / static_cast<double>(t.nodes_[ai].value.numel());
        Tensor& ag = t.nodes_[ai].grad;
        for (std::size_t i = 0; i < ag.numel(); ++i) ag[i] += g;
      });
    }
    return o;
  }

  // Population standard deviation over all entries, floored at `floor`.
  // At or below the floor the value is clamped and the gradient is zero.
  Var std_all(Var a, double floor) {
    const Tensor& av = value(a);
    const std::size_t count = av.numel();
    double mu = 0.0;
    for (std::size_t i = 0; i < count; ++i) mu += av[i];
    mu /= static_cast<double>(count);
    double var = 0.0;
    for (std::size_t i = 0; i < count; ++i) {
      const double d = av[i] - mu;
      var += d * d;
    }
    var /= static_cast<double>(count);
    const double sigma = std::sqrt(var);
    const bool clamped = sigma <= floor || sigma == 0.0;
    Var o = push(Tensor::scalar(clamped ? std::max(sigma, floor) : sigma), tracked(a));
    if (node(o).tracked && !clamped) {
      record([ai = a.id, oi = o.id, mu, sigma](GradTape& t) {
        const double g = t.nodes_[oi].grad[0];
        const Tensor& x = t.nodes_[ai].value;
        Tensor& ag = t.nodes_[ai].grad;
        const double scale = g / (static_cast<double>(x.numel()) * sigma);
        for (std::size_t i = 0; i < x.numel(); ++i) ag[i] += scale * (x[i] - mu);
      });
    }
    return o;
  }

  // sum(x .* w) with constant weights; the vector-Jacobian workhorse.
  Var inner(Var a, Tensor weights) {
    const Tensor& av = value(a);
    if (!av.same_shape(weights))
      throw std::invalid_argument("inner: shape mismatch " + shape_str(av.shape()) + " vs " + shape_str(weights.shape()));
    double s = 0.0;
    for (std::size_t i = 0; i < av.numel(); ++i) s += av[i] * weights[i];
    Var o = push(Tensor::scalar(s), tracked(a));
    if (node(o).tracked) {
      record([ai = a.id, oi = o.id, w = std::move(weights)](GradTape& t) {
        axpy(t.nodes_[oi].grad[0], w, t.nodes_[ai].grad);
      });
    }
    return o;
  }

  // ---- broadcast arithmetic with a traced scalar ----

  Var sadd(Var x, Var s) { return scalar_affine(x, s, +1.0, /*mul=*/false); }
  Var ssub(Var x, Var s) { return scalar_affine(x, s, -1.0, /*mul=*/false); }

  Var smul(Var x, Var s) { return scalar_affine(x, s, +1.0, /*mul=*/true); }

  Var sdiv(Var x, Var s) {
    const Tensor& xv = value(x);
    const double sv = scalar_value(s, "sdiv");
    Tensor out = xv;
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] /= sv;
    Var o = push(std::move(out), tracked(x) || tracked(s));
    if (node(o).tracked) {
      record([xi = x.id, si = s.id, oi = o.id](GradTape& t) {
        const Tensor& g = t.nodes_[oi].grad;
        const Tensor& xv2 = t.nodes_[xi].value;
        const double sv2 = t.nodes_[si].value[0];
        if (t.nodes_[xi].tracked) axpy(1.0 / sv2, g, t.nodes_[xi].grad);
        if (t.nodes_[si].tracked) {
          double acc = 0.0;
          for (std::size_t i = 0; i < g.numel(); ++i) acc += g[i] * xv2[i];
          t.nodes_[si].grad[0] -= acc / (sv2 * sv2);
        }
      });
    }
    return o;
  }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool tracked = false;
  };

  const Node& node(Var v) const {
    if (!v.valid() || static_cast<std::size_t>(v.id) >= nodes_.size())
      throw std::invalid_argument("tape: invalid var handle");
    return nodes_[static_cast<std::size_t>(v.id)];
  }
  Node& node(Var v) { return const_cast<Node&>(static_cast<const GradTape*>(this)->node(v)); }

  Var push(Tensor value, bool tracked) {
    if (!value.all_finite()) throw std::domain_error("tape: non-finite value produced");
    nodes_.push_back(Node{std::move(value), Tensor(), tracked});
    return Var{static_cast<std::int32_t>(nodes_.size() - 1)};
  }

  void record(std::function<void(GradTape&)> fn) { recs_.push_back(std::move(fn)); }

  double scalar_value(Var s, const char* who) const {
    const Tensor& sv = value(s);
    if (sv.numel() != 1) throw std::invalid_argument(std::string(who) + ": expected scalar, got " + shape_str(sv.shape()));
    return sv[0];
  }

  Var scalar_affine(Var x, Var s, double sign, bool mul) {
    const Tensor& xv = value(x);
    const double sv = scalar_value(s, mul ? "smul" : "sadd/ssub");
    Tensor out = xv;
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = mul ? out[i] * sv : out[i] + sign * sv;
    Var o = push(std::move(out), tracked(x) || tracked(s));
    if (node(o).tracked) {
      record([xi = x.id, si = s.id, oi = o.id, sign, mul](GradTape& t) {
        const Tensor& g = t.nodes_[oi].grad;
        if (t.nodes_[xi].tracked) {
          const double f = mul ? t.nodes_[si].value[0] : 1.0;
          axpy(f, g, t.nodes_[xi].grad);
        }
        if (t.nodes_[si].tracked) {
          double acc = 0.0;
          if (mul) {
            const Tensor& xv2 = t.nodes_[xi].value;
            for (std::size_t i = 0; i < g.numel(); ++i) acc += g[i] * xv2[i];
          } else {
            for (std::size_t i = 0; i < g.numel(); ++i) acc += g[i];
            acc *= sign;
          }
          t.nodes_[si].grad[0] += acc;
        }
      });
    }
    return o;
  }

  std::vector<Node> nodes_;
  std::vector<std::function<void(GradTape&)>> recs_;
  bool has_grads_ = false;
};

}  // namespace pfed
