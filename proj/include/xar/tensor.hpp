#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "xar/errors.hpp"

namespace xar {

// Dense row-major tensor, double storage. Training-mode parameters are
// rounded to single precision after each optimizer step; the math itself
// always runs in double so gradient checks are meaningful.
struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
    data.assign(static_cast<size_t>(count(shape)), 0.0);
  }
  Tensor(std::vector<int> s, std::vector<double> d)
      : shape(std::move(s)), data(std::move(d)) {
    if (count(shape) != static_cast<long long>(data.size()))
      throw ShapeError("tensor data size does not match shape");
  }

  static long long count(const std::vector<int>& s) {
    long long n = 1;
    for (int e : s) {
      if (e <= 0) throw ShapeError("non-positive extent in tensor shape");
      n *= e;
    }
    return n;
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }
  static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }
  static Tensor full(std::vector<int> s, double v) {
    Tensor t(std::move(s));
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
  }

  int size() const { return static_cast<int>(data.size()); }
  int ndim() const { return static_cast<int>(shape.size()); }
  int rows() const { return ndim() == 1 ? 1 : shape[0]; }
  int cols() const { return shape.back(); }

  double& at(int i, int j) { return data[static_cast<size_t>(i) * cols() + j]; }
  double at(int i, int j) const {
    return data[static_cast<size_t>(i) * cols() + j];
  }

  bool finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }

  // Round every entry through IEEE-754 single precision.
  void round_to_float() {
    for (double& v : data) v = static_cast<double>(static_cast<float>(v));
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }
};

inline std::string shape_str(const std::vector<int>& s) {
  std::string out = "(";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + ")";
}

// Deterministic RNG helper. std::mt19937_64 output is pinned by the
// standard; the distributions are hand-rolled so streams are stable
// across standard libraries.
struct Rng {
  std::mt19937_64 gen;
  bool has_spare = false;
  double spare = 0.0;

  explicit Rng(uint64_t seed) : gen(seed) {}

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(gen() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  double normal() {
    if (has_spare) {
      has_spare = false;
      return spare;
    }
    double u1 = 0.0;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * 3.14159265358979323846 * u2;
    spare = r * std::sin(a);
    has_spare = true;
    return r * std::cos(a);
  }

  int uniform_int(int n) {  // [0, n)
    return static_cast<int>(gen() % static_cast<uint64_t>(n));
  }

  std::vector<int> permutation(int n) {
    std::vector<int> p(n);
    std::iota(p.begin(), p.end(), 0);
    for (int i = n - 1; i > 0; --i) {
      int j = uniform_int(i + 1);
      std::swap(p[i], p[j]);
    }
    return p;
  }
};

class Tape;

struct Var {
  Tape* tape = nullptr;
  int id = -1;
  bool valid() const { return tape != nullptr && id >= 0; }
};

// Reverse-mode tape over a closed primitive set. Single-owner: one thread
// builds and differentiates a given tape.
class Tape {
 public:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::function<void(Tape&)> backprop;  // accumulates into parent grads
  };

  bool grad_enabled = true;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor t, bool requires_grad = false) {
    return emit(std::move(t), requires_grad, nullptr);
  }
  Var constant(Tensor t) { return leaf(std::move(t), false); }
  Var constant(double v) { return leaf(Tensor::scalar(v), false); }

  const Tensor& val(Var v) const { return nodes_[v.id].value; }
  Tensor& grad(Var v) { return nodes_[v.id].grad; }
  const Tensor& grad(int id) const { return nodes_[id].grad; }
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }
  bool requires_grad(int id) const { return nodes_[id].requires_grad; }

  Var emit(Tensor value, bool rg, std::function<void(Tape&)> backprop) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = rg && grad_enabled;
    if (n.requires_grad) n.backprop = std::move(backprop);
    nodes_.push_back(std::move(n));
    return Var{this, static_cast<int>(nodes_.size()) - 1};
  }

  void backward(Var loss) {
    if (consumed_) throw NumericError("backward: graph already consumed");
    if (val(loss).size() != 1)
      throw NumericError("backward: loss must be a scalar");
    for (auto& n : nodes_) n.grad = Tensor::zeros(n.value.shape);
    nodes_[loss.id].grad.data[0] = 1.0;
    for (int i = loss.id; i >= 0; --i)
      if (nodes_[i].backprop) nodes_[i].backprop(*this);
    consumed_ = true;
  }

  size_t num_nodes() const { return nodes_.size(); }

  std::deque<Node> nodes_;

 private:
  bool consumed_ = false;
};

namespace detail {

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b))
    throw ShapeError(std::string(op) + ": shape mismatch " +
                     shape_str(a.shape) + " vs " + shape_str(b.shape));
}

// Emits a node whose backprop closure receives (tape, out_id).
template <class F>
Var make_op(Tape* t, Tensor value, bool rg, F&& fn) {
  if (!rg || !t->grad_enabled) return t->emit(std::move(value), false, nullptr);
  Var out = t->emit(std::move(value), true, nullptr);
  int oi = out.id;
  t->nodes_[oi].backprop = [oi, fn = std::forward<F>(fn)](Tape& tp) {
    fn(tp, oi);
  };
  return out;
}

}  // namespace detail

// ---- elementwise ----

inline Var add(Var a, Var b) {
  Tape* t = a.tape;
  const Tensor &av = t->val(a), &bv = t->val(b);
  detail::check_same_shape(av, bv, "add");
  Tensor out = av;
  for (int i = 0; i < out.size(); ++i) out.data[i] += bv.data[i];
  bool rg = t->requires_grad(a) || t->requires_grad(b);
  int ai = a.id, bi = b.id;
  return detail::make_op(t, std::move(out), rg, [ai, bi](Tape& tp, int oi) {
    const Tensor& g = tp.grad(oi);
    Tensor &ga = tp.nodes_[ai].grad, &gb = tp.nodes_[bi].grad;
    for (int i = 0; i < g.size(); ++i) {
      ga.data[i] += g.data[i];
      gb.data[i] += g.data[i];
    }
  });
}

inline Var sub(Var a, Var b) {
  Tape* t = a.tape;
  const Tensor &av = t->val(a), &bv = t->val(b);
  detail::check_same_shape(av, bv, "sub");
  Tensor out = av;
  for (int i = 0; i < out.size(); ++i) out.data[i] -= bv.data[i];
  bool rg = t->requires_grad(a) || t->requires_grad(b);
  int ai = a.id, bi = b.id;
  return detail::make_op(t, std::move(out), rg, [ai, bi](Tape& tp, int oi) {
    const Tensor& g = tp.grad(oi);
    Tensor &ga = tp.nodes_[ai].grad, &gb = tp.nodes_[bi].grad;
    for (int i = 0; i < g.size(); ++i) {
      ga.data[i] += g.data[i];
      gb.data[i] -= g.data[i];
    }
  });
}

inline Var mul(Var a, Var b) {
  Tape* t = a.tape;
  const Tensor &av = t->val(a), &bv = t->val(b);
  detail::check_same_shape(av, bv, "mul");
  Tensor out = av;
  for (int i = 0; i < out.size(); ++i) out.data[i] *= bv.data[i];
  bool rg = t->requires_grad(a) || t->requires_grad(b);
  int ai = a.id, bi = b.id;
  return detail::make_op(t, std::move(out), rg, [ai, bi](Tape& tp, int oi) {
    const Tensor& g = tp.grad(oi);
    const Tensor &av = tp.nodes_[ai].value, &bv = tp.nodes_[bi].value;
    Tensor &ga = tp.nodes_[ai].grad, &gb = tp.nodes_[bi].grad;
    for (int i = 0; i < g.size(); ++i) {
      ga.data[i] += g.data[i] * bv.data[i];
      gb.data[i] += g.data[i] * av.data[i];
    }
  });
}

inline Var scale(Var a, double c) {
  Tape* t = a.tape;
  Tensor out = t->val(a);
  for (double& v : out.data) v *= c;
  int ai = a.id;
  return detail::make_op(t, std::move(out), t->requires_grad(a),
                         [ai, c](Tape& tp, int oi) {
                           const Tensor& g = tp.grad(oi);
                           Tensor& ga = tp.nodes_[ai].grad;
                           for (int i = 0; i < g.size(); ++i)
                             ga.data[i] += c * g.data[i];
                         });
}

inline Var add_scalar(Var a, double c) {
  Tape* t = a.tape;
  Tensor out = t->val(a);
  for (double& v : out.data) v += c;
  int ai = a.id;
  return detail::make_op(t, std::move(out), t->requires_grad(a),
                         [ai](Tape& tp, int oi) {
                           const Tensor& g = tp.grad(oi);
                           Tensor& ga = tp.nodes_[ai].grad;
                           for (int i = 0; i < g.size(); ++i)
                             ga.data[i] += g.data[i];
                         });
}

inline Var sigmoid(Var a) {
  Tape* t = a.tape;
  Tensor out = t->val(a);
  for (double& v : out.data) v = 1.0 / (1.0 + std::exp(-v));
  int ai = a.id;
  return detail::make_op(t, std::move(out), t->requires_grad(a),
                         [ai](Tape& tp, int oi) {
                           const Tensor& g = tp.grad(oi);
                           const Tensor& y = tp.nodes_[oi].value;
                           Tensor& ga = tp.nodes_[ai].grad;
                           for (int i = 0; i < g.size(); ++i)
                             ga.data[i] +=
                                 g.data[i] * y.data[i] * (1.0 - y.data[i]);
                         });
}

// Hinge subgradient at 0 is 0 (inactive side).
inline Var relu(Var a) {
  Tape* t = a.tape;
  Tensor out = t->val(a);
  for (double& v : out.data) v = std::max(v, 0.0);
  int ai = a.id;
  return detail::make_op(t, std::move(out), t->requires_grad(a),
                         [ai](Tape& tp, int oi) {
                           const Tensor& g = tp.grad(oi);
                           const Tensor& x = tp.nodes_[ai].value;
                           Tensor& ga = tp.nodes_[ai].grad;
                           for (int i = 0; i < g.size(); ++i)
                             if (x.data[i] > 0.0) ga.data[i] += g.data[i];
                         });
}

// ---- row-structured ops (1-D input = a single row) ----

// Numerically stabilized softmax over the last axis.
inline Var softmax_rows(Var a) {
  Tape* t = a.tape;
  const Tensor& x = t->val(a);
  int r = x.rows(), c = x.cols();
  Tensor out = x;
  for (int i = 0; i < r; ++i) {
    double mx = -1e300;
    for (int j = 0; j < c; ++j) mx = std::max(mx, x.data[i * c + j]);
    double sum = 0.0;
    for (int j = 0; j < c; ++j) {
      double e = std::exp(x.data[i * c + j] - mx);
      out.data[i * c + j] = e;
      sum += e;
    }
    for (int j = 0; j < c; ++j) out.data[i * c + j] /= sum;
  }
  int ai = a.id;
  return detail::make_op(
      t, std::move(out), t->requires_grad(a), [ai, r, c](Tape& tp, int oi) {
        const Tensor& g = tp.grad(oi);
        const Tensor& y = tp.nodes_[oi].value;
        Tensor& ga = tp.nodes_[ai].grad;
        for (int i = 0; i < r; ++i) {
          double dot = 0.0;
          for (int j = 0; j < c; ++j)
            dot += g.data[i * c + j] * y.data[i * c + j];
          for (int j = 0; j < c; ++j)
            ga.data[i * c + j] +=
                y.data[i * c + j] * (g.data[i * c + j] - dot);
        }
      });
}

// y = x / max(||x||, eps) per row; zero rows map to zero.
inline Var l2norm_rows(Var a, double eps = 1e-12) {
  Tape* t = a.tape;
  const Tensor& x = t->val(a);
  int r = x.rows(), c = x.cols();
  Tensor out = x;
  std::vector<double> norms(r);
  for (int i = 0; i < r; ++i) {
    double s = 0.0;
    for (int j = 0; j < c; ++j) s += x.data[i * c + j] * x.data[i * c + j];
    double n = std::max(std::sqrt(s), eps);
    norms[i] = n;
    for (int j = 0; j < c; ++j) out.data[i * c + j] /= n;
  }
  int ai = a.id;
  return detail::make_op(
      t, std::move(out), t->requires_grad(a),
      [ai, r, c, eps, norms = std::move(norms)](Tape& tp, int oi) {
        const Tensor& g = tp.grad(oi);
        const Tensor& x = tp.nodes_[ai].value;
        Tensor& ga = tp.nodes_[ai].grad;
        for (int i = 0; i < r; ++i) {
          double n = norms[i];
          double s = 0.0;
          for (int j = 0; j < c; ++j)
            s += x.data[i * c + j] * x.data[i * c + j];
          bool clamped = std::sqrt(s) < eps;
          if (clamped) {
            for (int j = 0; j < c; ++j)
              ga.data[i * c + j] += g.data[i * c + j] / n;
          } else {
            double dot = 0.0;
            for (int j = 0; j < c; ++j)
              dot += g.data[i * c + j] * x.data[i * c + j];
            for (int j = 0; j < c; ++j)
              ga.data[i * c + j] += g.data[i * c + j] / n -
                                    x.data[i * c + j] * dot / (n * n * n);
          }
        }
      });
}

// ---- linear algebra ----

inline Var matmul(Var a, Var b) {
  Tape* t = a.tape;
  const Tensor &av = t->val(a), &bv = t->val(b);
  if (av.ndim() != 2 || bv.ndim() != 2 || av.shape[1] != bv.shape[0])
    throw ShapeError("matmul: incompatible shapes " + shape_str(av.shape) +
                     " x " + shape_str(bv.shape));
  int m = av.shape[0], k = av.shape[1], n = bv.shape[1];
  Tensor out({m, n});
  for (int i = 0; i < m; ++i)
    for (int l = 0; l < k; ++l) {
      double aval = av.data[i * k + l];
      if (aval == 0.0) continue;
      for (int j = 0; j < n; ++j)
        out.data[i * n + j] += aval * bv.data[l * n + j];
    }
  bool rg = t->requires_grad(a) || t->requires_grad(b);
  int ai = a.id, bi = b.id;
  return detail::make_op(
      t, std::move(out), rg, [ai, bi, m, k, n](Tape& tp, int oi) {
        const Tensor& g = tp.grad(oi);
        const Tensor &av = tp.nodes_[ai].value, &bv = tp.nodes_[bi].value;
        if (tp.requires_grad(ai)) {
          Tensor& ga = tp.nodes_[ai].grad;
          for (int i = 0; i < m; ++i)
            for (int l = 0; l < k; ++l) {
              double s = 0.0;
              for (int j = 0; j < n; ++j)
                s += g.data[i * n + j] * bv.data[l * n + j];
              ga.data[i * k + l] += s;
            }
        }
        if (tp.requires_grad(bi)) {
          Tensor& gb = tp.nodes_[bi].grad;
          for (int l = 0; l < k; ++l)
            for (int i = 0; i < m; ++i) {
              double aval = av.data[i * k + l];
              if (aval == 0.0) continue;
              for (int j = 0; j < n; ++j)
                gb.data[l * n + j] += aval * g.data[i * n + j];
            }
        }
      });
}

inline Var transpose(Var a) {
  Tape* t = a.tape;
  const Tensor& x = t->val(a);
  if (x.ndim() != 2) throw ShapeError("transpose: 2-D tensor required");
  int r = x.shape[0], c = x.shape[1];
  Tensor out({c, r});
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out.data[j * r + i] = x.data[i * c + j];
  int ai = a.id;
  return detail::make_op(t, std::move(out), t->requires_grad(a),
                         [ai, r, c](Tape& tp, int oi) {
                           const Tensor& g = tp.grad(oi);
                           Tensor& ga = tp.nodes_[ai].grad;
                           for (int i = 0; i < r; ++i)
                             for (int j = 0; j < c; ++j)
                               ga.data[i * c + j] += g.data[j * r + i];
                         });
}

// Broadcast a row vector over the rows of a 2-D (or 1-D) tensor.
inline Var add_rowvec(Var a, Var b) {
  Tape* t = a.tape;
  const Tensor &av = t->val(a), &bv = t->val(b);
  int r = av.rows(), c = av.cols();
  if (bv.size() != c)
    throw ShapeError("add_rowvec: vector length " + std::to_string(bv.size()) +
                     " vs row width " + std::to_string(c));
  Tensor out = av;
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out.data[i * c + j] += bv.data[j];
  bool rg = t->requires_grad(a) || t->requires_grad(b);
  int ai = a.id, bi = b.id;
  return detail::make_op(t, std::move(out), rg,
                         [ai, bi, r, c](Tape& tp, int oi) {
                           const Tensor& g = tp.grad(oi);
                           Tensor &ga = tp.nodes_[ai].grad,
                                  &gb = tp.nodes_[bi].grad;
                           for (int i = 0; i < r; ++i)
                             for (int j = 0; j < c; ++j) {
                               ga.data[i * c + j] += g.data[i * c + j];
                               gb.data[j] += g.data[i * c + j];
                             }
                         });
}

// out_ij = a_ij - v_i
inline Var sub_colvec(Var a, Var v) {
  Tape* t = a.tape;
  const Tensor &av = t->val(a), &vv = t->val(v);
  int r = av.rows(), c = av.cols();
  if (vv.size() != r)
    throw ShapeError("sub_colvec: vector length mismatch");
  Tensor out = av;
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out.data[i * c + j] -= vv.data[i];
  bool rg = t->requires_grad(a) || t->requires_grad(v);
  int ai = a.id, vi = v.id;
  return detail::make_op(t, std::move(out), rg,
                         [ai, vi, r, c](Tape& tp, int oi) {
                           const Tensor& g = tp.grad(oi);
                           Tensor &ga = tp.nodes_[ai].grad,
                                  &gv = tp.nodes_[vi].grad;
                           for (int i = 0; i < r; ++i)
                             for (int j = 0; j < c; ++j) {
                               ga.data[i * c + j] += g.data[i * c + j];
                               gv.data[i] -= g.data[i * c + j];
                             }
                         });
}

// out_ij = a_ij * s_i
inline Var rowscale(Var a, Var s) {
  Tape* t = a.tape;
  const Tensor &av = t->val(a), &sv = t->val(s);
  int r = av.rows(), c = av.cols();
  if (sv.size() != r) throw ShapeError("rowscale: vector length mismatch");
  Tensor out = av;
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out.data[i * c + j] *= sv.data[i];
  bool rg = t->requires_grad(a) || t->requires_grad(s);
  int ai = a.id, si = s.id;
  return detail::make_op(
      t, std::move(out), rg, [ai, si, r, c](Tape& tp, int oi) {
        const Tensor& g = tp.grad(oi);
        const Tensor &av = tp.nodes_[ai].value, &sv = tp.nodes_[si].value;
        Tensor &ga = tp.nodes_[ai].grad, &gs = tp.nodes_[si].grad;
        for (int i = 0; i < r; ++i)
          for (int j = 0; j < c; ++j) {
            ga.data[i * c + j] += g.data[i * c + j] * sv.data[i];
            gs.data[i] += g.data[i * c + j] * av.data[i * c + j];
          }
      });
}

// Columns [c0, c1) of a 2-D tensor.
inline Var colslice(Var a, int c0, int c1) {
  Tape* t = a.tape;
  const Tensor& x = t->val(a);
  int r = x.rows(), c = x.cols();
  if (c0 < 0 || c1 > c || c0 >= c1) throw ShapeError("colslice: bad range");
  int w = c1 - c0;
  Tensor out(x.ndim() == 1 ? std::vector<int>{w} : std::vector<int>{r, w});
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < w; ++j) out.data[i * w + j] = x.data[i * c + c0 + j];
  int ai = a.id;
  return detail::make_op(t, std::move(out), t->requires_grad(a),
                         [ai, r, c, c0, w](Tape& tp, int oi) {
                           const Tensor& g = tp.grad(oi);
                           Tensor& ga = tp.nodes_[ai].grad;
                           for (int i = 0; i < r; ++i)
                             for (int j = 0; j < w; ++j)
                               ga.data[i * c + c0 + j] += g.data[i * w + j];
                         });
}

// Column j as a 1-D vector.
inline Var col(Var a, int j) {
  Tape* t = a.tape;
  const Tensor& x = t->val(a);
  int r = x.rows(), c = x.cols();
  if (j < 0 || j >= c) throw ShapeError("col: index out of range");
  Tensor out({r});
  for (int i = 0; i < r; ++i) out.data[i] = x.data[i * c + j];
  int ai = a.id;
  return detail::make_op(t, std::move(out), t->requires_grad(a),
                         [ai, r, c, j](Tape& tp, int oi) {
                           const Tensor& g = tp.grad(oi);
                           Tensor& ga = tp.nodes_[ai].grad;
                           for (int i = 0; i < r; ++i)
                             ga.data[i * c + j] += g.data[i];
                         });
}

inline Var diag(Var a) {
  Tape* t = a.tape;
  const Tensor& x = t->val(a);
  if (x.ndim() != 2 || x.shape[0] != x.shape[1])
    throw ShapeError("diag: square 2-D tensor required");
  int n = x.shape[0];
  Tensor out({n});
  for (int i = 0; i < n; ++i) out.data[i] = x.data[i * n + i];
  int ai = a.id;
  return detail::make_op(t, std::move(out), t->requires_grad(a),
                         [ai, n](Tape& tp, int oi) {
                           const Tensor& g = tp.grad(oi);
                           Tensor& ga = tp.nodes_[ai].grad;
                           for (int i = 0; i < n; ++i)
                             ga.data[i * n + i] += g.data[i];
                         });
}

// ---- shape / assembly ----

inline Var reshape(Var a, std::vector<int> shape) {
  Tape* t = a.tape;
  const Tensor& x = t->val(a);
  if (Tensor::count(shape) != x.size())
    throw ShapeError("reshape: element count mismatch");
  Tensor out(std::move(shape), x.data);
  int ai = a.id;
  return detail::make_op(t, std::move(out), t->requires_grad(a),
                         [ai](Tape& tp, int oi) {
                           const Tensor& g = tp.grad(oi);
                           Tensor& ga = tp.nodes_[ai].grad;
                           for (int i = 0; i < g.size(); ++i)
                             ga.data[i] += g.data[i];
                         });
}

inline Var concat1d(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat1d: empty input");
  Tape* t = parts[0].tape;
  int total = 0;
  bool rg = false;
  std::vector<int> ids, sizes;
  for (Var p : parts) {
    total += t->val(p).size();
    rg = rg || t->requires_grad(p);
    ids.push_back(p.id);
    sizes.push_back(t->val(p).size());
  }
  Tensor out({total});
  int off = 0;
  for (Var p : parts) {
    const Tensor& v = t->val(p);
    std::copy(v.data.begin(), v.data.end(), out.data.begin() + off);
    off += v.size();
  }
  return detail::make_op(
      t, std::move(out), rg,
      [ids = std::move(ids), sizes = std::move(sizes)](Tape& tp, int oi) {
        const Tensor& g = tp.grad(oi);
        int off = 0;
        for (size_t p = 0; p < ids.size(); ++p) {
          Tensor& gp = tp.nodes_[ids[p]].grad;
          for (int i = 0; i < sizes[p]; ++i) gp.data[i] += g.data[off + i];
          off += sizes[p];
        }
      });
}

// Stack N same-length 1-D vectors into [N, D].
inline Var stack_rows(const std::vector<Var>& rows) {
  if (rows.empty()) throw ShapeError("stack_rows: empty input");
  Tape* t = rows[0].tape;
  int d = t->val(rows[0]).size();
  int n = static_cast<int>(rows.size());
  Tensor out({n, d});
  bool rg = false;
  std::vector<int> ids;
  for (int i = 0; i < n; ++i) {
    const Tensor& v = t->val(rows[i]);
    if (v.size() != d) throw ShapeError("stack_rows: ragged input");
    std::copy(v.data.begin(), v.data.end(), out.data.begin() + i * d);
    rg = rg || t->requires_grad(rows[i]);
    ids.push_back(rows[i].id);
  }
  return detail::make_op(t, std::move(out), rg,
                         [ids = std::move(ids), d](Tape& tp, int oi) {
                           const Tensor& g = tp.grad(oi);
                           for (size_t i = 0; i < ids.size(); ++i) {
                             Tensor& gi = tp.nodes_[ids[i]].grad;
                             for (int j = 0; j < d; ++j)
                               gi.data[j] += g.data[i * d + j];
                           }
                         });
}

// ---- reductions ----

inline Var sum(Var a) {
  Tape* t = a.tape;
  const Tensor& x = t->val(a);
  double s = std::accumulate(x.data.begin(), x.data.end(), 0.0);
  int ai = a.id;
  return detail::make_op(t, Tensor::scalar(s), t->requires_grad(a),
                         [ai](Tape& tp, int oi) {
                           double g = tp.grad(oi).data[0];
                           Tensor& ga = tp.nodes_[ai].grad;
                           for (double& v : ga.data) v += g;
                         });
}

inline Var dot(Var a, Var b) { return sum(mul(a, b)); }

// y = xW + b broadcast over the leading dims of x.
inline Var affine(Var x, Var w, Var b) {
  Tape* t = x.tape;
  const Tensor& xv = t->val(x);
  const Tensor& wv = t->val(w);
  if (wv.ndim() != 2 || xv.cols() != wv.shape[0])
    throw ShapeError("affine: input width " + std::to_string(xv.cols()) +
                     " does not match weight " + shape_str(wv.shape));
  int din = wv.shape[0], dout = wv.shape[1];
  std::vector<int> lead(xv.shape.begin(), xv.shape.end() - 1);
  int n = static_cast<int>(xv.size() / din);
  Var y = add_rowvec(matmul(reshape(x, {n, din}), w), b);
  std::vector<int> out_shape = lead;
  out_shape.push_back(dout);
  return reshape(y, out_shape);
}

// ---- verification ----

struct GradCheckReport {
  bool pass = true;
  double max_rel_err = 0.0;
  int worst_index = -1;
};

// Central-difference check of backward() against f evaluated twice per
// coordinate. f must be deterministic: (Tape&, Var) -> scalar Var.
template <class F>
GradCheckReport finite_diff_check(F&& f, const Tensor& x, double h = 1e-5,
                                  double tol = 1e-4) {
  Tensor analytic;
  {
    Tape tape;
    Var xv = tape.leaf(x, true);
    Var loss = f(tape, xv);
    tape.backward(loss);
    analytic = tape.grad(xv);
  }
  GradCheckReport rep;
  for (int i = 0; i < x.size(); ++i) {
    auto eval = [&](double v) {
      Tensor xp = x;
      xp.data[i] = v;
      Tape tape;
      tape.grad_enabled = false;
      Var xv = tape.leaf(xp, false);
      return tape.val(f(tape, xv)).data[0];
    };
    double fd = (eval(x.data[i] + h) - eval(x.data[i] - h)) / (2.0 * h);
    double g = analytic.data[i];
    double denom = std::max({std::fabs(g), std::fabs(fd), 1e-2});
    double rel = std::fabs(g - fd) / denom;
    if (rel > rep.max_rel_err) {
      rep.max_rel_err = rel;
      rep.worst_index = i;
    }
  }
  rep.pass = rep.max_rel_err <= tol;
  return rep;
}

inline void check_finite(const Tensor& t, const std::string& what) {
  if (!t.finite()) throw NumericError("non-finite values in " + what);
}

}  // namespace xar
