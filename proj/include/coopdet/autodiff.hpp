#pragma once

#include <algorithm>
#include <deque>
#include <functional>
#include <memory>
#include <numeric>
#include <vector>

#include "coopdet/geometry.hpp"
#include "coopdet/tensor.hpp"

namespace coopdet {

// Reverse-mode autodiff on small dense tensors.
//
// A Graph owns its nodes; construction order is already a topological order,
// so the backward pass is a single reverse sweep. Handles (`Var`) are plain
// pointers valid for the lifetime of the graph. Graphs are built per scene,
// differentiated once, and discarded.
struct Node {
  Tensor val;
  Tensor grad;
  bool needs_grad = false;
  bool has_grad = false;
  std::function<void()> back;  // empty for leaves/constants
};

using Var = Node*;

class Graph {
 public:
  Var leaf(const Tensor& t, bool requires_grad = true) {
    Node* n = make(t, requires_grad);
    return n;
  }

  Var constant(Tensor t) { return make(std::move(t), false); }

  Node* make(Tensor val, bool needs) {
    nodes_.push_back(std::make_unique<Node>());
    Node* n = nodes_.back().get();
    n->val = std::move(val);
    n->needs_grad = needs;
    return n;
  }

  // Seeds d(loss)/d(loss) = 1 and sweeps the tape in reverse.
  void backward(Var loss) {
    check(loss->val.size() == 1, "backward: loss must be scalar");
    ensure_grad(loss);
    loss->grad.v[0] = 1.0;
    loss->has_grad = true;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      Node* n = it->get();
      if (n->has_grad && n->back) n->back();
    }
  }

  const Tensor& grad(Var x) const {
    check(x->has_grad, "grad: node did not receive a gradient");
    return x->grad;
  }

  std::size_t size() const { return nodes_.size(); }

  static void ensure_grad(Node* n) {
    if (!n->has_grad) {
      n->grad = Tensor(n->val.dims);
      n->has_grad = true;
    }
  }

  // Accumulation guard: constants never allocate gradient buffers.
  static bool wants(Node* n) { return n->needs_grad; }

 private:
  std::deque<std::unique_ptr<Node>> nodes_;
};

namespace detail {

inline bool any_needs(std::initializer_list<Node*> ins) {
  for (Node* n : ins)
    if (n->needs_grad) return true;
  return false;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary ops
// ---------------------------------------------------------------------------

inline Var add(Graph& g, Var a, Var b) {
  check(a->val.same_shape(b->val), "add: shape mismatch");
  Node* out = g.make(a->val, detail::any_needs({a, b}));
  for (int i = 0; i < out->val.size(); ++i) out->val[i] += b->val[i];
  if (out->needs_grad)
    out->back = [out, a, b]() {
      if (Graph::wants(a)) {
        Graph::ensure_grad(a);
        for (int i = 0; i < out->val.size(); ++i) a->grad[i] += out->grad[i];
      }
      if (Graph::wants(b)) {
        Graph::ensure_grad(b);
        for (int i = 0; i < out->val.size(); ++i) b->grad[i] += out->grad[i];
      }
    };
  return out;
}

inline Var sub(Graph& g, Var a, Var b) {
  check(a->val.same_shape(b->val), "sub: shape mismatch");
  Node* out = g.make(a->val, detail::any_needs({a, b}));
  for (int i = 0; i < out->val.size(); ++i) out->val[i] -= b->val[i];
  if (out->needs_grad)
    out->back = [out, a, b]() {
      if (Graph::wants(a)) {
        Graph::ensure_grad(a);
        for (int i = 0; i < out->val.size(); ++i) a->grad[i] += out->grad[i];
      }
      if (Graph::wants(b)) {
        Graph::ensure_grad(b);
        for (int i = 0; i < out->val.size(); ++i) b->grad[i] -= out->grad[i];
      }
    };
  return out;
}

inline Var mul(Graph& g, Var a, Var b) {
  check(a->val.same_shape(b->val), "mul: shape mismatch");
  Node* out = g.make(Tensor(a->val.dims), detail::any_needs({a, b}));
  for (int i = 0; i < out->val.size(); ++i) out->val[i] = a->val[i] * b->val[i];
  if (out->needs_grad)
    out->back = [out, a, b]() {
      if (Graph::wants(a)) {
        Graph::ensure_grad(a);
        for (int i = 0; i < out->val.size(); ++i)
          a->grad[i] += out->grad[i] * b->val[i];
      }
      if (Graph::wants(b)) {
        Graph::ensure_grad(b);
        for (int i = 0; i < out->val.size(); ++i)
          b->grad[i] += out->grad[i] * a->val[i];
      }
    };
  return out;
}

inline Var vdiv(Graph& g, Var a, Var b) {
  check(a->val.same_shape(b->val), "vdiv: shape mismatch");
  Node* out = g.make(Tensor(a->val.dims), detail::any_needs({a, b}));
  for (int i = 0; i < out->val.size(); ++i) out->val[i] = a->val[i] / b->val[i];
  if (out->needs_grad)
    out->back = [out, a, b]() {
      if (Graph::wants(a)) {
        Graph::ensure_grad(a);
        for (int i = 0; i < out->val.size(); ++i)
          a->grad[i] += out->grad[i] / b->val[i];
      }
      if (Graph::wants(b)) {
        Graph::ensure_grad(b);
        for (int i = 0; i < out->val.size(); ++i)
          b->grad[i] -= out->grad[i] * a->val[i] / (b->val[i] * b->val[i]);
      }
    };
  return out;
}

// min/max pick the first argument on ties (deterministic subgradient).
inline Var vmin(Graph& g, Var a, Var b) {
  check(a->val.same_shape(b->val), "vmin: shape mismatch");
  Node* out = g.make(Tensor(a->val.dims), detail::any_needs({a, b}));
  for (int i = 0; i < out->val.size(); ++i)
    out->val[i] = a->val[i] <= b->val[i] ? a->val[i] : b->val[i];
  if (out->needs_grad)
    out->back = [out, a, b]() {
      for (int i = 0; i < out->val.size(); ++i) {
        Node* dst = a->val[i] <= b->val[i] ? a : b;
        if (Graph::wants(dst)) {
          Graph::ensure_grad(dst);
          dst->grad[i] += out->grad[i];
        }
      }
    };
  return out;
}

inline Var vmax(Graph& g, Var a, Var b) {
  check(a->val.same_shape(b->val), "vmax: shape mismatch");
  Node* out = g.make(Tensor(a->val.dims), detail::any_needs({a, b}));
  for (int i = 0; i < out->val.size(); ++i)
    out->val[i] = a->val[i] >= b->val[i] ? a->val[i] : b->val[i];
  if (out->needs_grad)
    out->back = [out, a, b]() {
      for (int i = 0; i < out->val.size(); ++i) {
        Node* dst = a->val[i] >= b->val[i] ? a : b;
        if (Graph::wants(dst)) {
          Graph::ensure_grad(dst);
          dst->grad[i] += out->grad[i];
        }
      }
    };
  return out;
}

// ---------------------------------------------------------------------------
// Scalar-constant and tensor-constant ops
// ---------------------------------------------------------------------------

inline Var mulc(Graph& g, Var a, double s) {
  Node* out = g.make(Tensor(a->val.dims), a->needs_grad);
  for (int i = 0; i < out->val.size(); ++i) out->val[i] = a->val[i] * s;
  if (out->needs_grad)
    out->back = [out, a, s]() {
      Graph::ensure_grad(a);
      for (int i = 0; i < out->val.size(); ++i) a->grad[i] += out->grad[i] * s;
    };
  return out;
}

inline Var addc(Graph& g, Var a, double s) {
  Node* out = g.make(Tensor(a->val.dims), a->needs_grad);
  for (int i = 0; i < out->val.size(); ++i) out->val[i] = a->val[i] + s;
  if (out->needs_grad)
    out->back = [out, a]() {
      Graph::ensure_grad(a);
      for (int i = 0; i < out->val.size(); ++i) a->grad[i] += out->grad[i];
    };
  return out;
}

// Elementwise product with a constant tensor (masks, weights).
inline Var cmul(Graph& g, Var a, Tensor w) {
  check(a->val.same_shape(w), "cmul: shape mismatch");
  Node* out = g.make(Tensor(a->val.dims), a->needs_grad);
  for (int i = 0; i < out->val.size(); ++i) out->val[i] = a->val[i] * w[i];
  if (out->needs_grad) {
    auto wp = std::make_shared<Tensor>(std::move(w));
    out->back = [out, a, wp]() {
      Graph::ensure_grad(a);
      for (int i = 0; i < out->val.size(); ++i)
        a->grad[i] += out->grad[i] * (*wp)[i];
    };
  }
  return out;
}

inline Var neg(Graph& g, Var a) { return mulc(g, a, -1.0); }

// ---------------------------------------------------------------------------
// Elementwise unary ops
// ---------------------------------------------------------------------------

inline Var relu(Graph& g, Var a) {
  Node* out = g.make(Tensor(a->val.dims), a->needs_grad);
  for (int i = 0; i < out->val.size(); ++i)
    out->val[i] = a->val[i] > 0.0 ? a->val[i] : 0.0;
  if (out->needs_grad)
    out->back = [out, a]() {
      Graph::ensure_grad(a);
      for (int i = 0; i < out->val.size(); ++i)
        if (a->val[i] > 0.0) a->grad[i] += out->grad[i];
    };
  return out;
}

inline Var leaky_relu(Graph& g, Var a, double slope = 0.2) {
  Node* out = g.make(Tensor(a->val.dims), a->needs_grad);
  for (int i = 0; i < out->val.size(); ++i)
    out->val[i] = a->val[i] > 0.0 ? a->val[i] : slope * a->val[i];
  if (out->needs_grad)
    out->back = [out, a, slope]() {
      Graph::ensure_grad(a);
      for (int i = 0; i < out->val.size(); ++i)
        a->grad[i] += out->grad[i] * (a->val[i] > 0.0 ? 1.0 : slope);
    };
  return out;
}

inline Var vexp(Graph& g, Var a) {
  Node* out = g.make(Tensor(a->val.dims), a->needs_grad);
  for (int i = 0; i < out->val.size(); ++i) out->val[i] = std::exp(a->val[i]);
  if (out->needs_grad)
    out->back = [out, a]() {
      Graph::ensure_grad(a);
      for (int i = 0; i < out->val.size(); ++i)
        a->grad[i] += out->grad[i] * out->val[i];
    };
  return out;
}

inline Var vlog(Graph& g, Var a) {
  Node* out = g.make(Tensor(a->val.dims), a->needs_grad);
  for (int i = 0; i < out->val.size(); ++i) out->val[i] = std::log(a->val[i]);
  if (out->needs_grad)
    out->back = [out, a]() {
      Graph::ensure_grad(a);
      for (int i = 0; i < out->val.size(); ++i)
        a->grad[i] += out->grad[i] / a->val[i];
    };
  return out;
}

inline Var sigmoid(Graph& g, Var a) {
  Node* out = g.make(Tensor(a->val.dims), a->needs_grad);
  for (int i = 0; i < out->val.size(); ++i)
    out->val[i] = 1.0 / (1.0 + std::exp(-a->val[i]));
  if (out->needs_grad)
    out->back = [out, a]() {
      Graph::ensure_grad(a);
      for (int i = 0; i < out->val.size(); ++i) {
        const double s = out->val[i];
        a->grad[i] += out->grad[i] * s * (1.0 - s);
      }
    };
  return out;
}

// x^p for constant p; inputs must be positive where p is non-integer.
inline Var pow_const(Graph& g, Var a, double p) {
  Node* out = g.make(Tensor(a->val.dims), a->needs_grad);
  for (int i = 0; i < out->val.size(); ++i) out->val[i] = std::pow(a->val[i], p);
  if (out->needs_grad)
    out->back = [out, a, p]() {
      Graph::ensure_grad(a);
      for (int i = 0; i < out->val.size(); ++i)
        a->grad[i] += out->grad[i] * p * std::pow(a->val[i], p - 1.0);
    };
  return out;
}

// Clamp into [lo, hi]; zero gradient outside (saturating bounds).
inline Var clamp(Graph& g, Var a, double lo, double hi) {
  Node* out = g.make(Tensor(a->val.dims), a->needs_grad);
  for (int i = 0; i < out->val.size(); ++i)
    out->val[i] = std::min(hi, std::max(lo, a->val[i]));
  if (out->needs_grad)
    out->back = [out, a, lo, hi]() {
      Graph::ensure_grad(a);
      for (int i = 0; i < out->val.size(); ++i)
        if (a->val[i] > lo && a->val[i] < hi) a->grad[i] += out->grad[i];
    };
  return out;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

inline Var sum(Graph& g, Var a) {
  Node* out = g.make(Tensor({1}), a->needs_grad);
  double acc = 0.0;
  for (int i = 0; i < a->val.size(); ++i) acc += a->val[i];
  out->val[0] = acc;
  if (out->needs_grad)
    out->back = [out, a]() {
      Graph::ensure_grad(a);
      const double go = out->grad[0];
      for (int i = 0; i < a->val.size(); ++i) a->grad[i] += go;
    };
  return out;
}

inline Var add_scalars(Graph& g, std::vector<Var> xs) {
  check(!xs.empty(), "add_scalars: empty");
  Node* out = g.make(Tensor({1}), false);
  for (Var x : xs) {
    check(x->val.size() == 1, "add_scalars: non-scalar input");
    out->val[0] += x->val[0];
    out->needs_grad = out->needs_grad || x->needs_grad;
  }
  if (out->needs_grad)
    out->back = [out, xs = std::move(xs)]() {
      for (Var x : xs)
        if (Graph::wants(x)) {
          Graph::ensure_grad(x);
          x->grad[0] += out->grad[0];
        }
    };
  return out;
}

// ---------------------------------------------------------------------------
// Structural ops
// ---------------------------------------------------------------------------

inline Var concat_ch(Graph& g, Var a, Var b) {
  check(a->val.dims.size() == 3 && b->val.dims.size() == 3 &&
            a->val.dims[1] == b->val.dims[1] && a->val.dims[2] == b->val.dims[2],
        "concat_ch: incompatible shapes");
  const int ca = a->val.dims[0], cb = b->val.dims[0];
  Node* out = g.make(Tensor({ca + cb, a->val.dims[1], a->val.dims[2]}),
                     detail::any_needs({a, b}));
  std::copy(a->val.v.begin(), a->val.v.end(), out->val.v.begin());
  std::copy(b->val.v.begin(), b->val.v.end(), out->val.v.begin() + a->val.size());
  if (out->needs_grad)
    out->back = [out, a, b]() {
      const int na = a->val.size();
      if (Graph::wants(a)) {
        Graph::ensure_grad(a);
        for (int i = 0; i < na; ++i) a->grad[i] += out->grad[i];
      }
      if (Graph::wants(b)) {
        Graph::ensure_grad(b);
        for (int i = 0; i < b->val.size(); ++i) b->grad[i] += out->grad[na + i];
      }
    };
  return out;
}

inline Var slice_ch(Graph& g, Var x, int c0, int c1) {
  check(x->val.dims.size() == 3 && c0 >= 0 && c1 <= x->val.dims[0] && c0 < c1,
        "slice_ch: bad range");
  const int h = x->val.dims[1], w = x->val.dims[2], plane = h * w;
  Node* out = g.make(Tensor({c1 - c0, h, w}), x->needs_grad);
  std::copy(x->val.v.begin() + c0 * plane, x->val.v.begin() + c1 * plane,
            out->val.v.begin());
  if (out->needs_grad)
    out->back = [out, x, c0, plane]() {
      Graph::ensure_grad(x);
      const int off = c0 * plane;
      for (int i = 0; i < out->val.size(); ++i) x->grad[off + i] += out->grad[i];
    };
  return out;
}

// Reshape alias with identical element order.
inline Var reshape(Graph& g, Var x, std::vector<int> dims) {
  check(Tensor::count(dims) == x->val.size(), "reshape: element count mismatch");
  Node* out = g.make(Tensor(std::move(dims), x->val.v), x->needs_grad);
  if (out->needs_grad)
    out->back = [out, x]() {
      Graph::ensure_grad(x);
      for (int i = 0; i < out->val.size(); ++i) x->grad[i] += out->grad[i];
    };
  return out;
}

// out(r,c) = x(idx(r,c), r, c): per-cell channel selection.
inline Var gather_ch(Graph& g, Var x, std::vector<int> idx) {
  check(x->val.dims.size() == 3, "gather_ch: need 3-D input");
  const int h = x->val.dims[1], w = x->val.dims[2];
  check(static_cast<int>(idx.size()) == h * w, "gather_ch: index map size");
  Node* out = g.make(Tensor({h, w}), x->needs_grad);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c)
      out->val.at(r, c) = x->val.at(idx[r * w + c], r, c);
  if (out->needs_grad) {
    auto ip = std::make_shared<std::vector<int>>(std::move(idx));
    out->back = [out, x, ip, h, w]() {
      Graph::ensure_grad(x);
      for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c)
          x->grad.at((*ip)[r * w + c], r, c) += out->grad.at(r, c);
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// Neural ops
// ---------------------------------------------------------------------------

inline Var conv2d(Graph& g, Var x, Var w, Var b, int stride, int pad) {
  check(x->val.dims.size() == 3 && w->val.dims.size() == 4,
        "conv2d: need 3-D input and 4-D kernel");
  const int ci = x->val.dims[0], hi = x->val.dims[1], wi = x->val.dims[2];
  const int co = w->val.dims[0], kh = w->val.dims[2], kw = w->val.dims[3];
  check(w->val.dims[1] == ci, "conv2d: channel mismatch");
  check(b->val.size() == co, "conv2d: bias size");
  const int ho = (hi + 2 * pad - kh) / stride + 1;
  const int wo = (wi + 2 * pad - kw) / stride + 1;
  Node* out = g.make(Tensor({co, ho, wo}), detail::any_needs({x, w, b}));

  const double* xp = x->val.v.data();
  const double* wp = w->val.v.data();
  double* op = out->val.v.data();
  for (int oc = 0; oc < co; ++oc) {
    const double bias = b->val[oc];
    for (int oy = 0; oy < ho; ++oy) {
      for (int ox = 0; ox < wo; ++ox) {
        double acc = bias;
        const int iy0 = oy * stride - pad, ix0 = ox * stride - pad;
        for (int ic = 0; ic < ci; ++ic) {
          const double* xc = xp + (ic * hi) * wi;
          const double* wc = wp + ((oc * ci + ic) * kh) * kw;
          for (int ky = 0; ky < kh; ++ky) {
            const int iy = iy0 + ky;
            if (iy < 0 || iy >= hi) continue;
            const double* xr = xc + iy * wi;
            const double* wr = wc + ky * kw;
            for (int kx = 0; kx < kw; ++kx) {
              const int ix = ix0 + kx;
              if (ix < 0 || ix >= wi) continue;
              acc += xr[ix] * wr[kx];
            }
          }
        }
        op[(oc * ho + oy) * wo + ox] = acc;
      }
    }
  }

  if (out->needs_grad)
    out->back = [out, x, w, b, stride, pad, ci, hi, wi, co, kh, kw, ho, wo]() {
      const bool gx = Graph::wants(x), gw = Graph::wants(w), gb = Graph::wants(b);
      if (gx) Graph::ensure_grad(x);
      if (gw) Graph::ensure_grad(w);
      if (gb) Graph::ensure_grad(b);
      const double* gop = out->grad.v.data();
      const double* xp = x->val.v.data();
      const double* wp = w->val.v.data();
      for (int oc = 0; oc < co; ++oc) {
        for (int oy = 0; oy < ho; ++oy) {
          for (int ox = 0; ox < wo; ++ox) {
            const double go = gop[(oc * ho + oy) * wo + ox];
            if (go == 0.0) continue;
            if (gb) b->grad[oc] += go;
            const int iy0 = oy * stride - pad, ix0 = ox * stride - pad;
            for (int ic = 0; ic < ci; ++ic) {
              const int xoff = (ic * hi) * wi;
              const int woff = ((oc * ci + ic) * kh) * kw;
              for (int ky = 0; ky < kh; ++ky) {
                const int iy = iy0 + ky;
                if (iy < 0 || iy >= hi) continue;
                for (int kx = 0; kx < kw; ++kx) {
                  const int ix = ix0 + kx;
                  if (ix < 0 || ix >= wi) continue;
                  if (gx) x->grad[xoff + iy * wi + ix] += go * wp[woff + ky * kw + kx];
                  if (gw) w->grad[woff + ky * kw + kx] += go * xp[xoff + iy * wi + ix];
                }
              }
            }
          }
        }
      }
    };
  return out;
}

// Softmax across channels, independently at each spatial location.
inline Var softmax_ch(Graph& g, Var x) {
  check(x->val.dims.size() == 3, "softmax_ch: need 3-D input");
  const int k = x->val.dims[0], h = x->val.dims[1], w = x->val.dims[2];
  Node* out = g.make(Tensor(x->val.dims), x->needs_grad);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      double m = x->val.at(0, r, c);
      for (int i = 1; i < k; ++i) m = std::max(m, x->val.at(i, r, c));
      double z = 0.0;
      for (int i = 0; i < k; ++i) {
        const double e = std::exp(x->val.at(i, r, c) - m);
        out->val.at(i, r, c) = e;
        z += e;
      }
      for (int i = 0; i < k; ++i) out->val.at(i, r, c) /= z;
    }
  if (out->needs_grad)
    out->back = [out, x, k, h, w]() {
      Graph::ensure_grad(x);
      for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) {
          double dot = 0.0;
          for (int i = 0; i < k; ++i)
            dot += out->grad.at(i, r, c) * out->val.at(i, r, c);
          for (int i = 0; i < k; ++i)
            x->grad.at(i, r, c) +=
                out->val.at(i, r, c) * (out->grad.at(i, r, c) - dot);
        }
    };
  return out;
}

// Fully connected layer on a flattened input.
inline Var dense(Graph& g, Var x, Var w, Var b) {
  check(w->val.dims.size() == 2, "dense: need 2-D weight");
  const int no = w->val.dims[0], ni = w->val.dims[1];
  check(x->val.size() == ni, "dense: input size mismatch");
  check(b->val.size() == no, "dense: bias size mismatch");
  Node* out = g.make(Tensor({no}), detail::any_needs({x, w, b}));
  for (int o = 0; o < no; ++o) {
    double acc = b->val[o];
    const double* wr = w->val.v.data() + o * ni;
    for (int i = 0; i < ni; ++i) acc += wr[i] * x->val[i];
    out->val[o] = acc;
  }
  if (out->needs_grad)
    out->back = [out, x, w, b, no, ni]() {
      const bool gx = Graph::wants(x), gw = Graph::wants(w), gb = Graph::wants(b);
      if (gx) Graph::ensure_grad(x);
      if (gw) Graph::ensure_grad(w);
      if (gb) Graph::ensure_grad(b);
      for (int o = 0; o < no; ++o) {
        const double go = out->grad[o];
        if (go == 0.0) continue;
        if (gb) b->grad[o] += go;
        const double* wr = w->val.v.data() + o * ni;
        for (int i = 0; i < ni; ++i) {
          if (gx) x->grad[i] += go * wr[i];
          if (gw) w->grad[o * ni + i] += go * x->val[i];
        }
      }
    };
  return out;
}

inline Var global_mean_ch(Graph& g, Var x) {
  check(x->val.dims.size() == 3, "global_mean_ch: need 3-D input");
  const int c = x->val.dims[0], plane = x->val.dims[1] * x->val.dims[2];
  Node* out = g.make(Tensor({c}), x->needs_grad);
  for (int i = 0; i < c; ++i) {
    double acc = 0.0;
    for (int j = 0; j < plane; ++j) acc += x->val[i * plane + j];
    out->val[i] = acc / plane;
  }
  if (out->needs_grad)
    out->back = [out, x, c, plane]() {
      Graph::ensure_grad(x);
      for (int i = 0; i < c; ++i) {
        const double go = out->grad[i] / plane;
        for (int j = 0; j < plane; ++j) x->grad[i * plane + j] += go;
      }
    };
  return out;
}

// ---------------------------------------------------------------------------
// Bilinear warp
// ---------------------------------------------------------------------------

// Resamples a (C,H,W) map under a rigid frame transform with zero padding.
// `src_from_dst_t` maps destination local coords to source local coords; both
// grids share `spec`. The identity transform reproduces the input exactly.
struct WarpPlan {
  // For every destination cell: up to 4 (source index, weight) taps.
  std::vector<std::array<int, 4>> idx;
  std::vector<std::array<double, 4>> wgt;
};

inline WarpPlan make_warp_plan(const FrameTransform& src_from_dst_t,
                               const GridSpec& spec) {
  WarpPlan plan;
  const int n = spec.n;
  plan.idx.resize(static_cast<std::size_t>(n) * n);
  plan.wgt.resize(static_cast<std::size_t>(n) * n);
  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < n; ++c) {
      const Vec2 q_src = src_from_dst_t.apply(spec.center(r, c));
      const Vec2 rc = spec.to_rc(q_src);
      auto& id = plan.idx[static_cast<std::size_t>(r) * n + c];
      auto& wt = plan.wgt[static_cast<std::size_t>(r) * n + c];
      id = {-1, -1, -1, -1};
      wt = {0, 0, 0, 0};
      const double fr = std::floor(rc.x), fc = std::floor(rc.y);
      const double ar = rc.x - fr, ac = rc.y - fc;
      const int r0 = static_cast<int>(fr), c0 = static_cast<int>(fc);
      const double w4[4] = {(1 - ar) * (1 - ac), (1 - ar) * ac, ar * (1 - ac),
                            ar * ac};
      const int rr[4] = {r0, r0, r0 + 1, r0 + 1};
      const int cc[4] = {c0, c0 + 1, c0, c0 + 1};
      for (int t = 0; t < 4; ++t) {
        if (rr[t] < 0 || rr[t] >= n || cc[t] < 0 || cc[t] >= n) continue;
        if (w4[t] == 0.0) continue;
        id[t] = rr[t] * n + cc[t];
        wt[t] = w4[t];
      }
    }
  }
  return plan;
}

inline void apply_warp_plan(const WarpPlan& plan, const Tensor& x, Tensor& out) {
  const int ch = x.dims[0], plane = x.dims[1] * x.dims[2];
  for (int c = 0; c < ch; ++c) {
    const double* xi = x.v.data() + c * plane;
    double* xo = out.v.data() + c * plane;
    for (int p = 0; p < plane; ++p) {
      double acc = 0.0;
      const auto& id = plan.idx[p];
      const auto& wt = plan.wgt[p];
      for (int t = 0; t < 4; ++t)
        if (id[t] >= 0) acc += wt[t] * xi[id[t]];
      xo[p] = acc;
    }
  }
}

// Plain (non-graph) warp used for perturbation reseating and tests.
inline Tensor warp_tensor(const Tensor& x, const FrameTransform& src_from_dst_t,
                          const GridSpec& spec) {
  check(x.dims.size() == 3 && x.dims[1] == spec.n && x.dims[2] == spec.n,
        "warp_tensor: shape does not match grid");
  Tensor out(x.dims);
  apply_warp_plan(make_warp_plan(src_from_dst_t, spec), x, out);
  return out;
}

inline Var warp_bilinear(Graph& g, Var x, const FrameTransform& src_from_dst_t,
                         const GridSpec& spec) {
  check(x->val.dims.size() == 3 && x->val.dims[1] == spec.n &&
            x->val.dims[2] == spec.n,
        "warp_bilinear: shape does not match grid");
  Node* out = g.make(Tensor(x->val.dims), x->needs_grad);
  auto plan = std::make_shared<WarpPlan>(make_warp_plan(src_from_dst_t, spec));
  apply_warp_plan(*plan, x->val, out->val);
  if (out->needs_grad)
    out->back = [out, x, plan]() {
      Graph::ensure_grad(x);
      const int ch = x->val.dims[0], plane = x->val.dims[1] * x->val.dims[2];
      for (int c = 0; c < ch; ++c) {
        double* gx = x->grad.v.data() + c * plane;
        const double* go = out->grad.v.data() + c * plane;
        for (int p = 0; p < plane; ++p) {
          if (go[p] == 0.0) continue;
          const auto& id = plan->idx[p];
          const auto& wt = plan->wgt[p];
          for (int t = 0; t < 4; ++t)
            if (id[t] >= 0) gx[id[t]] += wt[t] * go[p];
        }
      }
    };
  return out;
}

// ---------------------------------------------------------------------------
// Cross-agent reductions (elementwise over a list of same-shaped maps)
// ---------------------------------------------------------------------------

namespace detail {

// Summation over a canonical (value-sorted) order, so the result is
// bit-identical under any permutation of the inputs.
inline double sorted_sum(double* buf, int n) {
  std::sort(buf, buf + n);
  double acc = 0.0;
  for (int i = 0; i < n; ++i) acc += buf[i];
  return acc;
}

}  // namespace detail

inline Var reduce_mean(Graph& g, const std::vector<Var>& xs) {
  check_arg(!xs.empty(), "reduce_mean: empty input list");
  check_arg(xs.size() <= 8, "reduce_mean: too many inputs");
  const int n = static_cast<int>(xs.size());
  bool needs = false;
  for (Var x : xs) {
    check(x->val.same_shape(xs[0]->val), "reduce_mean: shape mismatch");
    needs = needs || x->needs_grad;
  }
  Node* out = g.make(Tensor(xs[0]->val.dims), needs);
  const int sz = out->val.size();
  double buf[8];
  for (int i = 0; i < sz; ++i) {
    for (int j = 0; j < n; ++j) buf[j] = xs[j]->val[i];
    out->val[i] = detail::sorted_sum(buf, n) / n;
  }
  if (needs)
    out->back = [out, xs, n]() {
      for (Var x : xs)
        if (Graph::wants(x)) Graph::ensure_grad(x);
      const double inv = 1.0 / n;
      for (int i = 0; i < out->val.size(); ++i) {
        const double go = out->grad[i] * inv;
        for (Var x : xs)
          if (Graph::wants(x)) x->grad[i] += go;
      }
    };
  return out;
}

// Exact elementwise median; even counts average the two middle values.
inline Var reduce_median(Graph& g, const std::vector<Var>& xs) {
  check_arg(!xs.empty(), "reduce_median: empty input list");
  check_arg(xs.size() <= 8, "reduce_median: too many inputs");
  const int n = static_cast<int>(xs.size());
  bool needs = false;
  for (Var x : xs) {
    check(x->val.same_shape(xs[0]->val), "reduce_median: shape mismatch");
    needs = needs || x->needs_grad;
  }
  Node* out = g.make(Tensor(xs[0]->val.dims), needs);
  const int sz = out->val.size();
  // Remember which inputs supplied the median, for gradient routing.
  auto route = std::make_shared<std::vector<std::pair<int, int>>>(sz);
  std::array<std::pair<double, int>, 8> buf;
  for (int i = 0; i < sz; ++i) {
    for (int j = 0; j < n; ++j) buf[j] = {xs[j]->val[i], j};
    std::stable_sort(buf.begin(), buf.begin() + n);
    if (n % 2 == 1) {
      out->val[i] = buf[n / 2].first;
      (*route)[i] = {buf[n / 2].second, -1};
    } else {
      out->val[i] = 0.5 * (buf[n / 2 - 1].first + buf[n / 2].first);
      (*route)[i] = {buf[n / 2 - 1].second, buf[n / 2].second};
    }
  }
  if (needs)
    out->back = [out, xs, route]() {
      for (Var x : xs)
        if (Graph::wants(x)) Graph::ensure_grad(x);
      for (int i = 0; i < out->val.size(); ++i) {
        const auto [j1, j2] = (*route)[i];
        if (j2 < 0) {
          if (Graph::wants(xs[j1])) xs[j1]->grad[i] += out->grad[i];
        } else {
          if (Graph::wants(xs[j1])) xs[j1]->grad[i] += 0.5 * out->grad[i];
          if (Graph::wants(xs[j2])) xs[j2]->grad[i] += 0.5 * out->grad[i];
        }
      }
    };
  return out;
}

// Differentiable soft median: out = sum_i w_i v_i with
// w_i = softmax(-|v_i - median(v)| / T). The backward pass carries the full
// chain, including the median's subgradient, so analytic gradients match
// finite differences away from ties.
inline Var reduce_softmedian(Graph& g, const std::vector<Var>& xs, double temp) {
  check_arg(!xs.empty(), "reduce_softmedian: empty input list");
  check_arg(xs.size() <= 8, "reduce_softmedian: too many inputs");
  check_arg(temp > 0.0, "reduce_softmedian: temperature must be positive");
  const int n = static_cast<int>(xs.size());
  bool needs = false;
  for (Var x : xs) {
    check(x->val.same_shape(xs[0]->val), "reduce_softmedian: shape mismatch");
    needs = needs || x->needs_grad;
  }
  Node* out = g.make(Tensor(xs[0]->val.dims), needs);
  const int sz = out->val.size();
  std::array<std::pair<double, int>, 8> buf;
  for (int i = 0; i < sz; ++i) {
    for (int j = 0; j < n; ++j) buf[j] = {xs[j]->val[i], j};
    std::stable_sort(buf.begin(), buf.begin() + n);
    const double med = (n % 2 == 1)
                           ? buf[n / 2].first
                           : 0.5 * (buf[n / 2 - 1].first + buf[n / 2].first);
    // Accumulate in sorted order for permutation-stable arithmetic.
    double zsum = 0.0, acc = 0.0;
    for (int j = 0; j < n; ++j) {
      const double e = std::exp(-std::fabs(buf[j].first - med) / temp);
      zsum += e;
      acc += e * buf[j].first;
    }
    out->val[i] = acc / zsum;
  }
  if (needs)
    out->back = [out, xs, n, temp]() {
      for (Var x : xs)
        if (Graph::wants(x)) Graph::ensure_grad(x);
      std::array<double, 8> v, w, sgn, dm;
      for (int i = 0; i < out->val.size(); ++i) {
        const double go = out->grad[i];
        if (go == 0.0) continue;
        // Recompute weights and median routing at this element.
        std::array<std::pair<double, int>, 8> buf;
        for (int j = 0; j < n; ++j) buf[j] = {xs[j]->val[i], j};
        std::stable_sort(buf.begin(), buf.begin() + n);
        double med;
        for (int j = 0; j < n; ++j) dm[j] = 0.0;
        if (n % 2 == 1) {
          med = buf[n / 2].first;
          dm[buf[n / 2].second] = 1.0;
        } else {
          med = 0.5 * (buf[n / 2 - 1].first + buf[n / 2].first);
          dm[buf[n / 2 - 1].second] = 0.5;
          dm[buf[n / 2].second] = 0.5;
        }
        double zsum = 0.0;
        for (int j = 0; j < n; ++j) {
          v[j] = xs[j]->val[i];
          const double d = v[j] - med;
          sgn[j] = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
          w[j] = std::exp(-std::fabs(d) / temp);
          zsum += w[j];
        }
        for (int j = 0; j < n; ++j) w[j] /= zsum;
        // d(out)/d(v_j) = w_j + sum_i v_i dw_i/dv_j,
        // dw_i/dv_j = w_i (da_i/dv_j - sum_l w_l da_l/dv_j),
        // da_i/dv_j = -(1/T) sgn_i (delta_ij - dm_j).
        double s_ws = 0.0, s_wvs = 0.0, sv = 0.0;
        for (int l = 0; l < n; ++l) {
          s_ws += w[l] * sgn[l];
          s_wvs += w[l] * sgn[l] * v[l];
          sv += w[l] * v[l];
        }
        for (int j = 0; j < n; ++j) {
          if (!Graph::wants(xs[j])) continue;
          // sum_i v_i w_i da_i/dv_j
          const double term1 = -(1.0 / temp) * sgn[j] * w[j] * v[j] +
                               (1.0 / temp) * dm[j] * s_wvs;
          // sum_l w_l da_l/dv_j
          const double term2 =
              -(1.0 / temp) * sgn[j] * w[j] + (1.0 / temp) * dm[j] * s_ws;
          const double dout = w[j] + term1 - sv * term2;
          xs[j]->grad[i] += go * dout;
        }
      }
    };
  return out;
}

}  // namespace coopdet
