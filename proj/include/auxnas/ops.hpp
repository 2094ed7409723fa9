#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <optional>
#include <type_traits>
#include <string>
#include <vector>

#include "auxnas/tape.hpp"

// Differentiable primitives. Every op validates shapes, computes its forward
// value eagerly and records a backward closure when any input needs a grad.
namespace auxnas::ops {

namespace detail {

template <class T>
Tape<T>* same_tape(std::initializer_list<const Var<T>*> vs) {
  Tape<T>* t = nullptr;
  for (const Var<T>* v : vs) {
    if (v == nullptr || !v->valid()) continue;
    if (t == nullptr) t = v->tape;
    if (v->tape != t) throw ContractError("operands recorded on different tapes");
  }
  if (t == nullptr) throw ContractError("op called without a valid operand");
  return t;
}

template <class T>
bool ng(const Var<T>& v) {
  return v.valid() && v.tape->needs_grad(v.id);
}

inline void require_rank(const Shape& s, int rank, const char* what) {
  if (static_cast<int>(s.size()) != rank)
    throw DimensionError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got " + to_string(s));
}

inline void require_same(const Shape& a, const Shape& b, const char* what) {
  if (a != b) throw DimensionError(std::string(what) + ": shape mismatch " + to_string(a) + " vs " + to_string(b));
}

// Output index range [lo, hi) whose input coordinate o*stride + offset lies in [0, len).
inline int first_valid(int offset, int stride) { return offset >= 0 ? 0 : (-offset + stride - 1) / stride; }
inline int end_valid(int offset, int stride, int len, int out_len) {
  int hi = len - 1 - offset;
  if (hi < 0) return 0;
  return std::min(out_len, hi / stride + 1);
}

}  // namespace detail

template <class T>
Var<T> stop_gradient(Var<T> x) {
  return x.tape->constant(x.value());
}

template <class T>
void check_finite(Var<T> x, const std::string& path) {
  if (!x.value().all_finite()) throw NumericError("non-finite activation at " + path);
}

// ---------------------------------------------------------------------------
// Elementwise

// f maps x -> y; df maps (x, y) -> dy/dx.
template <class T, class F, class D>
Var<T> unary(Var<T> x, F f, D df) {
  Tape<T>* tape = x.tape;
  const Tensor<T>& xv = x.value();
  Tensor<T> y(xv.shape);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = f(xv[i]);
  int xid = x.id, oid = tape->next_id();
  return tape->record(std::move(y), detail::ng(x), [tape, xid, oid, df]() {
    const auto& xv = tape->value(xid);
    const auto& yv = tape->value(oid);
    const auto& go = tape->grad(oid);
    auto& gx = tape->grad(xid);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += go[i] * df(xv[i], yv[i]);
  });
}

// Subgradient at 0 is 0. NaN passes through so check_finite can see it.
template <class T>
Var<T> relu(Var<T> x) {
  return unary(x, [](T v) { return v > T(0) || v != v ? v : T(0); }, [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <class T>
Var<T> sigmoid(Var<T> x) {
  return unary(
      x,
      [](T v) {
        if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
        T e = std::exp(v);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

template <class T>
Var<T> tanh(Var<T> x) {
  return unary(x, [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}

template <class T>
Var<T> exp(Var<T> x) {
  return unary(x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <class T>
Var<T> softplus(Var<T> x) {
  return unary(
      x, [](T v) { return std::log1p(std::exp(-std::abs(v))) + std::max(v, T(0)); },
      [](T v, T) {
        if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
        T e = std::exp(v);
        return e / (T(1) + e);
      });
}

template <class T>
Var<T> abs(Var<T> x) {
  return unary(x, [](T v) { return std::abs(v); },
               [](T v, T) { return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0)); });
}

template <class T>
Var<T> scale(Var<T> x, T c) {
  return unary(x, [c](T v) { return c * v; }, [c](T, T) { return c; });
}

template <class T>
Var<T> add_scalar(Var<T> x, T c) {
  return unary(x, [c](T v) { return v + c; }, [](T, T) { return T(1); });
}

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  Tape<T>* tape = detail::same_tape<T>({&a, &b});
  detail::require_same(a.shape(), b.shape(), "add");
  Tensor<T> y = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += bv[i];
  int aid = a.id, bid = b.id, oid = tape->next_id();
  bool na = detail::ng(a), nb = detail::ng(b);
  return tape->record(std::move(y), na || nb, [tape, aid, bid, oid, na, nb]() {
    const auto& go = tape->grad(oid);
    if (na) {
      auto& g = tape->grad(aid);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i];
    }
    if (nb) {
      auto& g = tape->grad(bid);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i];
    }
  });
}

template <class T>
Var<T> sub(Var<T> a, Var<T> b) {
  Tape<T>* tape = detail::same_tape<T>({&a, &b});
  detail::require_same(a.shape(), b.shape(), "sub");
  Tensor<T> y = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] -= bv[i];
  int aid = a.id, bid = b.id, oid = tape->next_id();
  bool na = detail::ng(a), nb = detail::ng(b);
  return tape->record(std::move(y), na || nb, [tape, aid, bid, oid, na, nb]() {
    const auto& go = tape->grad(oid);
    if (na) {
      auto& g = tape->grad(aid);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i];
    }
    if (nb) {
      auto& g = tape->grad(bid);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= go[i];
    }
  });
}

template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
  Tape<T>* tape = detail::same_tape<T>({&a, &b});
  detail::require_same(a.shape(), b.shape(), "mul");
  Tensor<T> y = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= bv[i];
  int aid = a.id, bid = b.id, oid = tape->next_id();
  bool na = detail::ng(a), nb = detail::ng(b);
  return tape->record(std::move(y), na || nb, [tape, aid, bid, oid, na, nb]() {
    const auto& go = tape->grad(oid);
    const auto& av = tape->value(aid);
    const auto& bv = tape->value(bid);
    if (na) {
      auto& g = tape->grad(aid);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i] * bv[i];
    }
    if (nb) {
      auto& g = tape->grad(bid);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i] * av[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Convolution

struct Conv2dOpts {
  int stride = 1;
  int pad = 0;
  int dilation = 1;
  int groups = 1;
};

inline int conv_out_size(int in, int k, const Conv2dOpts& o) {
  int num = in + 2 * o.pad - o.dilation * (k - 1) - 1;
  if (num < 0) return 0;
  return num / o.stride + 1;
}

// x [N,C,H,W], w [O, C/groups, k, k], b [O] or invalid Var.
template <class T>
Var<T> conv2d(Var<T> x, Var<T> w, Var<T> b, Conv2dOpts o) {
  Tape<T>* tape = detail::same_tape<T>({&x, &w, &b});
  const Shape xs = x.shape(), ws = w.shape();
  detail::require_rank(xs, 4, "conv2d input");
  detail::require_rank(ws, 4, "conv2d weight");
  if (o.stride < 1 || o.dilation < 1 || o.groups < 1 || o.pad < 0) throw ContractError("conv2d: invalid options");
  const int N = xs[0], C = xs[1], H = xs[2], W = xs[3];
  const int O = ws[0], Cg = ws[1], k = ws[2];
  if (ws[3] != k || k < 1) throw DimensionError("conv2d: kernel must be square, got " + to_string(ws));
  if (C % o.groups != 0 || O % o.groups != 0 || Cg != C / o.groups)
    throw DimensionError("conv2d: channels " + std::to_string(C) + " incompatible with weight " + to_string(ws) +
                         " and groups " + std::to_string(o.groups));
  if (b.valid() && b.shape() != Shape{O}) throw DimensionError("conv2d: bias shape " + to_string(b.shape()));
  const int Ho = conv_out_size(H, k, o), Wo = conv_out_size(W, k, o);
  if (Ho <= 0 || Wo <= 0 || N == 0) throw DegenerateShapeError("conv2d: empty output for input " + to_string(xs));
  const int Og = O / o.groups;

  Tensor<T> y(Shape{N, O, Ho, Wo});
  const std::size_t in_plane = static_cast<std::size_t>(H) * W, out_plane = static_cast<std::size_t>(Ho) * Wo;
  const std::size_t rows = static_cast<std::size_t>(Cg) * k * k;

  // col[r, j] for r = (icl, kh, kw) and output pixel j; zero where padded.
  auto im2col = [=](const T* xg, T* col) {
    std::fill_n(col, rows * out_plane, T(0));
    for (int icl = 0; icl < Cg; ++icl)
      for (int kh = 0; kh < k; ++kh) {
        const int hoff = kh * o.dilation - o.pad;
        const int oh0 = detail::first_valid(hoff, o.stride), oh1 = detail::end_valid(hoff, o.stride, H, Ho);
        for (int kw = 0; kw < k; ++kw) {
          const int woff = kw * o.dilation - o.pad;
          const int ow0 = detail::first_valid(woff, o.stride), ow1 = detail::end_valid(woff, o.stride, W, Wo);
          T* cr = col + ((static_cast<std::size_t>(icl) * k + kh) * k + kw) * out_plane;
          const T* xp = xg + static_cast<std::size_t>(icl) * in_plane;
          for (int oh = oh0; oh < oh1; ++oh) {
            const T* xr = xp + static_cast<std::size_t>(oh * o.stride + hoff) * W + woff;
            T* crr = cr + static_cast<std::size_t>(oh) * Wo;
            for (int ow = ow0; ow < ow1; ++ow) crr[ow] = xr[ow * o.stride];
          }
        }
      }
  };
  auto col2im = [=](const T* col, T* gxg) {
    for (int icl = 0; icl < Cg; ++icl)
      for (int kh = 0; kh < k; ++kh) {
        const int hoff = kh * o.dilation - o.pad;
        const int oh0 = detail::first_valid(hoff, o.stride), oh1 = detail::end_valid(hoff, o.stride, H, Ho);
        for (int kw = 0; kw < k; ++kw) {
          const int woff = kw * o.dilation - o.pad;
          const int ow0 = detail::first_valid(woff, o.stride), ow1 = detail::end_valid(woff, o.stride, W, Wo);
          const T* cr = col + ((static_cast<std::size_t>(icl) * k + kh) * k + kw) * out_plane;
          T* gp = gxg + static_cast<std::size_t>(icl) * in_plane;
          for (int oh = oh0; oh < oh1; ++oh) {
            T* gr = gp + static_cast<std::size_t>(oh * o.stride + hoff) * W + woff;
            const T* crr = cr + static_cast<std::size_t>(oh) * Wo;
            for (int ow = ow0; ow < ow1; ++ow) gr[ow * o.stride] += crr[ow];
          }
        }
      }
  };

  std::vector<T> col(rows * out_plane);
  const T* xd = x.value().data();
  const T* wd = w.value().data();
  T* yd = y.data();
  for (int n = 0; n < N; ++n)
    for (int g = 0; g < o.groups; ++g) {
      im2col(xd + (static_cast<std::size_t>(n) * C + static_cast<std::size_t>(g) * Cg) * in_plane, col.data());
      for (int ocl = 0; ocl < Og; ++ocl) {
        const int oc = g * Og + ocl;
        T* yr = yd + (static_cast<std::size_t>(n) * O + oc) * out_plane;
        if (b.valid()) std::fill_n(yr, out_plane, b.value()[static_cast<std::size_t>(oc)]);
        const T* wr = wd + static_cast<std::size_t>(oc) * rows;
        for (std::size_t r = 0; r < rows; ++r) {
          const T wv = wr[r];
          const T* cr = col.data() + r * out_plane;
          for (std::size_t j = 0; j < out_plane; ++j) yr[j] += wv * cr[j];
        }
      }
    }

  const bool nx = detail::ng(x), nw = detail::ng(w), nb = detail::ng(b);
  const int xid = x.id, wid = w.id, bid = b.valid() ? b.id : -1, oid = tape->next_id();
  return tape->record(std::move(y), nx || nw || nb, [=]() {
    const auto& go = tape->grad(oid);
    const T* gd = go.data();
    const T* xd = tape->value(xid).data();
    const T* wd = tape->value(wid).data();
    T* gx = nx ? tape->grad(xid).data() : nullptr;
    T* gw = nw ? tape->grad(wid).data() : nullptr;
    if (nb) {
      auto& gbv = tape->grad(bid);
      for (int n = 0; n < N; ++n)
        for (int oc = 0; oc < O; ++oc) {
          const T* gp = gd + (static_cast<std::size_t>(n) * O + oc) * out_plane;
          T acc = 0;
          for (std::size_t i = 0; i < out_plane; ++i) acc += gp[i];
          gbv[static_cast<std::size_t>(oc)] += acc;
        }
    }
    if (!nx && !nw) return;
    std::vector<T> col(rows * out_plane), gcol(nx ? rows * out_plane : 0);
    for (int n = 0; n < N; ++n)
      for (int g = 0; g < o.groups; ++g) {
        const std::size_t xoff = (static_cast<std::size_t>(n) * C + static_cast<std::size_t>(g) * Cg) * in_plane;
        if (nw) im2col(xd + xoff, col.data());
        if (nx) std::fill(gcol.begin(), gcol.end(), T(0));
        for (int ocl = 0; ocl < Og; ++ocl) {
          const int oc = g * Og + ocl;
          const T* gr = gd + (static_cast<std::size_t>(n) * O + oc) * out_plane;
          const T* wr = wd + static_cast<std::size_t>(oc) * rows;
          T* gwr = nw ? gw + static_cast<std::size_t>(oc) * rows : nullptr;
          for (std::size_t r = 0; r < rows; ++r) {
            if (nw) {
              const T* cr = col.data() + r * out_plane;
              T acc = 0;
              for (std::size_t j = 0; j < out_plane; ++j) acc += gr[j] * cr[j];
              gwr[r] += acc;
            }
            if (nx) {
              const T wv = wr[r];
              T* gc = gcol.data() + r * out_plane;
              for (std::size_t j = 0; j < out_plane; ++j) gc[j] += wv * gr[j];
            }
          }
        }
        if (nx) col2im(gcol.data(), gx + xoff);
      }
  });
}

// ---------------------------------------------------------------------------
// Batch normalisation

struct BnOpts {
  bool train = true;
  double eps = 1e-5;
  double momentum = 0.1;
};

// running_mean / running_var may be null in train mode (no state update).
template <class T>
Var<T> batch_norm(Var<T> x, Var<T> gamma, Var<T> beta, std::type_identity_t<Param<T>>* running_mean,
                  std::type_identity_t<Param<T>>* running_var, BnOpts o) {
  Tape<T>* tape = detail::same_tape<T>({&x, &gamma, &beta});
  const Shape xs = x.shape();
  detail::require_rank(xs, 4, "batch_norm input");
  const int N = xs[0], C = xs[1], HW = xs[2] * xs[3];
  if (gamma.shape() != Shape{C} || beta.shape() != Shape{C})
    throw DimensionError("batch_norm: affine params must have shape [" + std::to_string(C) + "]");
  if (!(o.eps > 0)) throw ContractError("batch_norm: eps must be positive");
  const std::size_t M = static_cast<std::size_t>(N) * HW;
  if (M == 0) throw DegenerateShapeError("batch_norm: N*H*W == 0");
  if (!o.train && (running_mean == nullptr || running_var == nullptr))
    throw ContractError("batch_norm: eval mode requires running statistics");

  const auto& xv = x.value();
  const auto& gv = gamma.value();
  const auto& bv = beta.value();
  Tensor<T> y(xs);
  std::vector<T> mean(static_cast<std::size_t>(C)), inv_std(static_cast<std::size_t>(C));
  auto idx = [&](int n, int c) { return (static_cast<std::size_t>(n) * C + c) * HW; };

  for (int c = 0; c < C; ++c) {
    double m, var;
    if (o.train) {
      double s = 0;
      for (int n = 0; n < N; ++n)
        for (int i = 0; i < HW; ++i) s += xv[idx(n, c) + i];
      m = s / static_cast<double>(M);
      double ss = 0;
      for (int n = 0; n < N; ++n)
        for (int i = 0; i < HW; ++i) {
          double d = xv[idx(n, c) + i] - m;
          ss += d * d;
        }
      var = ss / static_cast<double>(M);
      if (running_mean != nullptr && running_var != nullptr) {
        double unbiased = M > 1 ? ss / static_cast<double>(M - 1) : var;
        auto& rm = running_mean->value[static_cast<std::size_t>(c)];
        auto& rv = running_var->value[static_cast<std::size_t>(c)];
        rm = static_cast<T>((1.0 - o.momentum) * rm + o.momentum * m);
        rv = static_cast<T>((1.0 - o.momentum) * rv + o.momentum * unbiased);
      }
    } else {
      m = running_mean->value[static_cast<std::size_t>(c)];
      var = running_var->value[static_cast<std::size_t>(c)];
    }
    mean[static_cast<std::size_t>(c)] = static_cast<T>(m);
    inv_std[static_cast<std::size_t>(c)] = static_cast<T>(1.0 / std::sqrt(var + o.eps));
    const T mc = static_cast<T>(m), is = inv_std[static_cast<std::size_t>(c)];
    const T g = gv[static_cast<std::size_t>(c)], be = bv[static_cast<std::size_t>(c)];
    for (int n = 0; n < N; ++n) {
      const std::size_t base = idx(n, c);
      for (int i = 0; i < HW; ++i) y[base + i] = g * ((xv[base + i] - mc) * is) + be;
    }
  }

  const bool nx = detail::ng(x), ngm = detail::ng(gamma), nbt = detail::ng(beta);
  const int xid = x.id, gid = gamma.id, bid = beta.id, oid = tape->next_id();
  const bool train = o.train;
  return tape->record(std::move(y), nx || ngm || nbt,
                      [=, mean = std::move(mean), inv_std = std::move(inv_std)]() {
    const auto& go = tape->grad(oid);
    const auto& xv = tape->value(xid);
    const auto& gv = tape->value(gid);
    for (int c = 0; c < C; ++c) {
      const T mc = mean[static_cast<std::size_t>(c)], is = inv_std[static_cast<std::size_t>(c)];
      T sum_g = 0, sum_gx = 0;
      for (int n = 0; n < N; ++n) {
        const std::size_t base = (static_cast<std::size_t>(n) * C + c) * HW;
        for (int i = 0; i < HW; ++i) {
          sum_g += go[base + i];
          sum_gx += go[base + i] * (xv[base + i] - mc) * is;
        }
      }
      if (ngm) tape->grad(gid)[static_cast<std::size_t>(c)] += sum_gx;
      if (nbt) tape->grad(bid)[static_cast<std::size_t>(c)] += sum_g;
      if (!nx) continue;
      auto& gx = tape->grad(xid);
      const T g = gv[static_cast<std::size_t>(c)];
      const T Mt = static_cast<T>(M);
      for (int n = 0; n < N; ++n) {
        const std::size_t base = (static_cast<std::size_t>(n) * C + c) * HW;
        for (int i = 0; i < HW; ++i) {
          if (train) {
            const T xhat = (xv[base + i] - mc) * is;
            gx[base + i] += g * is / Mt * (Mt * go[base + i] - sum_g - xhat * sum_gx);
          } else {
            gx[base + i] += g * is * go[base + i];
          }
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Layout

// Concatenate along axis 1; all other dims must agree.
template <class T>
Var<T> concat(const std::vector<Var<T>>& xs) {
  if (xs.empty()) throw ContractError("concat: no inputs");
  Tape<T>* tape = xs[0].tape;
  Shape out_shape = xs[0].shape();
  if (out_shape.size() < 2) throw DimensionError("concat: rank must be >= 2");
  int total = 0;
  for (const auto& v : xs) {
    if (v.tape != tape) throw ContractError("operands recorded on different tapes");
    Shape s = v.shape();
    if (s.size() != out_shape.size()) throw DimensionError("concat: rank mismatch");
    for (std::size_t d = 0; d < s.size(); ++d)
      if (d != 1 && s[d] != out_shape[d])
        throw DimensionError("concat: shape mismatch " + to_string(s) + " vs " + to_string(out_shape));
    total += s[1];
  }
  out_shape[1] = total;
  const int outer = out_shape[0];
  std::size_t inner = 1;
  for (std::size_t d = 2; d < out_shape.size(); ++d) inner *= static_cast<std::size_t>(out_shape[d]);
  Tensor<T> y(out_shape);
  std::vector<int> ids, chans;
  std::vector<bool> needs;
  bool any = false;
  int off = 0;
  for (const auto& v : xs) {
    const int ci = v.dim(1);
    const auto& vv = v.value();
    for (int n = 0; n < outer; ++n)
      std::copy_n(vv.data() + static_cast<std::size_t>(n) * ci * inner, static_cast<std::size_t>(ci) * inner,
                  y.data() + (static_cast<std::size_t>(n) * total + off) * inner);
    ids.push_back(v.id);
    chans.push_back(ci);
    needs.push_back(detail::ng(v));
    any = any || needs.back();
    off += ci;
  }
  const int oid = tape->next_id();
  return tape->record(std::move(y), any, [=]() {
    const auto& go = tape->grad(oid);
    int off = 0;
    for (std::size_t j = 0; j < ids.size(); ++j) {
      const int ci = chans[j];
      if (needs[j]) {
        auto& g = tape->grad(ids[j]);
        for (int n = 0; n < outer; ++n) {
          const T* src = go.data() + (static_cast<std::size_t>(n) * total + off) * inner;
          T* dst = g.data() + static_cast<std::size_t>(n) * ci * inner;
          for (std::size_t i = 0; i < static_cast<std::size_t>(ci) * inner; ++i) dst[i] += src[i];
        }
      }
      off += ci;
    }
  });
}

// Channels [start, start+len) along axis 1.
template <class T>
Var<T> slice(Var<T> x, int start, int len) {
  Tape<T>* tape = x.tape;
  Shape s = x.shape();
  if (s.size() < 2 || start < 0 || len < 1 || start + len > s[1])
    throw DimensionError("slice: range out of bounds for " + to_string(s));
  const int outer = s[0], C = s[1];
  std::size_t inner = 1;
  for (std::size_t d = 2; d < s.size(); ++d) inner *= static_cast<std::size_t>(s[d]);
  Shape os = s;
  os[1] = len;
  Tensor<T> y(os);
  const auto& xv = x.value();
  for (int n = 0; n < outer; ++n)
    std::copy_n(xv.data() + (static_cast<std::size_t>(n) * C + start) * inner, static_cast<std::size_t>(len) * inner,
                y.data() + static_cast<std::size_t>(n) * len * inner);
  const int xid = x.id, oid = tape->next_id();
  return tape->record(std::move(y), detail::ng(x), [=]() {
    const auto& go = tape->grad(oid);
    auto& g = tape->grad(xid);
    for (int n = 0; n < outer; ++n) {
      const T* src = go.data() + static_cast<std::size_t>(n) * len * inner;
      T* dst = g.data() + (static_cast<std::size_t>(n) * C + start) * inner;
      for (std::size_t i = 0; i < static_cast<std::size_t>(len) * inner; ++i) dst[i] += src[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Resampling

namespace detail {
struct LerpIndex {
  int i0, i1;
  double w1;  // weight of i1
};

inline std::vector<LerpIndex> lerp_table(int in, int out, bool align_corners) {
  std::vector<LerpIndex> t(static_cast<std::size_t>(out));
  for (int o = 0; o < out; ++o) {
    double src;
    if (align_corners) {
      src = out > 1 ? static_cast<double>(o) * (in - 1) / (out - 1) : 0.0;
    } else {
      src = (o + 0.5) * static_cast<double>(in) / out - 0.5;
      if (src < 0) src = 0;
    }
    int i0 = std::min(static_cast<int>(std::floor(src)), in - 1);
    int i1 = std::min(i0 + 1, in - 1);
    t[static_cast<std::size_t>(o)] = {i0, i1, src - i0};
  }
  return t;
}
}  // namespace detail

template <class T>
Var<T> bilinear_resize(Var<T> x, int out_h, int out_w, bool align_corners = false) {
  Tape<T>* tape = x.tape;
  const Shape s = x.shape();
  detail::require_rank(s, 4, "bilinear_resize");
  if (out_h < 1 || out_w < 1) throw DegenerateShapeError("bilinear_resize: output size must be >= 1");
  const int N = s[0], C = s[1], H = s[2], W = s[3];
  if (H < 1 || W < 1) throw DegenerateShapeError("bilinear_resize: empty input");
  auto ty = detail::lerp_table(H, out_h, align_corners);
  auto tx = detail::lerp_table(W, out_w, align_corners);
  Tensor<T> y(Shape{N, C, out_h, out_w});
  const auto& xv = x.value();
  const std::size_t planes = static_cast<std::size_t>(N) * C;
  for (std::size_t p = 0; p < planes; ++p) {
    const T* xp = xv.data() + p * H * W;
    T* yp = y.data() + p * out_h * out_w;
    for (int oy = 0; oy < out_h; ++oy) {
      const auto& ly = ty[static_cast<std::size_t>(oy)];
      const T wy = static_cast<T>(ly.w1);
      const T* r0 = xp + static_cast<std::size_t>(ly.i0) * W;
      const T* r1 = xp + static_cast<std::size_t>(ly.i1) * W;
      for (int ox = 0; ox < out_w; ++ox) {
        const auto& lx = tx[static_cast<std::size_t>(ox)];
        const T wx = static_cast<T>(lx.w1);
        const T top = r0[lx.i0] + wx * (r0[lx.i1] - r0[lx.i0]);
        const T bot = r1[lx.i0] + wx * (r1[lx.i1] - r1[lx.i0]);
        yp[static_cast<std::size_t>(oy) * out_w + ox] = top + wy * (bot - top);
      }
    }
  }
  const int xid = x.id, oid = tape->next_id();
  return tape->record(std::move(y), detail::ng(x), [=]() {
    const auto& go = tape->grad(oid);
    auto& gx = tape->grad(xid);
    for (std::size_t p = 0; p < planes; ++p) {
      T* gp = gx.data() + p * H * W;
      const T* op = go.data() + p * out_h * out_w;
      for (int oy = 0; oy < out_h; ++oy) {
        const auto& ly = ty[static_cast<std::size_t>(oy)];
        const T wy = static_cast<T>(ly.w1);
        for (int ox = 0; ox < out_w; ++ox) {
          const auto& lx = tx[static_cast<std::size_t>(ox)];
          const T wx = static_cast<T>(lx.w1);
          const T g = op[static_cast<std::size_t>(oy) * out_w + ox];
          gp[static_cast<std::size_t>(ly.i0) * W + lx.i0] += g * (T(1) - wy) * (T(1) - wx);
          gp[static_cast<std::size_t>(ly.i0) * W + lx.i1] += g * (T(1) - wy) * wx;
          gp[static_cast<std::size_t>(ly.i1) * W + lx.i0] += g * wy * (T(1) - wx);
          gp[static_cast<std::size_t>(ly.i1) * W + lx.i1] += g * wy * wx;
        }
      }
    }
  });
}

enum class PadMode { border, zeros };

// Bilinear reads of x [N,C,H,W] at points [N, out_h*out_w, 2] given as (x, y)
// in pixel coordinates. Output is [N, C, out_h, out_w].
template <class T>
Var<T> grid_sample_bilinear(Var<T> x, Var<T> points, int out_h, int out_w, PadMode mode = PadMode::border) {
  Tape<T>* tape = detail::same_tape<T>({&x, &points});
  const Shape s = x.shape(), ps = points.shape();
  detail::require_rank(s, 4, "grid_sample input");
  const int N = s[0], C = s[1], H = s[2], W = s[3];
  const int P = out_h * out_w;
  if (ps != Shape{N, P, 2}) throw DimensionError("grid_sample: points must be [N, out_h*out_w, 2], got " + to_string(ps));
  if (H < 1 || W < 1 || P < 1) throw DegenerateShapeError("grid_sample: empty input or output");

  // Per point: corner indices (-1 when outside in zeros mode), fractional
  // weights, and whether each coordinate was clamped.
  struct Corner {
    int x0, x1, y0, y1;
    T wx, wy;
    bool cx, cy;
  };
  std::vector<Corner> cs(static_cast<std::size_t>(N) * P);
  const auto& pv = points.value();
  for (std::size_t i = 0; i < cs.size(); ++i) {
    T px = pv[2 * i], py = pv[2 * i + 1];
    Corner c{};
    if (mode == PadMode::border) {
      c.cx = px < T(0) || px > T(W - 1);
      c.cy = py < T(0) || py > T(H - 1);
      px = std::clamp(px, T(0), T(W - 1));
      py = std::clamp(py, T(0), T(H - 1));
    }
    const int fx = static_cast<int>(std::floor(px)), fy = static_cast<int>(std::floor(py));
    c.wx = px - T(fx);
    c.wy = py - T(fy);
    auto fix = [&](int v, int len) {
      if (mode == PadMode::border) return std::min(v, len - 1);
      return (v >= 0 && v < len) ? v : -1;
    };
    c.x0 = fix(fx, W);
    c.x1 = fix(fx + 1, W);
    c.y0 = fix(fy, H);
    c.y1 = fix(fy + 1, H);
    cs[i] = c;
  }

  Tensor<T> y(Shape{N, C, out_h, out_w});
  const auto& xv = x.value();
  auto read = [&](const T* plane, int yy, int xx) -> T {
    return (yy < 0 || xx < 0) ? T(0) : plane[static_cast<std::size_t>(yy) * W + xx];
  };
  for (int n = 0; n < N; ++n)
    for (int ch = 0; ch < C; ++ch) {
      const T* plane = xv.data() + (static_cast<std::size_t>(n) * C + ch) * H * W;
      T* out = y.data() + (static_cast<std::size_t>(n) * C + ch) * P;
      for (int p = 0; p < P; ++p) {
        const Corner& c = cs[static_cast<std::size_t>(n) * P + p];
        const T v00 = read(plane, c.y0, c.x0), v01 = read(plane, c.y0, c.x1);
        const T v10 = read(plane, c.y1, c.x0), v11 = read(plane, c.y1, c.x1);
        out[p] = (T(1) - c.wy) * ((T(1) - c.wx) * v00 + c.wx * v01) + c.wy * ((T(1) - c.wx) * v10 + c.wx * v11);
      }
    }

  const bool nx = detail::ng(x), np = detail::ng(points);
  const int xid = x.id, pid = points.id, oid = tape->next_id();
  return tape->record(std::move(y), nx || np, [=, cs = std::move(cs)]() {
    const auto& go = tape->grad(oid);
    const auto& xv = tape->value(xid);
    T* gx = nx ? tape->grad(xid).data() : nullptr;
    T* gp = np ? tape->grad(pid).data() : nullptr;
    auto read = [&](const T* plane, int yy, int xx) -> T {
      return (yy < 0 || xx < 0) ? T(0) : plane[static_cast<std::size_t>(yy) * W + xx];
    };
    for (int n = 0; n < N; ++n)
      for (int ch = 0; ch < C; ++ch) {
        const std::size_t pbase = (static_cast<std::size_t>(n) * C + ch) * H * W;
        const T* plane = xv.data() + pbase;
        const T* g = go.data() + (static_cast<std::size_t>(n) * C + ch) * P;
        for (int p = 0; p < P; ++p) {
          const Corner& c = cs[static_cast<std::size_t>(n) * P + p];
          const T gv = g[p];
          if (gx != nullptr) {
            auto put = [&](int yy, int xx, T wgt) {
              if (yy >= 0 && xx >= 0) gx[pbase + static_cast<std::size_t>(yy) * W + xx] += gv * wgt;
            };
            put(c.y0, c.x0, (T(1) - c.wy) * (T(1) - c.wx));
            put(c.y0, c.x1, (T(1) - c.wy) * c.wx);
            put(c.y1, c.x0, c.wy * (T(1) - c.wx));
            put(c.y1, c.x1, c.wy * c.wx);
          }
          if (gp != nullptr) {
            const T v00 = read(plane, c.y0, c.x0), v01 = read(plane, c.y0, c.x1);
            const T v10 = read(plane, c.y1, c.x0), v11 = read(plane, c.y1, c.x1);
            const std::size_t pi = (static_cast<std::size_t>(n) * P + p) * 2;
            if (!c.cx) gp[pi] += gv * ((T(1) - c.wy) * (v01 - v00) + c.wy * (v11 - v10));
            if (!c.cy) gp[pi + 1] += gv * ((T(1) - c.wx) * (v10 - v00) + c.wx * (v11 - v01));
          }
        }
      }
  });
}

// Converts offsets [N, 2*k*k, H, W] (channel 2j = dy, 2j+1 = dx for kernel tap
// j) into sample points laid out on a (k*H) x (k*W) grid, so that a conv with
// kernel k and stride k over the sampled image realises a deformable conv.
template <class T>
Var<T> deform_points(Var<T> offsets, int k, int dilation) {
  Tape<T>* tape = offsets.tape;
  const Shape s = offsets.shape();
  detail::require_rank(s, 4, "deform_points");
  const int N = s[0], H = s[2], W = s[3];
  if (s[1] != 2 * k * k) throw DimensionError("deform_points: expected " + std::to_string(2 * k * k) + " offset channels");
  const int OW = k * W;
  const std::size_t P = static_cast<std::size_t>(k) * H * k * W;
  Tensor<T> y(Shape{N, static_cast<int>(P), 2});
  const auto& ov = offsets.value();
  const int half = k / 2;
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  for (int n = 0; n < N; ++n)
    for (int h = 0; h < H; ++h)
      for (int w = 0; w < W; ++w)
        for (int i = 0; i < k; ++i)
          for (int j = 0; j < k; ++j) {
            const int tap = i * k + j;
            const std::size_t obase = static_cast<std::size_t>(n) * 2 * k * k * plane + static_cast<std::size_t>(h) * W + w;
            const T dy = ov[obase + static_cast<std::size_t>(2 * tap) * plane];
            const T dx = ov[obase + static_cast<std::size_t>(2 * tap + 1) * plane];
            const std::size_t p = static_cast<std::size_t>(n) * P + static_cast<std::size_t>(h * k + i) * OW + (w * k + j);
            y[2 * p] = T(w + (j - half) * dilation) + dx;
            y[2 * p + 1] = T(h + (i - half) * dilation) + dy;
          }
  const int oid_in = offsets.id, oid = tape->next_id();
  return tape->record(std::move(y), detail::ng(offsets), [=]() {
    const auto& go = tape->grad(oid);
    auto& g = tape->grad(oid_in);
    for (int n = 0; n < N; ++n)
      for (int h = 0; h < H; ++h)
        for (int w = 0; w < W; ++w)
          for (int i = 0; i < k; ++i)
            for (int j = 0; j < k; ++j) {
              const int tap = i * k + j;
              const std::size_t obase = static_cast<std::size_t>(n) * 2 * k * k * plane + static_cast<std::size_t>(h) * W + w;
              const std::size_t p = static_cast<std::size_t>(n) * P + static_cast<std::size_t>(h * k + i) * OW + (w * k + j);
              g[obase + static_cast<std::size_t>(2 * tap) * plane] += go[2 * p + 1];
              g[obase + static_cast<std::size_t>(2 * tap + 1) * plane] += go[2 * p];
            }
  });
}

// ---------------------------------------------------------------------------
// Reductions

enum class Reduce { sum, mean };

// Reduces over the listed axes, keeping them as size-1 dims.
template <class T>
Var<T> reduce(Var<T> x, Reduce op, std::vector<int> axes) {
  Tape<T>* tape = x.tape;
  const Shape s = x.shape();
  const int rank = static_cast<int>(s.size());
  Shape os = s;
  std::size_t count = 1;
  std::vector<bool> red(static_cast<std::size_t>(rank), false);
  for (int a : axes) {
    if (a < 0) a += rank;
    if (a < 0 || a >= rank) throw DimensionError("reduce: axis out of range for " + to_string(s));
    if (red[static_cast<std::size_t>(a)]) continue;
    red[static_cast<std::size_t>(a)] = true;
    if (s[static_cast<std::size_t>(a)] == 0) throw DegenerateShapeError("reduce: empty reduction axis");
    count *= static_cast<std::size_t>(s[static_cast<std::size_t>(a)]);
    os[static_cast<std::size_t>(a)] = 1;
  }
  // Flat input index -> flat output index.
  const std::size_t total = numel(s);
  std::vector<std::size_t> map(total);
  {
    std::vector<std::size_t> ostride(static_cast<std::size_t>(rank), 1);
    for (int d = rank - 2; d >= 0; --d)
      ostride[static_cast<std::size_t>(d)] = ostride[static_cast<std::size_t>(d + 1)] * static_cast<std::size_t>(os[static_cast<std::size_t>(d + 1)]);
    std::vector<int> coord(static_cast<std::size_t>(rank), 0);
    for (std::size_t i = 0; i < total; ++i) {
      std::size_t o = 0;
      for (int d = 0; d < rank; ++d)
        if (!red[static_cast<std::size_t>(d)]) o += static_cast<std::size_t>(coord[static_cast<std::size_t>(d)]) * ostride[static_cast<std::size_t>(d)];
      map[i] = o;
      for (int d = rank - 1; d >= 0; --d) {
        if (++coord[static_cast<std::size_t>(d)] < s[static_cast<std::size_t>(d)]) break;
        coord[static_cast<std::size_t>(d)] = 0;
      }
    }
  }
  Tensor<T> y(os);
  const auto& xv = x.value();
  for (std::size_t i = 0; i < total; ++i) y[map[i]] += xv[i];
  const T scale_by = op == Reduce::mean ? T(1) / static_cast<T>(count) : T(1);
  if (op == Reduce::mean)
    for (auto& v : y.values) v *= scale_by;
  const int xid = x.id, oid = tape->next_id();
  return tape->record(std::move(y), detail::ng(x), [=, map = std::move(map)]() {
    const auto& go = tape->grad(oid);
    auto& g = tape->grad(xid);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[map[i]] * scale_by;
  });
}

// Full reduction to a shape-[1] scalar.
template <class T>
Var<T> sum_all(Var<T> x) {
  Tape<T>* tape = x.tape;
  const auto& xv = x.value();
  T acc = 0;
  for (T v : xv.values) acc += v;
  const int xid = x.id, oid = tape->next_id();
  return tape->record(Tensor<T>(Shape{1}, std::vector<T>{acc}), detail::ng(x), [=]() {
    const T g0 = tape->grad(oid)[0];
    auto& g = tape->grad(xid);
    for (auto& v : g) v += g0;
  });
}

template <class T>
Var<T> mean_all(Var<T> x) {
  if (x.value().size() == 0) throw DegenerateShapeError("mean_all: empty tensor");
  return scale(sum_all(x), T(1) / static_cast<T>(x.value().size()));
}

// Numerically stable log-softmax along an axis. Entries with mask[j] == 0 (mask
// indexed along the axis) get -inf and receive no gradient.
template <class T>
Var<T> log_softmax(Var<T> x, int axis, const std::vector<std::uint8_t>& mask = {}) {
  Tape<T>* tape = x.tape;
  const Shape s = x.shape();
  const int rank = static_cast<int>(s.size());
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw DimensionError("log_softmax: axis out of range");
  const int L = s[static_cast<std::size_t>(axis)];
  if (L == 0) throw DegenerateShapeError("log_softmax: empty axis");
  if (!mask.empty() && static_cast<int>(mask.size()) != L) throw DimensionError("log_softmax: mask length mismatch");
  std::size_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= static_cast<std::size_t>(s[static_cast<std::size_t>(d)]);
  for (int d = axis + 1; d < rank; ++d) inner *= static_cast<std::size_t>(s[static_cast<std::size_t>(d)]);
  auto on = [&](int j) { return mask.empty() || mask[static_cast<std::size_t>(j)] != 0; };
  bool any_on = false;
  for (int j = 0; j < L; ++j) any_on = any_on || on(j);
  if (!any_on) throw ContractError("log_softmax: mask excludes every entry");

  Tensor<T> y(s);
  const auto& xv = x.value();
  const T neg_inf = -std::numeric_limits<T>::infinity();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * L * inner + in;
      T mx = neg_inf;
      for (int j = 0; j < L; ++j)
        if (on(j)) mx = std::max(mx, xv[base + static_cast<std::size_t>(j) * inner]);
      T se = 0;
      for (int j = 0; j < L; ++j)
        if (on(j)) se += std::exp(xv[base + static_cast<std::size_t>(j) * inner] - mx);
      const T lse = mx + std::log(se);
      for (int j = 0; j < L; ++j) {
        const std::size_t k = base + static_cast<std::size_t>(j) * inner;
        y[k] = on(j) ? xv[k] - lse : neg_inf;
      }
    }
  const int xid = x.id, oid = tape->next_id();
  return tape->record(std::move(y), detail::ng(x), [=]() {
    auto on = [&](int j) { return mask.empty() || mask[static_cast<std::size_t>(j)] != 0; };
    const auto& go = tape->grad(oid);
    const auto& yv = tape->value(oid);
    auto& g = tape->grad(xid);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * L * inner + in;
        T gs = 0;
        for (int j = 0; j < L; ++j)
          if (on(j)) gs += go[base + static_cast<std::size_t>(j) * inner];
        for (int j = 0; j < L; ++j) {
          if (!on(j)) continue;
          const std::size_t k = base + static_cast<std::size_t>(j) * inner;
          g[k] += go[k] - std::exp(yv[k]) * gs;
        }
      }
  });
}

// -mean over non-ignored pixels of logp[n, label, h, w]; logp is [N,K,H,W] and
// labels hold N*H*W entries. With no valid pixel the loss is 0 with zero grads.
template <class T>
Var<T> nll_loss(Var<T> logp, const std::vector<int>& labels, int ignore_index) {
  Tape<T>* tape = logp.tape;
  const Shape s = logp.shape();
  detail::require_rank(s, 4, "nll_loss");
  const int N = s[0], K = s[1];
  const std::size_t HW = static_cast<std::size_t>(s[2]) * s[3];
  if (labels.size() != static_cast<std::size_t>(N) * HW)
    throw DimensionError("nll_loss: label count " + std::to_string(labels.size()) + " does not match " + to_string(s));
  std::size_t valid = 0;
  T acc = 0;
  const auto& lv = logp.value();
  for (int n = 0; n < N; ++n)
    for (std::size_t i = 0; i < HW; ++i) {
      const int lab = labels[static_cast<std::size_t>(n) * HW + i];
      if (lab == ignore_index) continue;
      if (lab < 0 || lab >= K) throw DataError("label " + std::to_string(lab) + " outside [0, " + std::to_string(K) + ")");
      acc += lv[(static_cast<std::size_t>(n) * K + lab) * HW + i];
      ++valid;
    }
  const T loss = valid ? -acc / static_cast<T>(valid) : T(0);
  const int lid = logp.id, oid = tape->next_id();
  return tape->record(Tensor<T>(Shape{1}, std::vector<T>{loss}), detail::ng(logp) && valid > 0, [=]() {
    const T g0 = tape->grad(oid)[0] / static_cast<T>(valid);
    auto& g = tape->grad(lid);
    for (int n = 0; n < N; ++n)
      for (std::size_t i = 0; i < HW; ++i) {
        const int lab = labels[static_cast<std::size_t>(n) * HW + i];
        if (lab == ignore_index) continue;
        g[(static_cast<std::size_t>(n) * K + lab) * HW + i] -= g0;
      }
  });
}

// Per-pixel L2 normalisation over channels of [N,C,H,W]:
// y = x / sqrt(sum_c x^2 + eps).
template <class T>
Var<T> l2_normalize_channels(Var<T> x, T eps = T(1e-12)) {
  Tape<T>* tape = x.tape;
  const Shape s = x.shape();
  detail::require_rank(s, 4, "l2_normalize_channels");
  const int N = s[0], C = s[1];
  const std::size_t HW = static_cast<std::size_t>(s[2]) * s[3];
  const auto& xv = x.value();
  Tensor<T> y(s);
  std::vector<T> inv_norm(static_cast<std::size_t>(N) * HW);
  for (int n = 0; n < N; ++n)
    for (std::size_t i = 0; i < HW; ++i) {
      T ss = eps;
      for (int c = 0; c < C; ++c) {
        const T v = xv[(static_cast<std::size_t>(n) * C + c) * HW + i];
        ss += v * v;
      }
      const T inv = T(1) / std::sqrt(ss);
      inv_norm[static_cast<std::size_t>(n) * HW + i] = inv;
      for (int c = 0; c < C; ++c) {
        const std::size_t k = (static_cast<std::size_t>(n) * C + c) * HW + i;
        y[k] = xv[k] * inv;
      }
    }
  const int xid = x.id, oid = tape->next_id();
  return tape->record(std::move(y), detail::ng(x), [=, inv_norm = std::move(inv_norm)]() {
    const auto& go = tape->grad(oid);
    const auto& yv = tape->value(oid);
    auto& g = tape->grad(xid);
    for (int n = 0; n < N; ++n)
      for (std::size_t i = 0; i < HW; ++i) {
        T dot = 0;
        for (int c = 0; c < C; ++c) {
          const std::size_t k = (static_cast<std::size_t>(n) * C + c) * HW + i;
          dot += go[k] * yv[k];
        }
        const T inv = inv_norm[static_cast<std::size_t>(n) * HW + i];
        for (int c = 0; c < C; ++c) {
          const std::size_t k = (static_cast<std::size_t>(n) * C + c) * HW + i;
          g[k] += (go[k] - yv[k] * dot) * inv;
        }
      }
  });
}

// ---------------------------------------------------------------------------
// Dense algebra (controller)

// y[B,N] = x[B,K] * w[K,N] + b[N]; b may be an invalid Var.
template <class T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> b) {
  Tape<T>* tape = detail::same_tape<T>({&x, &w, &b});
  const Shape xs = x.shape(), ws = w.shape();
  detail::require_rank(xs, 2, "linear input");
  detail::require_rank(ws, 2, "linear weight");
  const int B = xs[0], K = xs[1], N = ws[1];
  if (ws[0] != K) throw DimensionError("linear: " + to_string(xs) + " x " + to_string(ws));
  if (b.valid() && b.shape() != Shape{N}) throw DimensionError("linear: bias shape " + to_string(b.shape()));
  Tensor<T> y(Shape{B, N});
  const auto& xv = x.value();
  const auto& wv = w.value();
  for (int r = 0; r < B; ++r) {
    T* yr = y.data() + static_cast<std::size_t>(r) * N;
    if (b.valid()) std::copy_n(b.value().data(), N, yr);
    for (int kk = 0; kk < K; ++kk) {
      const T xv_rk = xv[static_cast<std::size_t>(r) * K + kk];
      const T* wr = wv.data() + static_cast<std::size_t>(kk) * N;
      for (int c = 0; c < N; ++c) yr[c] += xv_rk * wr[c];
    }
  }
  const bool nx = detail::ng(x), nw = detail::ng(w), nb = detail::ng(b);
  const int xid = x.id, wid = w.id, bid = b.valid() ? b.id : -1, oid = tape->next_id();
  return tape->record(std::move(y), nx || nw || nb, [=]() {
    const auto& go = tape->grad(oid);
    const auto& xv = tape->value(xid);
    const auto& wv = tape->value(wid);
    for (int r = 0; r < B; ++r) {
      const T* gr = go.data() + static_cast<std::size_t>(r) * N;
      if (nb) {
        auto& gb = tape->grad(bid);
        for (int c = 0; c < N; ++c) gb[static_cast<std::size_t>(c)] += gr[c];
      }
      for (int kk = 0; kk < K; ++kk) {
        if (nx) {
          const T* wr = wv.data() + static_cast<std::size_t>(kk) * N;
          T acc = 0;
          for (int c = 0; c < N; ++c) acc += gr[c] * wr[c];
          tape->grad(xid)[static_cast<std::size_t>(r) * K + kk] += acc;
        }
        if (nw) {
          const T xrk = xv[static_cast<std::size_t>(r) * K + kk];
          T* gw = tape->grad(wid).data() + static_cast<std::size_t>(kk) * N;
          for (int c = 0; c < N; ++c) gw[c] += xrk * gr[c];
        }
      }
    }
  });
}

// Rows of table [V,D] selected by idx -> [B,D].
template <class T>
Var<T> gather_rows(Var<T> table, const std::vector<int>& idx) {
  Tape<T>* tape = table.tape;
  const Shape s = table.shape();
  detail::require_rank(s, 2, "gather_rows");
  const int V = s[0], D = s[1], B = static_cast<int>(idx.size());
  Tensor<T> y(Shape{B, D});
  for (int r = 0; r < B; ++r) {
    if (idx[static_cast<std::size_t>(r)] < 0 || idx[static_cast<std::size_t>(r)] >= V)
      throw DimensionError("gather_rows: index out of range");
    std::copy_n(table.value().data() + static_cast<std::size_t>(idx[static_cast<std::size_t>(r)]) * D, D,
                y.data() + static_cast<std::size_t>(r) * D);
  }
  const int tid = table.id, oid = tape->next_id();
  return tape->record(std::move(y), detail::ng(table), [=]() {
    const auto& go = tape->grad(oid);
    auto& g = tape->grad(tid);
    for (int r = 0; r < B; ++r)
      for (int c = 0; c < D; ++c)
        g[static_cast<std::size_t>(idx[static_cast<std::size_t>(r)]) * D + c] += go[static_cast<std::size_t>(r) * D + c];
  });
}

// x[B,V] -> [B,1] holding x[r, idx[r]].
template <class T>
Var<T> pick(Var<T> x, const std::vector<int>& idx) {
  Tape<T>* tape = x.tape;
  const Shape s = x.shape();
  detail::require_rank(s, 2, "pick");
  const int B = s[0], V = s[1];
  if (static_cast<int>(idx.size()) != B) throw DimensionError("pick: index count mismatch");
  Tensor<T> y(Shape{B, 1});
  for (int r = 0; r < B; ++r) {
    const int j = idx[static_cast<std::size_t>(r)];
    if (j < 0 || j >= V) throw DimensionError("pick: index out of range");
    y[static_cast<std::size_t>(r)] = x.value()[static_cast<std::size_t>(r) * V + j];
  }
  const int xid = x.id, oid = tape->next_id();
  return tape->record(std::move(y), detail::ng(x), [=]() {
    const auto& go = tape->grad(oid);
    auto& g = tape->grad(xid);
    for (int r = 0; r < B; ++r) g[static_cast<std::size_t>(r) * V + idx[static_cast<std::size_t>(r)]] += go[static_cast<std::size_t>(r)];
  });
}

// Row entropies of a log-probability matrix [B,V] -> [B,1]; -inf entries are
// masked tokens and contribute nothing.
template <class T>
Var<T> entropy_rows(Var<T> logp) {
  Tape<T>* tape = logp.tape;
  const Shape s = logp.shape();
  detail::require_rank(s, 2, "entropy_rows");
  const int B = s[0], V = s[1];
  Tensor<T> y(Shape{B, 1});
  const auto& lv = logp.value();
  for (int r = 0; r < B; ++r) {
    T h = 0;
    for (int j = 0; j < V; ++j) {
      const T l = lv[static_cast<std::size_t>(r) * V + j];
      if (std::isfinite(l)) h -= std::exp(l) * l;
    }
    y[static_cast<std::size_t>(r)] = h;
  }
  const int lid = logp.id, oid = tape->next_id();
  return tape->record(std::move(y), detail::ng(logp), [=]() {
    const auto& go = tape->grad(oid);
    const auto& lv = tape->value(lid);
    auto& g = tape->grad(lid);
    for (int r = 0; r < B; ++r)
      for (int j = 0; j < V; ++j) {
        const std::size_t k = static_cast<std::size_t>(r) * V + j;
        if (std::isfinite(lv[k])) g[k] -= go[static_cast<std::size_t>(r)] * std::exp(lv[k]) * (lv[k] + T(1));
      }
  });
}

}  // namespace auxnas::ops
