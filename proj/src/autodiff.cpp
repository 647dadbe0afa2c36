#include "rescaps/autodiff.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>

namespace rescaps {

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t k = 0; k < r; ++k) {
    const Index da = k < r - a.size() ? 1 : a[k - (r - a.size())];
    const Index db = k < r - b.size() ? 1 : b[k - (r - b.size())];
    if (da != db && da != 1 && db != 1)
      throw DimensionError("cannot broadcast " + to_string(a) + " with " + to_string(b));
    out[k] = da == 1 ? db : da;
  }
  return out;
}

namespace {

template <typename S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using MapRowMat = Eigen::Map<RowMat<S>>;
template <typename S>
using CMapRowMat = Eigen::Map<const RowMat<S>>;

/// Strides of `in` viewed inside the broadcast shape `out` (0 on broadcast axes).
std::vector<Index> aligned_strides(const Shape& in, const Shape& out) {
  std::vector<Index> s(out.size(), 0);
  const auto own = strides_of(in);
  const std::size_t off = out.size() - in.size();
  for (std::size_t k = 0; k < in.size(); ++k) s[k + off] = in[k] == 1 ? 0 : own[k];
  return s;
}

/// Calls f(out_offset, a_offset, b_offset) for every element of `out`.
template <typename F>
void for_each_broadcast(const Shape& out, const std::vector<Index>& sa,
                        const std::vector<Index>& sb, F&& f) {
  const int r = static_cast<int>(out.size());
  const Index total = numel(out);
  if (total == 0) return;
  if (r == 0) {
    f(Index{0}, Index{0}, Index{0});
    return;
  }
  const Index inner = out[r - 1];
  const Index ia_step = sa[r - 1];
  const Index ib_step = sb[r - 1];
  std::vector<Index> idx(r, 0);
  Index ia = 0, ib = 0;
  for (Index o = 0; o < total; o += inner) {
    for (Index j = 0; j < inner; ++j) f(o + j, ia + j * ia_step, ib + j * ib_step);
    for (int k = r - 2; k >= 0; --k) {
      ++idx[k];
      ia += sa[k];
      ib += sb[k];
      if (idx[k] < out[k]) break;
      ia -= sa[k] * out[k];
      ib -= sb[k] * out[k];
      idx[k] = 0;
    }
  }
}

/// Elementwise binary op with broadcasting. `da`/`db` give d out / d input
/// as functions of (a, b, out).
template <typename S, typename Fwd, typename Da, typename Db>
Var<S> binary(const char* name, const Var<S>& a, const Var<S>& b, Fwd fwd, Da da, Db db) {
  Tape<S>& tape = a.tape();
  if (&b.tape() != &tape) throw UsageError(std::string(name) + ": operands on different tapes");
  const Tensor<S>& av = a.value();
  const Tensor<S>& bv = b.value();
  const Shape out_shape = broadcast_shape(av.shape(), bv.shape());
  const auto sa = aligned_strides(av.shape(), out_shape);
  const auto sb = aligned_strides(bv.shape(), out_shape);
  Tensor<S> out(out_shape);
  {
    const S* pa = av.data();
    const S* pb = bv.data();
    S* po = out.data();
    if (av.shape() == bv.shape()) {
      for (Index k = 0; k < out.size(); ++k) po[k] = fwd(pa[k], pb[k]);
    } else {
      for_each_broadcast(out_shape, sa, sb,
                         [&](Index o, Index i, Index j) { po[o] = fwd(pa[i], pb[j]); });
    }
  }
  const std::size_t ia = a.id(), ib = b.id();
  return tape.record(name, std::move(out), {ia, ib},
                     [ia, ib, out_shape, sa, sb, da, db](Tape<S>& t, std::size_t self) {
                       const S* pa = t.value(ia).data();
                       const S* pb = t.value(ib).data();
                       const S* po = t.value(self).data();
                       const S* g = t.upstream(self).data();
                       Tensor<S>* ga = t.grad_buffer(ia);
                       Tensor<S>* gb = t.grad_buffer(ib);
                       S* pga = ga ? ga->data() : nullptr;
                       S* pgb = gb ? gb->data() : nullptr;
                       for_each_broadcast(out_shape, sa, sb, [&](Index o, Index i, Index j) {
                         if (pga) pga[i] += g[o] * da(pa[i], pb[j], po[o]);
                         if (pgb) pgb[j] += g[o] * db(pa[i], pb[j], po[o]);
                       });
                     });
}

/// Elementwise unary op; `d` gives d out / d x as a function of (x, out).
template <typename S, typename Fwd, typename D>
Var<S> unary(const char* name, const Var<S>& a, Fwd fwd, D d) {
  Tape<S>& tape = a.tape();
  const Tensor<S>& av = a.value();
  Tensor<S> out(av.shape());
  for (Index k = 0; k < av.size(); ++k) out[k] = fwd(av[k]);
  const std::size_t ia = a.id();
  return tape.record(name, std::move(out), {ia}, [ia, d](Tape<S>& t, std::size_t self) {
    Tensor<S>* ga = t.grad_buffer(ia);
    if (!ga) return;
    const Tensor<S>& x = t.value(ia);
    const Tensor<S>& y = t.value(self);
    const Tensor<S>& g = t.upstream(self);
    for (Index k = 0; k < x.size(); ++k) (*ga)[k] += g[k] * d(x[k], y[k]);
  });
}

/// Views `shape` as (outer, n, inner) around `axis`.
struct AxisView {
  Index outer = 1, n = 1, inner = 1;
};

AxisView axis_view(const Shape& shape, int axis) {
  AxisView v;
  for (int k = 0; k < axis; ++k) v.outer *= shape[k];
  v.n = shape[axis];
  for (std::size_t k = axis + 1; k < shape.size(); ++k) v.inner *= shape[k];
  return v;
}

Shape reduced_shape(const Shape& shape, int axis, bool keepdim) {
  Shape out = shape;
  if (keepdim)
    out[axis] = 1;
  else
    out.erase(out.begin() + axis);
  return out;
}

}  // namespace

template <typename S>
Var<S> add(const Var<S>& a, const Var<S>& b) {
  return binary<S>(
      "add", a, b, [](S x, S y) { return x + y; }, [](S, S, S) { return S(1); },
      [](S, S, S) { return S(1); });
}

template <typename S>
Var<S> sub(const Var<S>& a, const Var<S>& b) {
  return binary<S>(
      "sub", a, b, [](S x, S y) { return x - y; }, [](S, S, S) { return S(1); },
      [](S, S, S) { return S(-1); });
}

template <typename S>
Var<S> mul(const Var<S>& a, const Var<S>& b) {
  return binary<S>(
      "mul", a, b, [](S x, S y) { return x * y; }, [](S, S y, S) { return y; },
      [](S x, S, S) { return x; });
}

template <typename S>
Var<S> div(const Var<S>& a, const Var<S>& b) {
  return binary<S>(
      "div", a, b, [](S x, S y) { return x / y; }, [](S, S y, S) { return S(1) / y; },
      [](S, S y, S o) { return -o / y; });
}

template <typename S>
Var<S> minimum(const Var<S>& a, const Var<S>& b) {
  return binary<S>(
      "minimum", a, b, [](S x, S y) { return x <= y ? x : y; },
      [](S x, S y, S) { return x <= y ? S(1) : S(0); },
      [](S x, S y, S) { return x <= y ? S(0) : S(1); });
}

template <typename S>
Var<S> add_scalar(const Var<S>& a, S c) {
  return unary<S>(
      "add_scalar", a, [c](S x) { return x + c; }, [](S, S) { return S(1); });
}

template <typename S>
Var<S> mul_scalar(const Var<S>& a, S c) {
  return unary<S>(
      "mul_scalar", a, [c](S x) { return x * c; }, [c](S, S) { return c; });
}

template <typename S>
Var<S> neg(const Var<S>& a) {
  return mul_scalar(a, S(-1));
}

template <typename S>
Var<S> relu(const Var<S>& a) {
  return unary<S>(
      "relu", a, [](S x) { return x > S(0) ? x : S(0); },
      [](S x, S) { return x > S(0) ? S(1) : S(0); });
}

template <typename S>
Var<S> sigmoid(const Var<S>& a) {
  return unary<S>(
      "sigmoid", a,
      [](S x) {
        if (x >= S(0)) return S(1) / (S(1) + std::exp(-x));
        const S e = std::exp(x);
        return e / (S(1) + e);
      },
      [](S, S y) { return y * (S(1) - y); });
}

template <typename S>
Var<S> log_sigmoid(const Var<S>& a) {
  // log(sigmoid(x)) = min(x, 0) - log1p(exp(-|x|))
  return unary<S>(
      "log_sigmoid", a,
      [](S x) { return std::min(x, S(0)) - std::log1p(std::exp(-std::abs(x))); },
      [](S x, S) {
        // d/dx = 1 - sigmoid(x) = sigmoid(-x)
        if (x >= S(0)) {
          const S e = std::exp(-x);
          return e / (S(1) + e);
        }
        return S(1) / (S(1) + std::exp(x));
      });
}

template <typename S>
Var<S> exp(const Var<S>& a) {
  return unary<S>(
      "exp", a, [](S x) { return std::exp(x); }, [](S, S y) { return y; });
}

template <typename S>
Var<S> log(const Var<S>& a) {
  return unary<S>(
      "log", a, [](S x) { return std::log(x); }, [](S x, S) { return S(1) / x; });
}

template <typename S>
Var<S> sqrt(const Var<S>& a) {
  return unary<S>(
      "sqrt", a, [](S x) { return std::sqrt(x); }, [](S, S y) { return S(0.5) / y; });
}

template <typename S>
Var<S> square(const Var<S>& a) {
  return unary<S>(
      "square", a, [](S x) { return x * x; }, [](S x, S) { return S(2) * x; });
}

template <typename S>
Var<S> sum(const Var<S>& a, int axis, bool keepdim) {
  const Tensor<S>& av = a.value();
  const int ax = resolve_axis(axis, av.rank());
  const AxisView v = axis_view(av.shape(), ax);
  Tensor<S> out(reduced_shape(av.shape(), ax, keepdim));
  const S* pa = av.data();
  S* po = out.data();
  for (Index o = 0; o < v.outer; ++o)
    for (Index k = 0; k < v.n; ++k) {
      const S* row = pa + (o * v.n + k) * v.inner;
      S* dst = po + o * v.inner;
      for (Index i = 0; i < v.inner; ++i) dst[i] += row[i];
    }
  const std::size_t ia = a.id();
  return a.tape().record("sum", std::move(out), {ia}, [ia, v](Tape<S>& t, std::size_t self) {
    Tensor<S>* ga = t.grad_buffer(ia);
    if (!ga) return;
    const S* g = t.upstream(self).data();
    S* pg = ga->data();
    for (Index o = 0; o < v.outer; ++o)
      for (Index k = 0; k < v.n; ++k) {
        S* dst = pg + (o * v.n + k) * v.inner;
        const S* src = g + o * v.inner;
        for (Index i = 0; i < v.inner; ++i) dst[i] += src[i];
      }
  });
}

template <typename S>
Var<S> mean(const Var<S>& a, int axis, bool keepdim) {
  const int ax = resolve_axis(axis, a.rank());
  const Index n = a.shape()[ax];
  if (n == 0) throw DimensionError("mean over empty axis");
  return mul_scalar(sum(a, ax, keepdim), S(1) / static_cast<S>(n));
}

template <typename S>
Var<S> sum_all(const Var<S>& a) {
  Tensor<S> out = Tensor<S>::scalar(a.value().array().sum());
  const std::size_t ia = a.id();
  return a.tape().record("sum_all", std::move(out), {ia}, [ia](Tape<S>& t, std::size_t self) {
    if (Tensor<S>* ga = t.grad_buffer(ia)) ga->array() += t.upstream(self)[0];
  });
}

template <typename S>
Var<S> mean_all(const Var<S>& a) {
  const Index n = a.value().size();
  if (n == 0) throw DimensionError("mean_all of empty tensor");
  return mul_scalar(sum_all(a), S(1) / static_cast<S>(n));
}

template <typename S>
Var<S> reshape(const Var<S>& a, Shape shape) {
  Tensor<S> out = a.value().reshaped(std::move(shape));
  const std::size_t ia = a.id();
  return a.tape().record("reshape", std::move(out), {ia}, [ia](Tape<S>& t, std::size_t self) {
    if (Tensor<S>* ga = t.grad_buffer(ia)) ga->array() += t.upstream(self).array();
  });
}

template <typename S>
Var<S> broadcast_to(const Var<S>& a, Shape shape) {
  const Shape& in = a.shape();
  if (broadcast_shape(in, shape) != shape)
    throw DimensionError("cannot broadcast " + to_string(in) + " to " + to_string(shape));
  const auto sa = aligned_strides(in, shape);
  const std::vector<Index> zero(shape.size(), 0);
  Tensor<S> out(shape);
  const S* pa = a.value().data();
  S* po = out.data();
  for_each_broadcast(shape, sa, zero, [&](Index o, Index i, Index) { po[o] = pa[i]; });
  const std::size_t ia = a.id();
  return a.tape().record("broadcast_to", std::move(out), {ia},
                         [ia, shape, sa, zero](Tape<S>& t, std::size_t self) {
                           Tensor<S>* ga = t.grad_buffer(ia);
                           if (!ga) return;
                           const S* g = t.upstream(self).data();
                           S* pg = ga->data();
                           for_each_broadcast(shape, sa, zero,
                                              [&](Index o, Index i, Index) { pg[i] += g[o]; });
                         });
}

template <typename S>
Var<S> slice(const Var<S>& a, int axis, Index start, Index length) {
  const Tensor<S>& av = a.value();
  const int ax = resolve_axis(axis, av.rank());
  const AxisView v = axis_view(av.shape(), ax);
  if (start < 0 || length < 0 || start + length > v.n)
    throw DimensionError("slice [" + std::to_string(start) + ", " +
                         std::to_string(start + length) + ") out of range for extent " +
                         std::to_string(v.n));
  Shape shape = av.shape();
  shape[ax] = length;
  Tensor<S> out(shape);
  for (Index o = 0; o < v.outer; ++o)
    std::copy_n(av.data() + (o * v.n + start) * v.inner, length * v.inner,
                out.data() + o * length * v.inner);
  const std::size_t ia = a.id();
  return a.tape().record(
      "slice", std::move(out), {ia}, [ia, v, start, length](Tape<S>& t, std::size_t self) {
        Tensor<S>* ga = t.grad_buffer(ia);
        if (!ga) return;
        const S* g = t.upstream(self).data();
        for (Index o = 0; o < v.outer; ++o) {
          S* dst = ga->data() + (o * v.n + start) * v.inner;
          const S* src = g + o * length * v.inner;
          for (Index k = 0; k < length * v.inner; ++k) dst[k] += src[k];
        }
      });
}

template <typename S>
Var<S> softmax(const Var<S>& a, int axis) {
  const Tensor<S>& av = a.value();
  const int ax = resolve_axis(axis, av.rank());
  const AxisView v = axis_view(av.shape(), ax);
  Tensor<S> out(av.shape());
  const S* pa = av.data();
  S* po = out.data();
  for (Index o = 0; o < v.outer; ++o)
    for (Index i = 0; i < v.inner; ++i) {
      const Index base = o * v.n * v.inner + i;
      S m = -std::numeric_limits<S>::infinity();
      for (Index k = 0; k < v.n; ++k) m = std::max(m, pa[base + k * v.inner]);
      S z = 0;
      for (Index k = 0; k < v.n; ++k) {
        const S e = std::exp(pa[base + k * v.inner] - m);
        po[base + k * v.inner] = e;
        z += e;
      }
      for (Index k = 0; k < v.n; ++k) po[base + k * v.inner] /= z;
    }
  const std::size_t ia = a.id();
  return a.tape().record("softmax", std::move(out), {ia}, [ia, v](Tape<S>& t, std::size_t self) {
    Tensor<S>* ga = t.grad_buffer(ia);
    if (!ga) return;
    const S* y = t.value(self).data();
    const S* g = t.upstream(self).data();
    S* pg = ga->data();
    for (Index o = 0; o < v.outer; ++o)
      for (Index i = 0; i < v.inner; ++i) {
        const Index base = o * v.n * v.inner + i;
        S dot = 0;
        for (Index k = 0; k < v.n; ++k) dot += g[base + k * v.inner] * y[base + k * v.inner];
        for (Index k = 0; k < v.n; ++k) {
          const Index p = base + k * v.inner;
          pg[p] += y[p] * (g[p] - dot);
        }
      }
  });
}

template <typename S>
Var<S> norm(const Var<S>& a, int axis, S eps) {
  const Tensor<S>& av = a.value();
  const int ax = resolve_axis(axis, av.rank());
  const AxisView v = axis_view(av.shape(), ax);
  Tensor<S> out(reduced_shape(av.shape(), ax, true));
  const S* pa = av.data();
  for (Index o = 0; o < v.outer; ++o)
    for (Index i = 0; i < v.inner; ++i) {
      S q = 0;
      for (Index k = 0; k < v.n; ++k) {
        const S x = pa[(o * v.n + k) * v.inner + i];
        q += x * x;
      }
      out[o * v.inner + i] = std::sqrt(q + eps);
    }
  const std::size_t ia = a.id();
  return a.tape().record("norm", std::move(out), {ia}, [ia, v](Tape<S>& t, std::size_t self) {
    Tensor<S>* ga = t.grad_buffer(ia);
    if (!ga) return;
    const S* x = t.value(ia).data();
    const S* y = t.value(self).data();
    const S* g = t.upstream(self).data();
    S* pg = ga->data();
    for (Index o = 0; o < v.outer; ++o)
      for (Index i = 0; i < v.inner; ++i) {
        const S scale = g[o * v.inner + i] / y[o * v.inner + i];
        for (Index k = 0; k < v.n; ++k) {
          const Index p = (o * v.n + k) * v.inner + i;
          pg[p] += scale * x[p];
        }
      }
  });
}

template <typename S>
Var<S> squash(const Var<S>& a, int axis, S eps) {
  const Tensor<S>& av = a.value();
  const int ax = resolve_axis(axis, av.rank());
  const AxisView v = axis_view(av.shape(), ax);
  Tensor<S> out(av.shape());
  const S* pa = av.data();
  S* po = out.data();
  for (Index o = 0; o < v.outer; ++o)
    for (Index i = 0; i < v.inner; ++i) {
      const Index base = o * v.n * v.inner + i;
      S q = 0;
      for (Index k = 0; k < v.n; ++k) q += pa[base + k * v.inner] * pa[base + k * v.inner];
      const S scale = std::sqrt(q + eps) / (S(1) + q);
      for (Index k = 0; k < v.n; ++k) po[base + k * v.inner] = scale * pa[base + k * v.inner];
    }
  const std::size_t ia = a.id();
  return a.tape().record(
      "squash", std::move(out), {ia}, [ia, v, eps](Tape<S>& t, std::size_t self) {
        Tensor<S>* ga = t.grad_buffer(ia);
        if (!ga) return;
        const S* x = t.value(ia).data();
        const S* g = t.upstream(self).data();
        S* pg = ga->data();
        for (Index o = 0; o < v.outer; ++o)
          for (Index i = 0; i < v.inner; ++i) {
            const Index base = o * v.n * v.inner + i;
            S q = 0, gx = 0;
            for (Index k = 0; k < v.n; ++k) {
              const S xk = x[base + k * v.inner];
              q += xk * xk;
              gx += g[base + k * v.inner] * xk;
            }
            // out = x * f(q), f = sqrt(q+eps)/(1+q)
            const S r = std::sqrt(q + eps);
            const S f = r / (S(1) + q);
            const S df = (S(0.5) / r * (S(1) + q) - r) / ((S(1) + q) * (S(1) + q));
            for (Index k = 0; k < v.n; ++k) {
              const Index p = base + k * v.inner;
              pg[p] += f * g[p] + S(2) * x[p] * df * gx;
            }
          }
      });
}

template <typename S>
Var<S> matmul(const Var<S>& a, const Var<S>& b) {
  const Tensor<S>& av = a.value();
  const Tensor<S>& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0))
    throw DimensionError("matmul " + to_string(av.shape()) + " x " + to_string(bv.shape()));
  const Index m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Tensor<S> out({m, n});
  MapRowMat<S>(out.data(), m, n).noalias() =
      CMapRowMat<S>(av.data(), m, k) * CMapRowMat<S>(bv.data(), k, n);
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(
      "matmul", std::move(out), {ia, ib}, [ia, ib, m, k, n](Tape<S>& t, std::size_t self) {
        CMapRowMat<S> g(t.upstream(self).data(), m, n);
        if (Tensor<S>* ga = t.grad_buffer(ia))
          MapRowMat<S>(ga->data(), m, k).noalias() +=
              g * CMapRowMat<S>(t.value(ib).data(), k, n).transpose();
        if (Tensor<S>* gb = t.grad_buffer(ib))
          MapRowMat<S>(gb->data(), k, n).noalias() +=
              CMapRowMat<S>(t.value(ia).data(), m, k).transpose() * g;
      });
}

namespace {

struct ConvGeometry {
  Index batch, height, width, cin, k, cout, stride, out_h, out_w;
  Index rows() const { return batch * out_h * out_w; }
  Index patch() const { return k * k * cin; }
};

template <typename S>
void im2col(const S* x, const ConvGeometry& c, S* cols) {
  const Index run = c.k * c.cin;
  for (Index b = 0; b < c.batch; ++b)
    for (Index oy = 0; oy < c.out_h; ++oy)
      for (Index ox = 0; ox < c.out_w; ++ox) {
        S* dst = cols + ((b * c.out_h + oy) * c.out_w + ox) * c.patch();
        for (Index ky = 0; ky < c.k; ++ky) {
          const S* src =
              x + ((b * c.height + oy * c.stride + ky) * c.width + ox * c.stride) * c.cin;
          std::copy_n(src, run, dst + ky * run);
        }
      }
}

template <typename S>
void col2im_add(const S* cols, const ConvGeometry& c, S* dx) {
  const Index run = c.k * c.cin;
  for (Index b = 0; b < c.batch; ++b)
    for (Index oy = 0; oy < c.out_h; ++oy)
      for (Index ox = 0; ox < c.out_w; ++ox) {
        const S* src = cols + ((b * c.out_h + oy) * c.out_w + ox) * c.patch();
        for (Index ky = 0; ky < c.k; ++ky) {
          S* dst = dx + ((b * c.height + oy * c.stride + ky) * c.width + ox * c.stride) * c.cin;
          const S* s = src + ky * run;
          for (Index q = 0; q < run; ++q) dst[q] += s[q];
        }
      }
}

}  // namespace

template <typename S>
Var<S> conv2d(const Var<S>& input, const Var<S>& kernel, const Var<S>& bias, Index stride) {
  const Tensor<S>& x = input.value();
  const Tensor<S>& w = kernel.value();
  if (stride < 1) throw UsageError("conv2d stride must be positive");
  if (x.rank() != 4 || w.rank() != 4 || w.dim(0) != w.dim(1) || w.dim(2) != x.dim(3))
    throw DimensionError("conv2d input " + to_string(x.shape()) + " kernel " +
                         to_string(w.shape()));
  if (bias.value().rank() != 1 || bias.value().dim(0) != w.dim(3))
    throw DimensionError("conv2d bias " + to_string(bias.shape()) + " for " +
                         std::to_string(w.dim(3)) + " output channels");
  ConvGeometry c{x.dim(0), x.dim(1), x.dim(2), x.dim(3), w.dim(0), w.dim(3), stride, 0, 0};
  if (c.k > c.height || c.k > c.width)
    throw DimensionError("conv2d kernel " + std::to_string(c.k) + " larger than input " +
                         std::to_string(c.height) + "x" + std::to_string(c.width));
  c.out_h = (c.height - c.k) / stride + 1;
  c.out_w = (c.width - c.k) / stride + 1;

  std::vector<S> cols(static_cast<std::size_t>(c.rows() * c.patch()));
  im2col(x.data(), c, cols.data());
  Tensor<S> out({c.batch, c.out_h, c.out_w, c.cout});
  MapRowMat<S> y(out.data(), c.rows(), c.cout);
  y.noalias() = CMapRowMat<S>(cols.data(), c.rows(), c.patch()) *
                CMapRowMat<S>(w.data(), c.patch(), c.cout);
  y.rowwise() += Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>>(bias.value().data(), c.cout);
  cols = {};

  const std::size_t ix = input.id(), iw = kernel.id(), ib = bias.id();
  return input.tape().record(
      "conv2d", std::move(out), {ix, iw, ib}, [ix, iw, ib, c](Tape<S>& t, std::size_t self) {
        CMapRowMat<S> g(t.upstream(self).data(), c.rows(), c.cout);
        if (Tensor<S>* gbias = t.grad_buffer(ib))
          Eigen::Map<Eigen::Matrix<S, 1, Eigen::Dynamic>>(gbias->data(), c.cout) +=
              g.colwise().sum();
        Tensor<S>* gw = t.grad_buffer(iw);
        Tensor<S>* gx = t.grad_buffer(ix);
        if (!gw && !gx) return;
        std::vector<S> cols(static_cast<std::size_t>(c.rows() * c.patch()));
        if (gw) {
          im2col(t.value(ix).data(), c, cols.data());
          MapRowMat<S>(gw->data(), c.patch(), c.cout).noalias() +=
              CMapRowMat<S>(cols.data(), c.rows(), c.patch()).transpose() * g;
        }
        if (gx) {
          MapRowMat<S> dcols(cols.data(), c.rows(), c.patch());
          dcols.noalias() = g * CMapRowMat<S>(t.value(iw).data(), c.patch(), c.cout).transpose();
          col2im_add(cols.data(), c, gx->data());
        }
      });
}

template <typename S>
Var<S> capsule_votes(const Var<S>& poses, const Var<S>& weights) {
  const Tensor<S>& u = poses.value();
  const Tensor<S>& w = weights.value();
  if (u.rank() != 3 || w.rank() != 4 || w.dim(0) != u.dim(1) || w.dim(3) != u.dim(2))
    throw DimensionError("capsule_votes poses " + to_string(u.shape()) + " weights " +
                         to_string(w.shape()));
  const Index batch = u.dim(0), children = u.dim(1), din = u.dim(2);
  const Index parents = w.dim(1), dout = w.dim(2);
  const Index rows = parents * dout;
  using Stride = Eigen::OuterStride<>;
  Tensor<S> out({batch, children, parents, dout});
  for (Index i = 0; i < children; ++i) {
    Eigen::Map<const RowMat<S>, 0, Stride> ui(u.data() + i * din, batch, din,
                                              Stride(children * din));
    CMapRowMat<S> wi(w.data() + i * rows * din, rows, din);
    Eigen::Map<RowMat<S>, 0, Stride> oi(out.data() + i * rows, batch, rows,
                                        Stride(children * rows));
    oi.noalias() = ui * wi.transpose();
  }
  const std::size_t iu = poses.id(), iw = weights.id();
  return poses.tape().record(
      "capsule_votes", std::move(out), {iu, iw},
      [=](Tape<S>& t, std::size_t self) {
        Tensor<S>* gu = t.grad_buffer(iu);
        Tensor<S>* gw = t.grad_buffer(iw);
        const S* g = t.upstream(self).data();
        const S* pu = t.value(iu).data();
        const S* pw = t.value(iw).data();
        for (Index i = 0; i < children; ++i) {
          Eigen::Map<const RowMat<S>, 0, Stride> gi(g + i * rows, batch, rows,
                                                    Stride(children * rows));
          if (gw) {
            Eigen::Map<const RowMat<S>, 0, Stride> ui(pu + i * din, batch, din,
                                                      Stride(children * din));
            MapRowMat<S>(gw->data() + i * rows * din, rows, din).noalias() += gi.transpose() * ui;
          }
          if (gu) {
            Eigen::Map<RowMat<S>, 0, Stride> dui(gu->data() + i * din, batch, din,
                                                 Stride(children * din));
            dui.noalias() += gi * CMapRowMat<S>(pw + i * rows * din, rows, din);
          }
        }
      });
}

#define RESCAPS_INSTANTIATE(S)                                                    \
  template Var<S> add(const Var<S>&, const Var<S>&);                              \
  template Var<S> sub(const Var<S>&, const Var<S>&);                              \
  template Var<S> mul(const Var<S>&, const Var<S>&);                              \
  template Var<S> div(const Var<S>&, const Var<S>&);                              \
  template Var<S> minimum(const Var<S>&, const Var<S>&);                          \
  template Var<S> add_scalar(const Var<S>&, S);                                   \
  template Var<S> mul_scalar(const Var<S>&, S);                                   \
  template Var<S> neg(const Var<S>&);                                             \
  template Var<S> relu(const Var<S>&);                                            \
  template Var<S> sigmoid(const Var<S>&);                                         \
  template Var<S> log_sigmoid(const Var<S>&);                                     \
  template Var<S> exp(const Var<S>&);                                             \
  template Var<S> log(const Var<S>&);                                             \
  template Var<S> sqrt(const Var<S>&);                                            \
  template Var<S> square(const Var<S>&);                                          \
  template Var<S> sum(const Var<S>&, int, bool);                                  \
  template Var<S> mean(const Var<S>&, int, bool);                                 \
  template Var<S> sum_all(const Var<S>&);                                         \
  template Var<S> mean_all(const Var<S>&);                                        \
  template Var<S> reshape(const Var<S>&, Shape);                                  \
  template Var<S> broadcast_to(const Var<S>&, Shape);                             \
  template Var<S> slice(const Var<S>&, int, Index, Index);                        \
  template Var<S> softmax(const Var<S>&, int);                                    \
  template Var<S> norm(const Var<S>&, int, S);                                    \
  template Var<S> squash(const Var<S>&, int, S);                                  \
  template Var<S> matmul(const Var<S>&, const Var<S>&);                           \
  template Var<S> conv2d(const Var<S>&, const Var<S>&, const Var<S>&, Index);     \
  template Var<S> capsule_votes(const Var<S>&, const Var<S>&);

RESCAPS_INSTANTIATE(float)
RESCAPS_INSTANTIATE(double)

#undef RESCAPS_INSTANTIATE

}  // namespace rescaps
