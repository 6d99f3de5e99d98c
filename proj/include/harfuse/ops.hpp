#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include "harfuse/errors.hpp"
#include "harfuse/tensor.hpp"

// Differentiable primitives. Each op appends one node whose backward closure
// adds into its inputs' gradient buffers. The closure captures the output
// handle, whose index is known before the push (nodes are appended in order).

namespace harfuse {

namespace detail {

struct AxisSplit {
  std::size_t outer, len, inner;
};

inline AxisSplit split_axis(const Shape& s, std::size_t axis) {
  if (axis >= s.size())
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " +
                     shape_str(s));
  AxisSplit a{1, s[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) a.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) a.inner *= s[i];
  return a;
}

inline void check_same_shape(const Shape& a, const Shape& b,
                             const char* what) {
  if (a != b)
    throw ShapeError(std::string(what) + ": shapes " + shape_str(a) + " and " +
                     shape_str(b) + " differ");
}

inline Var next_var(const Tape& tp) { return Var{tp.size()}; }

}  // namespace detail

inline Var add(Tape& tp, Var a, Var b) {
  detail::check_same_shape(tp.shape(a), tp.shape(b), "add");
  const auto& xa = tp.data(a);
  const auto& xb = tp.data(b);
  std::vector<float> y(xa.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = xa[i] + xb[i];
  Var out = detail::next_var(tp);
  return tp.push(tp.shape(a), std::move(y), [a, b, out](Tape& t) {
    const auto& g = t.grad(out);
    auto& ga = t.grad(a);
    auto& gb = t.grad(b);
    for (std::size_t i = 0; i < g.size(); ++i) {
      ga[i] += g[i];
      gb[i] += g[i];
    }
  });
}

inline Var scale(Tape& tp, Var x, float c) {
  const auto& xd = tp.data(x);
  std::vector<float> y(xd.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = xd[i] * c;
  Var out = detail::next_var(tp);
  return tp.push(tp.shape(x), std::move(y), [x, c, out](Tape& t) {
    const auto& g = t.grad(out);
    auto& gx = t.grad(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * c;
  });
}

inline Var relu(Tape& tp, Var x) {
  const auto& xd = tp.data(x);
  std::vector<float> y(xd.size());
  for (std::size_t i = 0; i < y.size(); ++i) {
    const bool pos = xd[i] > 0.0f;
    tp.fold_kink(pos);
    y[i] = pos ? xd[i] : 0.0f;
  }
  Var out = detail::next_var(tp);
  return tp.push(tp.shape(x), std::move(y), [x, out](Tape& t) {
    const auto& g = t.grad(out);
    const auto& xd = t.data(x);
    auto& gx = t.grad(x);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (xd[i] > 0.0f) gx[i] += g[i];
  });
}

// Broadcast bias over everything but the leading (channel) axis.
inline Var add_channel_bias(Tape& tp, Var x, Var b) {
  const Shape xs = tp.shape(x);
  const Shape bs = tp.shape(b);
  if (bs.size() != 1 || xs.empty() || bs[0] != xs[0])
    throw ShapeError("add_channel_bias: bias " + shape_str(bs) +
                     " does not match leading axis of " + shape_str(xs));
  const std::size_t c = xs[0];
  const std::size_t stride = numel(xs) / c;
  const auto& xd = tp.data(x);
  const auto& bd = tp.data(b);
  std::vector<float> y(xd.size());
  for (std::size_t i = 0; i < c; ++i)
    for (std::size_t j = 0; j < stride; ++j)
      y[i * stride + j] = xd[i * stride + j] + bd[i];
  Var out = detail::next_var(tp);
  return tp.push(xs, std::move(y), [x, b, c, stride, out](Tape& t) {
    const auto& g = t.grad(out);
    auto& gx = t.grad(x);
    auto& gb = t.grad(b);
    for (std::size_t i = 0; i < c; ++i) {
      float s = 0.0f;
      for (std::size_t j = 0; j < stride; ++j) {
        gx[i * stride + j] += g[i * stride + j];
        s += g[i * stride + j];
      }
      gb[i] += s;
    }
  });
}

// Broadcast a length-F row vector over the rows of x [N x F].
inline Var add_rowvec(Tape& tp, Var x, Var b) {
  const Shape xs = tp.shape(x);
  const Shape bs = tp.shape(b);
  if (xs.size() != 2 || bs.size() != 1 || bs[0] != xs[1])
    throw ShapeError("add_rowvec: " + shape_str(xs) + " vs " + shape_str(bs));
  const std::size_t n = xs[0], f = xs[1];
  const auto& xd = tp.data(x);
  const auto& bd = tp.data(b);
  std::vector<float> y(xd.size());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < f; ++j) y[i * f + j] = xd[i * f + j] + bd[j];
  Var out = detail::next_var(tp);
  return tp.push(xs, std::move(y), [x, b, n, f, out](Tape& t) {
    const auto& g = t.grad(out);
    auto& gx = t.grad(x);
    auto& gb = t.grad(b);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < f; ++j) {
        gx[i * f + j] += g[i * f + j];
        gb[j] += g[i * f + j];
      }
  });
}

inline Var matmul(Tape& tp, Var a, Var b) {
  const Shape sa = tp.shape(a);
  const Shape sb = tp.shape(b);
  if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0])
    throw ShapeError("matmul: incompatible shapes " + shape_str(sa) + " and " +
                     shape_str(sb));
  const std::size_t m = sa[0], k = sa[1], n = sb[1];
  const auto& ad = tp.data(a);
  const auto& bd = tp.data(b);
  std::vector<float> y(m * n, 0.0f);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const float av = ad[i * k + p];
      for (std::size_t j = 0; j < n; ++j) y[i * n + j] += av * bd[p * n + j];
    }
  Var out = detail::next_var(tp);
  return tp.push({m, n}, std::move(y), [a, b, m, k, n, out](Tape& t) {
    const auto& g = t.grad(out);
    const auto& ad = t.data(a);
    const auto& bd = t.data(b);
    auto& ga = t.grad(a);
    auto& gb = t.grad(b);
    // dA = dC * B^T
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t p = 0; p < k; ++p) {
        float s = 0.0f;
        for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * bd[p * n + j];
        ga[i * k + p] += s;
      }
    // dB = A^T * dC
    for (std::size_t p = 0; p < k; ++p)
      for (std::size_t i = 0; i < m; ++i) {
        const float av = ad[i * k + p];
        for (std::size_t j = 0; j < n; ++j)
          gb[p * n + j] += av * g[i * n + j];
      }
  });
}

inline Var transpose2d(Tape& tp, Var x) {
  const Shape xs = tp.shape(x);
  if (xs.size() != 2)
    throw ShapeError("transpose2d: expected rank 2, got " + shape_str(xs));
  const std::size_t m = xs[0], n = xs[1];
  const auto& xd = tp.data(x);
  std::vector<float> y(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) y[j * m + i] = xd[i * n + j];
  Var out = detail::next_var(tp);
  return tp.push({n, m}, std::move(y), [x, m, n, out](Tape& t) {
    const auto& g = t.grad(out);
    auto& gx = t.grad(x);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += g[j * m + i];
  });
}

inline Var reshape(Tape& tp, Var x, Shape new_shape) {
  if (numel(new_shape) != tp.data(x).size())
    throw ShapeError("reshape: " + shape_str(tp.shape(x)) + " -> " +
                     shape_str(new_shape) + " changes element count");
  Var out = detail::next_var(tp);
  std::vector<float> y = tp.data(x);
  return tp.push(std::move(new_shape), std::move(y), [x, out](Tape& t) {
    const auto& g = t.grad(out);
    auto& gx = t.grad(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

// Row-major flatten to one dimension.
inline Var flatten(Tape& tp, Var x) {
  return reshape(tp, x, {tp.data(x).size()});
}

// Columns [start, start+len) of a 2-D tensor.
inline Var col_slice(Tape& tp, Var x, std::size_t start, std::size_t len) {
  const Shape xs = tp.shape(x);
  if (xs.size() != 2 || start + len > xs[1])
    throw ShapeError("col_slice: [" + std::to_string(start) + ", " +
                     std::to_string(start + len) + ") out of " +
                     shape_str(xs));
  const std::size_t m = xs[0], n = xs[1];
  const auto& xd = tp.data(x);
  std::vector<float> y(m * len);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < len; ++j) y[i * len + j] = xd[i * n + start + j];
  Var out = detail::next_var(tp);
  return tp.push({m, len}, std::move(y), [x, start, len, m, n, out](Tape& t) {
    const auto& g = t.grad(out);
    auto& gx = t.grad(x);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < len; ++j)
        gx[i * n + start + j] += g[i * len + j];
  });
}

// Rows [start, start+len) of a 2-D tensor.
inline Var row_slice(Tape& tp, Var x, std::size_t start, std::size_t len) {
  const Shape xs = tp.shape(x);
  if (xs.size() != 2 || start + len > xs[0])
    throw ShapeError("row_slice: [" + std::to_string(start) + ", " +
                     std::to_string(start + len) + ") out of " +
                     shape_str(xs));
  const std::size_t n = xs[1];
  const auto& xd = tp.data(x);
  std::vector<float> y(xd.begin() + start * n, xd.begin() + (start + len) * n);
  Var out = detail::next_var(tp);
  return tp.push({len, n}, std::move(y), [x, start, len, n, out](Tape& t) {
    const auto& g = t.grad(out);
    auto& gx = t.grad(x);
    for (std::size_t i = 0; i < len * n; ++i) gx[start * n + i] += g[i];
  });
}

inline Var concat(Tape& tp, const std::vector<Var>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no parts");
  const Shape s0 = tp.shape(parts[0]);
  Shape out_shape = s0;
  std::size_t total = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const Shape sp = tp.shape(parts[p]);
    if (sp.size() != s0.size())
      throw ShapeError("concat: part " + std::to_string(p) + " has rank " +
                       std::to_string(sp.size()) + ", expected " +
                       std::to_string(s0.size()));
    for (std::size_t d = 0; d < sp.size(); ++d)
      if (d != axis && sp[d] != s0[d])
        throw ShapeError("concat: part " + std::to_string(p) + " shape " +
                         shape_str(sp) + " incompatible with " +
                         shape_str(s0) + " off axis " + std::to_string(axis));
    total += sp[axis];
  }
  out_shape[axis] = total;
  const auto ax = detail::split_axis(out_shape, axis);
  std::vector<float> y(numel(out_shape));
  std::vector<std::size_t> offsets(parts.size());
  std::size_t off = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    offsets[p] = off;
    const std::size_t lp = tp.shape(parts[p])[axis];
    const auto& xd = tp.data(parts[p]);
    for (std::size_t o = 0; o < ax.outer; ++o)
      for (std::size_t l = 0; l < lp; ++l)
        for (std::size_t i = 0; i < ax.inner; ++i)
          y[(o * ax.len + off + l) * ax.inner + i] =
              xd[(o * lp + l) * ax.inner + i];
    off += lp;
  }
  Var out = detail::next_var(tp);
  std::vector<Var> ps = parts;
  return tp.push(out_shape, std::move(y),
                 [ps, offsets, ax, axis, out](Tape& t) {
                   const auto& g = t.grad(out);
                   for (std::size_t p = 0; p < ps.size(); ++p) {
                     const std::size_t lp = t.shape(ps[p])[axis];
                     auto& gx = t.grad(ps[p]);
                     for (std::size_t o = 0; o < ax.outer; ++o)
                       for (std::size_t l = 0; l < lp; ++l)
                         for (std::size_t i = 0; i < ax.inner; ++i)
                           gx[(o * lp + l) * ax.inner + i] +=
                               g[(o * ax.len + offsets[p] + l) * ax.inner + i];
                   }
                 });
}

// Value-level inverse of concat; used to check boundary reconstruction.
inline std::vector<TensorValue> split_values(const TensorValue& x,
                                             std::size_t axis,
                                             const std::vector<std::size_t>& lens) {
  const auto ax = detail::split_axis(x.shape, axis);
  std::size_t sum = 0;
  for (auto l : lens) sum += l;
  if (sum != x.shape[axis]) throw ShapeError("split: lengths do not tile axis");
  std::vector<TensorValue> parts;
  std::size_t off = 0;
  for (std::size_t lp : lens) {
    Shape s = x.shape;
    s[axis] = lp;
    std::vector<float> d(numel(s));
    for (std::size_t o = 0; o < ax.outer; ++o)
      for (std::size_t l = 0; l < lp; ++l)
        for (std::size_t i = 0; i < ax.inner; ++i)
          d[(o * lp + l) * ax.inner + i] =
              x.data[(o * ax.len + off + l) * ax.inner + i];
    parts.emplace_back(std::move(s), std::move(d));
    off += lp;
  }
  return parts;
}

inline Var sum(Tape& tp, Var x) {
  const auto& xd = tp.data(x);
  double s = 0.0;
  for (float v : xd) s += v;
  Var out = detail::next_var(tp);
  return tp.push({1}, {static_cast<float>(s)}, [x, out](Tape& t) {
    const float g = t.grad(out)[0];
    auto& gx = t.grad(x);
    for (float& v : gx) v += g;
  });
}

inline Var mean(Tape& tp, Var x) {
  const auto& xd = tp.data(x);
  double s = 0.0;
  for (float v : xd) s += v;
  const float inv = 1.0f / static_cast<float>(xd.size());
  Var out = detail::next_var(tp);
  return tp.push({1}, {static_cast<float>(s / xd.size())},
                 [x, inv, out](Tape& t) {
                   const float g = t.grad(out)[0] * inv;
                   auto& gx = t.grad(x);
                   for (float& v : gx) v += g;
                 });
}

// Max-subtracted softmax along `axis`.
inline Var softmax(Tape& tp, Var x, std::size_t axis) {
  const Shape xs = tp.shape(x);
  const auto ax = detail::split_axis(xs, axis);
  const auto& xd = tp.data(x);
  std::vector<float> y(xd.size());
  for (std::size_t o = 0; o < ax.outer; ++o)
    for (std::size_t i = 0; i < ax.inner; ++i) {
      float mx = -std::numeric_limits<float>::infinity();
      for (std::size_t l = 0; l < ax.len; ++l)
        mx = std::max(mx, xd[(o * ax.len + l) * ax.inner + i]);
      double z = 0.0;
      for (std::size_t l = 0; l < ax.len; ++l) {
        const std::size_t id = (o * ax.len + l) * ax.inner + i;
        y[id] = std::exp(xd[id] - mx);
        z += y[id];
      }
      const float invz = static_cast<float>(1.0 / z);
      for (std::size_t l = 0; l < ax.len; ++l)
        y[(o * ax.len + l) * ax.inner + i] *= invz;
    }
  Var out = detail::next_var(tp);
  return tp.push(xs, std::move(y), [x, ax, out](Tape& t) {
    const auto& g = t.grad(out);
    const auto& y = t.data(out);
    auto& gx = t.grad(x);
    for (std::size_t o = 0; o < ax.outer; ++o)
      for (std::size_t i = 0; i < ax.inner; ++i) {
        double dot = 0.0;
        for (std::size_t l = 0; l < ax.len; ++l) {
          const std::size_t id = (o * ax.len + l) * ax.inner + i;
          dot += static_cast<double>(g[id]) * y[id];
        }
        for (std::size_t l = 0; l < ax.len; ++l) {
          const std::size_t id = (o * ax.len + l) * ax.inner + i;
          gx[id] += y[id] * (g[id] - static_cast<float>(dot));
        }
      }
  });
}

inline Var log_softmax(Tape& tp, Var x, std::size_t axis) {
  const Shape xs = tp.shape(x);
  const auto ax = detail::split_axis(xs, axis);
  const auto& xd = tp.data(x);
  std::vector<float> y(xd.size());
  for (std::size_t o = 0; o < ax.outer; ++o)
    for (std::size_t i = 0; i < ax.inner; ++i) {
      float mx = -std::numeric_limits<float>::infinity();
      for (std::size_t l = 0; l < ax.len; ++l)
        mx = std::max(mx, xd[(o * ax.len + l) * ax.inner + i]);
      double z = 0.0;
      for (std::size_t l = 0; l < ax.len; ++l)
        z += std::exp(xd[(o * ax.len + l) * ax.inner + i] - mx);
      const float lz = mx + static_cast<float>(std::log(z));
      for (std::size_t l = 0; l < ax.len; ++l) {
        const std::size_t id = (o * ax.len + l) * ax.inner + i;
        y[id] = xd[id] - lz;
      }
    }
  Var out = detail::next_var(tp);
  return tp.push(xs, std::move(y), [x, ax, out](Tape& t) {
    const auto& g = t.grad(out);
    const auto& y = t.data(out);
    auto& gx = t.grad(x);
    for (std::size_t o = 0; o < ax.outer; ++o)
      for (std::size_t i = 0; i < ax.inner; ++i) {
        double gs = 0.0;
        for (std::size_t l = 0; l < ax.len; ++l)
          gs += g[(o * ax.len + l) * ax.inner + i];
        for (std::size_t l = 0; l < ax.len; ++l) {
          const std::size_t id = (o * ax.len + l) * ax.inner + i;
          gx[id] += g[id] - std::exp(y[id]) * static_cast<float>(gs);
        }
      }
  });
}

// Same-padded 1-D convolution along time. x [C_in x T], w [C_out x C_in x k].
inline Var temporal_conv1d(Tape& tp, Var x, Var w) {
  const Shape xs = tp.shape(x);
  const Shape ws = tp.shape(w);
  if (xs.size() != 2 || ws.size() != 3 || ws[1] != xs[0])
    throw ShapeError("temporal_conv1d: x " + shape_str(xs) + " vs w " +
                     shape_str(ws));
  if (ws[2] % 2 == 0)
    throw ConfigError("temporal_conv1d: kernel width " +
                      std::to_string(ws[2]) + " must be odd");
  const std::size_t cin = xs[0], tlen = xs[1], cout = ws[0], k = ws[2];
  const std::size_t r = k / 2;
  const auto& xd = tp.data(x);
  const auto& wd = tp.data(w);
  std::vector<float> y(cout * tlen, 0.0f);
  for (std::size_t o = 0; o < cout; ++o)
    for (std::size_t c = 0; c < cin; ++c)
      for (std::size_t d = 0; d < k; ++d) {
        const float wv = wd[(o * cin + c) * k + d];
        const std::ptrdiff_t sh = static_cast<std::ptrdiff_t>(d) -
                                  static_cast<std::ptrdiff_t>(r);
        const std::size_t lo = sh < 0 ? static_cast<std::size_t>(-sh) : 0;
        const std::size_t hi =
            sh > 0 ? tlen - static_cast<std::size_t>(sh) : tlen;
        for (std::size_t t = lo; t < hi; ++t)
          y[o * tlen + t] += wv * xd[c * tlen + t + sh];
      }
  Var out = detail::next_var(tp);
  return tp.push({cout, tlen}, std::move(y),
                 [x, w, cin, tlen, cout, k, r, out](Tape& t) {
                   const auto& g = t.grad(out);
                   const auto& xd = t.data(x);
                   const auto& wd = t.data(w);
                   auto& gx = t.grad(x);
                   auto& gw = t.grad(w);
                   for (std::size_t o = 0; o < cout; ++o)
                     for (std::size_t c = 0; c < cin; ++c)
                       for (std::size_t d = 0; d < k; ++d) {
                         const std::ptrdiff_t sh =
                             static_cast<std::ptrdiff_t>(d) -
                             static_cast<std::ptrdiff_t>(r);
                         const std::size_t lo =
                             sh < 0 ? static_cast<std::size_t>(-sh) : 0;
                         const std::size_t hi =
                             sh > 0 ? tlen - static_cast<std::size_t>(sh)
                                    : tlen;
                         const float wv = wd[(o * cin + c) * k + d];
                         float acc = 0.0f;
                         for (std::size_t tt = lo; tt < hi; ++tt) {
                           gx[c * tlen + tt + sh] += wv * g[o * tlen + tt];
                           acc += g[o * tlen + tt] * xd[c * tlen + tt + sh];
                         }
                         gw[(o * cin + c) * k + d] += acc;
                       }
                 });
}

// Same convolution applied independently per joint. x [C_in x T x J].
inline Var temporal_conv_joints(Tape& tp, Var x, Var w) {
  const Shape xs = tp.shape(x);
  const Shape ws = tp.shape(w);
  if (xs.size() != 3 || ws.size() != 3 || ws[1] != xs[0])
    throw ShapeError("temporal_conv_joints: x " + shape_str(xs) + " vs w " +
                     shape_str(ws));
  if (ws[2] % 2 == 0)
    throw ConfigError("temporal_conv_joints: kernel width " +
                      std::to_string(ws[2]) + " must be odd");
  const std::size_t cin = xs[0], tlen = xs[1], nj = xs[2];
  const std::size_t cout = ws[0], k = ws[2], r = k / 2;
  const auto& xd = tp.data(x);
  const auto& wd = tp.data(w);
  std::vector<float> y(cout * tlen * nj, 0.0f);
  for (std::size_t o = 0; o < cout; ++o)
    for (std::size_t c = 0; c < cin; ++c)
      for (std::size_t d = 0; d < k; ++d) {
        const float wv = wd[(o * cin + c) * k + d];
        const std::ptrdiff_t sh = static_cast<std::ptrdiff_t>(d) -
                                  static_cast<std::ptrdiff_t>(r);
        const std::size_t lo = sh < 0 ? static_cast<std::size_t>(-sh) : 0;
        const std::size_t hi =
            sh > 0 ? tlen - static_cast<std::size_t>(sh) : tlen;
        const float* src = &xd[(c * tlen) * nj];
        float* dst = &y[(o * tlen) * nj];
        for (std::size_t t = lo; t < hi; ++t) {
          const float* sr = src + (t + sh) * nj;
          float* dr = dst + t * nj;
          for (std::size_t j = 0; j < nj; ++j) dr[j] += wv * sr[j];
        }
      }
  Var out = detail::next_var(tp);
  return tp.push({cout, tlen, nj}, std::move(y),
                 [x, w, cin, tlen, nj, cout, k, r, out](Tape& t) {
                   const auto& g = t.grad(out);
                   const auto& xd = t.data(x);
                   const auto& wd = t.data(w);
                   auto& gx = t.grad(x);
                   auto& gw = t.grad(w);
                   for (std::size_t o = 0; o < cout; ++o)
                     for (std::size_t c = 0; c < cin; ++c)
                       for (std::size_t d = 0; d < k; ++d) {
                         const std::ptrdiff_t sh =
                             static_cast<std::ptrdiff_t>(d) -
                             static_cast<std::ptrdiff_t>(r);
                         const std::size_t lo =
                             sh < 0 ? static_cast<std::size_t>(-sh) : 0;
                         const std::size_t hi =
                             sh > 0 ? tlen - static_cast<std::size_t>(sh)
                                    : tlen;
                         const float wv = wd[(o * cin + c) * k + d];
                         float acc = 0.0f;
                         for (std::size_t tt = lo; tt < hi; ++tt) {
                           const float* gr = &g[(o * tlen + tt) * nj];
                           const float* xr = &xd[(c * tlen + tt + sh) * nj];
                           float* gxr = &gx[(c * tlen + tt + sh) * nj];
                           for (std::size_t j = 0; j < nj; ++j) {
                             gxr[j] += wv * gr[j];
                             acc += gr[j] * xr[j];
                           }
                         }
                         gw[(o * cin + c) * k + d] += acc;
                       }
                 });
}

// Running statistics owned by the layer, not the tape.
struct BatchNormState {
  std::vector<float> running_mean;
  std::vector<float> running_var;
  float momentum = 0.1f;  // weight of the current batch in the running stats
  float eps = 1e-5f;

  explicit BatchNormState(std::size_t features = 0, float mom = 0.1f)
      : running_mean(features, 0.0f), running_var(features, 1.0f),
        momentum(mom) {}
};

// x [B x F]; gamma, beta [F]. Train mode uses batch statistics and updates
// the running ones; eval mode reads the running statistics only.
inline Var batch_norm(Tape& tp, Var x, Var gamma, Var beta,
                      BatchNormState& state, bool train) {
  const Shape xs = tp.shape(x);
  if (xs.size() != 2) throw ShapeError("batch_norm: expected [B x F], got " +
                                       shape_str(xs));
  const std::size_t bsz = xs[0], f = xs[1];
  if (tp.shape(gamma) != Shape{f} || tp.shape(beta) != Shape{f})
    throw ShapeError("batch_norm: gamma/beta must have shape [" +
                     std::to_string(f) + "]");
  if (state.running_mean.size() != f)
    throw ShapeError("batch_norm: state sized for " +
                     std::to_string(state.running_mean.size()) +
                     " features, input has " + std::to_string(f));
  if (train && bsz < 2)
    throw ContractError("batch_norm: train mode requires batch size >= 2, got " +
                        std::to_string(bsz));
  const auto& xd = tp.data(x);
  const auto& gd = tp.data(gamma);
  const auto& bd = tp.data(beta);
  std::vector<float> mu(f), invstd(f), xhat(bsz * f), y(bsz * f);
  if (train) {
    for (std::size_t j = 0; j < f; ++j) {
      double s = 0.0;
      for (std::size_t i = 0; i < bsz; ++i) s += xd[i * f + j];
      mu[j] = static_cast<float>(s / bsz);
      double v = 0.0;
      for (std::size_t i = 0; i < bsz; ++i) {
        const double d = xd[i * f + j] - mu[j];
        v += d * d;
      }
      const float var = static_cast<float>(v / bsz);
      invstd[j] = 1.0f / std::sqrt(var + state.eps);
      state.running_mean[j] =
          (1.0f - state.momentum) * state.running_mean[j] + state.momentum * mu[j];
      state.running_var[j] =
          (1.0f - state.momentum) * state.running_var[j] + state.momentum * var;
    }
  } else {
    for (std::size_t j = 0; j < f; ++j) {
      mu[j] = state.running_mean[j];
      invstd[j] = 1.0f / std::sqrt(state.running_var[j] + state.eps);
    }
  }
  for (std::size_t i = 0; i < bsz; ++i)
    for (std::size_t j = 0; j < f; ++j) {
      xhat[i * f + j] = (xd[i * f + j] - mu[j]) * invstd[j];
      y[i * f + j] = gd[j] * xhat[i * f + j] + bd[j];
    }
  Var out = detail::next_var(tp);
  return tp.push({bsz, f}, std::move(y),
                 [x, gamma, beta, bsz, f, xhat = std::move(xhat),
                  invstd = std::move(invstd), train, out](Tape& t) {
                   const auto& g = t.grad(out);
                   const auto& gd = t.data(gamma);
                   auto& gx = t.grad(x);
                   auto& gg = t.grad(gamma);
                   auto& gb = t.grad(beta);
                   for (std::size_t j = 0; j < f; ++j) {
                     double sum_dy = 0.0, sum_dy_xhat = 0.0;
                     for (std::size_t i = 0; i < bsz; ++i) {
                       sum_dy += g[i * f + j];
                       sum_dy_xhat +=
                           static_cast<double>(g[i * f + j]) * xhat[i * f + j];
                     }
                     gg[j] += static_cast<float>(sum_dy_xhat);
                     gb[j] += static_cast<float>(sum_dy);
                     if (train) {
                       const float m1 = static_cast<float>(sum_dy / bsz);
                       const float m2 = static_cast<float>(sum_dy_xhat / bsz);
                       for (std::size_t i = 0; i < bsz; ++i)
                         gx[i * f + j] += gd[j] * invstd[j] *
                                          (g[i * f + j] - m1 -
                                           xhat[i * f + j] * m2);
                     } else {
                       for (std::size_t i = 0; i < bsz; ++i)
                         gx[i * f + j] += gd[j] * invstd[j] * g[i * f + j];
                     }
                   }
                 });
}

// Per-row normalization. x [T x d]; gain, bias [d].
inline Var layer_norm(Tape& tp, Var x, Var gain, Var bias, float eps = 1e-5f) {
  const Shape xs = tp.shape(x);
  if (xs.size() != 2) throw ShapeError("layer_norm: expected [T x d], got " +
                                       shape_str(xs));
  const std::size_t n = xs[0], d = xs[1];
  if (tp.shape(gain) != Shape{d} || tp.shape(bias) != Shape{d})
    throw ShapeError("layer_norm: gain/bias must have shape [" +
                     std::to_string(d) + "]");
  const auto& xd = tp.data(x);
  const auto& gd = tp.data(gain);
  const auto& bd = tp.data(bias);
  std::vector<float> xhat(n * d), invstd(n), y(n * d);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += xd[i * d + j];
    const float mu = static_cast<float>(s / d);
    double v = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double dv = xd[i * d + j] - mu;
      v += dv * dv;
    }
    invstd[i] = 1.0f / std::sqrt(static_cast<float>(v / d) + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[i * d + j] = (xd[i * d + j] - mu) * invstd[i];
      y[i * d + j] = gd[j] * xhat[i * d + j] + bd[j];
    }
  }
  Var out = detail::next_var(tp);
  return tp.push({n, d}, std::move(y),
                 [x, gain, bias, n, d, xhat = std::move(xhat),
                  invstd = std::move(invstd), out](Tape& t) {
                   const auto& g = t.grad(out);
                   const auto& gd = t.data(gain);
                   auto& gx = t.grad(x);
                   auto& gg = t.grad(gain);
                   auto& gb = t.grad(bias);
                   for (std::size_t i = 0; i < n; ++i) {
                     double m1 = 0.0, m2 = 0.0;
                     for (std::size_t j = 0; j < d; ++j) {
                       const double dxh =
                           static_cast<double>(g[i * d + j]) * gd[j];
                       m1 += dxh;
                       m2 += dxh * xhat[i * d + j];
                       gg[j] += g[i * d + j] * xhat[i * d + j];
                       gb[j] += g[i * d + j];
                     }
                     m1 /= d;
                     m2 /= d;
                     for (std::size_t j = 0; j < d; ++j) {
                       const float dxh = g[i * d + j] * gd[j];
                       gx[i * d + j] += invstd[i] *
                                        (dxh - static_cast<float>(m1) -
                                         xhat[i * d + j] *
                                             static_cast<float>(m2));
                     }
                   }
                 });
}

}  // namespace harfuse
