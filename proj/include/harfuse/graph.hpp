#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "harfuse/data.hpp"
#include "harfuse/ops.hpp"
#include "harfuse/tensor.hpp"

namespace harfuse {

// Symmetrically normalized adjacency with self-loops:
// A_hat = D^{-1/2} (A + I) D^{-1/2}, D the degree matrix of A + I.
struct NormalizedAdjacency {
  std::size_t joints = 0;
  std::vector<float> matrix;  // J x J
  std::string source_topology_hash;

  float at(std::size_t i, std::size_t j) const { return matrix[i * joints + j]; }
};

// Joint clusters plus the induced edge list on the pooled graph.
struct PoolingMap {
  std::vector<std::size_t> clusters;  // cluster id per joint
  std::size_t cluster_count = 0;
  std::vector<std::pair<std::size_t, std::size_t>> pooled_edges;
};

namespace detail {
inline std::string topology_hash(std::size_t joints,
                                 const std::vector<std::pair<std::size_t, std::size_t>>& edges) {
  // FNV-1a over the canonical edge list; identifies which topology an
  // adjacency was built from.
  std::uint64_t h = 1469598103934665603ULL;
  auto mixin = [&h](std::uint64_t v) {
    h ^= v;
    h *= 1099511628211ULL;
  };
  mixin(joints);
  std::set<std::pair<std::size_t, std::size_t>> canon;
  for (auto [a, b] : edges) canon.insert(std::minmax(a, b));
  for (auto [a, b] : canon) {
    mixin(a);
    mixin(b);
  }
  std::ostringstream os;
  os << std::hex << h;
  return os.str();
}
}  // namespace detail

inline NormalizedAdjacency build_adjacency(
    std::size_t joints,
    const std::vector<std::pair<std::size_t, std::size_t>>& edges) {
  NormalizedAdjacency adj;
  adj.joints = joints;
  adj.matrix.assign(joints * joints, 0.0f);
  for (std::size_t i = 0; i < joints; ++i) adj.matrix[i * joints + i] = 1.0f;
  for (auto [a, b] : edges) {
    adj.matrix[a * joints + b] = 1.0f;
    adj.matrix[b * joints + a] = 1.0f;
  }
  std::vector<double> dinv(joints);
  for (std::size_t i = 0; i < joints; ++i) {
    double deg = 0.0;
    for (std::size_t j = 0; j < joints; ++j) deg += adj.matrix[i * joints + j];
    dinv[i] = 1.0 / std::sqrt(deg);
  }
  for (std::size_t i = 0; i < joints; ++i)
    for (std::size_t j = 0; j < joints; ++j)
      adj.matrix[i * joints + j] =
          static_cast<float>(dinv[i] * adj.matrix[i * joints + j] * dinv[j]);
  adj.source_topology_hash = detail::topology_hash(joints, edges);
  return adj;
}

inline NormalizedAdjacency build_adjacency(const SkeletonTopology& topo) {
  topo.validate();
  return build_adjacency(topo.joint_count, topo.edges);
}

inline PoolingMap build_pooling_map(const SkeletonTopology& topo) {
  topo.validate();
  PoolingMap map;
  map.clusters = topo.pooling_map;
  map.cluster_count = topo.cluster_count();
  std::set<std::pair<std::size_t, std::size_t>> pooled;
  for (auto [a, b] : topo.edges) {
    const std::size_t ca = map.clusters[a];
    const std::size_t cb = map.clusters[b];
    if (ca != cb) pooled.insert(std::minmax(ca, cb));
  }
  map.pooled_edges.assign(pooled.begin(), pooled.end());
  return map;
}

// Per frame t: Y[:,t,:] = W * X[:,t,:] * A_hat. x [C_in x T x J],
// w [C_out x C_in]. A_hat is symmetric, which the backward pass relies on.
inline Var graph_conv(Tape& tp, Var x, const NormalizedAdjacency& adj, Var w) {
  const Shape xs = tp.shape(x);
  const Shape ws = tp.shape(w);
  if (xs.size() != 3 || ws.size() != 2 || ws[1] != xs[0] ||
      xs[2] != adj.joints)
    throw ShapeError("graph_conv: x " + shape_str(xs) + ", w " +
                     shape_str(ws) + ", adjacency with " +
                     std::to_string(adj.joints) + " joints");
  const std::size_t cin = xs[0], tlen = xs[1], nj = xs[2], cout = ws[0];
  const auto& xd = tp.data(x);
  const auto& wd = tp.data(w);
  const auto& ad = adj.matrix;
  // tmp = X * A_hat per frame (neighborhood aggregation)
  std::vector<float> agg(cin * tlen * nj, 0.0f);
  for (std::size_t c = 0; c < cin; ++c)
    for (std::size_t t = 0; t < tlen; ++t) {
      const float* xr = &xd[(c * tlen + t) * nj];
      float* ar = &agg[(c * tlen + t) * nj];
      for (std::size_t jp = 0; jp < nj; ++jp) {
        const float v = xr[jp];
        const float* arow = &ad[jp * nj];
        for (std::size_t j = 0; j < nj; ++j) ar[j] += v * arow[j];
      }
    }
  std::vector<float> y(cout * tlen * nj, 0.0f);
  for (std::size_t o = 0; o < cout; ++o)
    for (std::size_t c = 0; c < cin; ++c) {
      const float wv = wd[o * cin + c];
      const float* src = &agg[c * tlen * nj];
      float* dst = &y[o * tlen * nj];
      for (std::size_t i = 0; i < tlen * nj; ++i) dst[i] += wv * src[i];
    }
  Var out = detail::next_var(tp);
  const std::vector<float>* adj_matrix = &adj.matrix;
  return tp.push({cout, tlen, nj}, std::move(y),
                 [x, w, cin, tlen, nj, cout, agg = std::move(agg),
                  adj_matrix, out](Tape& t) {
                   const auto& g = t.grad(out);
                   const auto& xd = t.data(x);
                   const auto& wd = t.data(w);
                   const auto& ad = *adj_matrix;
                   auto& gx = t.grad(x);
                   auto& gw = t.grad(w);
                   // dW[o,c] = sum_t dY_t (X_t A)^T = <dY[o], agg[c]>
                   for (std::size_t o = 0; o < cout; ++o)
                     for (std::size_t c = 0; c < cin; ++c) {
                       const float* gr = &g[o * tlen * nj];
                       const float* ar = &agg[c * tlen * nj];
                       float acc = 0.0f;
                       for (std::size_t i = 0; i < tlen * nj; ++i)
                         acc += gr[i] * ar[i];
                       gw[o * cin + c] += acc;
                     }
                   // dX_t = W^T dY_t A (A symmetric)
                   std::vector<float> tmp(cin * tlen * nj, 0.0f);
                   for (std::size_t o = 0; o < cout; ++o)
                     for (std::size_t c = 0; c < cin; ++c) {
                       const float wv = wd[o * cin + c];
                       const float* gr = &g[o * tlen * nj];
                       float* tr = &tmp[c * tlen * nj];
                       for (std::size_t i = 0; i < tlen * nj; ++i)
                         tr[i] += wv * gr[i];
                     }
                   (void)xd;
                   for (std::size_t c = 0; c < cin; ++c)
                     for (std::size_t tt = 0; tt < tlen; ++tt) {
                       const float* tr = &tmp[(c * tlen + tt) * nj];
                       float* gxr = &gx[(c * tlen + tt) * nj];
                       for (std::size_t j = 0; j < nj; ++j) {
                         const float v = tr[j];
                         const float* arow = &ad[j * nj];
                         for (std::size_t jp = 0; jp < nj; ++jp)
                           gxr[jp] += v * arow[jp];
                       }
                     }
                 });
}

// Mean over the joints of each cluster. x [C x T x J] -> [C x T x J'].
inline Var graph_pool(Tape& tp, Var x, const PoolingMap& map) {
  const Shape xs = tp.shape(x);
  if (xs.size() != 3 || xs[2] != map.clusters.size())
    throw ShapeError("graph_pool: x " + shape_str(xs) + " vs map over " +
                     std::to_string(map.clusters.size()) + " joints");
  const std::size_t cch = xs[0], tlen = xs[1], nj = xs[2];
  const std::size_t jp = map.cluster_count;
  std::vector<std::size_t> cluster_size(jp, 0);
  for (std::size_t c : map.clusters) ++cluster_size[c];
  for (std::size_t c = 0; c < jp; ++c)
    if (cluster_size[c] == 0)
      throw ConfigError("graph_pool: cluster " + std::to_string(c) +
                        " is empty");
  const auto& xd = tp.data(x);
  std::vector<float> y(cch * tlen * jp, 0.0f);
  for (std::size_t c = 0; c < cch; ++c)
    for (std::size_t t = 0; t < tlen; ++t) {
      const float* xr = &xd[(c * tlen + t) * nj];
      float* yr = &y[(c * tlen + t) * jp];
      for (std::size_t j = 0; j < nj; ++j) yr[map.clusters[j]] += xr[j];
      for (std::size_t q = 0; q < jp; ++q) yr[q] /= cluster_size[q];
    }
  Var out = detail::next_var(tp);
  const std::vector<std::size_t>* clusters = &map.clusters;
  return tp.push({cch, tlen, jp}, std::move(y),
                 [x, cch, tlen, nj, jp, clusters,
                  cluster_size = std::move(cluster_size), out](Tape& t) {
                   const auto& g = t.grad(out);
                   auto& gx = t.grad(x);
                   for (std::size_t c = 0; c < cch; ++c)
                     for (std::size_t tt = 0; tt < tlen; ++tt) {
                       const float* gr = &g[(c * tlen + tt) * jp];
                       float* gxr = &gx[(c * tlen + tt) * nj];
                       for (std::size_t j = 0; j < nj; ++j) {
                         const std::size_t q = (*clusters)[j];
                         gxr[j] += gr[q] / cluster_size[q];
                       }
                     }
                 });
}

// Mean over joints. x [C x T x J] -> [C x T].
inline Var joint_mean(Tape& tp, Var x) {
  const Shape xs = tp.shape(x);
  if (xs.size() != 3)
    throw ShapeError("joint_mean: expected [C x T x J], got " + shape_str(xs));
  const std::size_t cch = xs[0], tlen = xs[1], nj = xs[2];
  const auto& xd = tp.data(x);
  std::vector<float> y(cch * tlen, 0.0f);
  for (std::size_t c = 0; c < cch; ++c)
    for (std::size_t t = 0; t < tlen; ++t) {
      const float* xr = &xd[(c * tlen + t) * nj];
      double s = 0.0;
      for (std::size_t j = 0; j < nj; ++j) s += xr[j];
      y[c * tlen + t] = static_cast<float>(s / nj);
    }
  Var out = detail::next_var(tp);
  return tp.push({cch, tlen}, std::move(y), [x, cch, tlen, nj, out](Tape& t) {
    const auto& g = t.grad(out);
    auto& gx = t.grad(x);
    for (std::size_t c = 0; c < cch; ++c)
      for (std::size_t tt = 0; tt < tlen; ++tt) {
        const float gv = g[c * tlen + tt] / static_cast<float>(nj);
        float* gxr = &gx[(c * tlen + tt) * nj];
        for (std::size_t j = 0; j < nj; ++j) gxr[j] += gv;
      }
  });
}

// Replicate per-frame features across joints. x [T x K] -> [K x T x J].
inline Var broadcast_joints(Tape& tp, Var x, std::size_t nj) {
  const Shape xs = tp.shape(x);
  if (xs.size() != 2)
    throw ShapeError("broadcast_joints: expected [T x K], got " +
                     shape_str(xs));
  const std::size_t tlen = xs[0], kk = xs[1];
  const auto& xd = tp.data(x);
  std::vector<float> y(kk * tlen * nj);
  for (std::size_t k = 0; k < kk; ++k)
    for (std::size_t t = 0; t < tlen; ++t) {
      const float v = xd[t * kk + k];
      float* yr = &y[(k * tlen + t) * nj];
      for (std::size_t j = 0; j < nj; ++j) yr[j] = v;
    }
  Var out = detail::next_var(tp);
  return tp.push({kk, tlen, nj}, std::move(y),
                 [x, tlen, kk, nj, out](Tape& t) {
                   const auto& g = t.grad(out);
                   auto& gx = t.grad(x);
                   for (std::size_t k = 0; k < kk; ++k)
                     for (std::size_t tt = 0; tt < tlen; ++tt) {
                       const float* gr = &g[(k * tlen + tt) * nj];
                       float s = 0.0f;
                       for (std::size_t j = 0; j < nj; ++j) s += gr[j];
                       gx[tt * kk + k] += s;
                     }
                 });
}

// Flatten channels and joints per frame. x [C x T x J] -> [T x (C*J)],
// channel-major within a row.
inline Var frame_flatten(Tape& tp, Var x) {
  const Shape xs = tp.shape(x);
  if (xs.size() != 3)
    throw ShapeError("frame_flatten: expected [C x T x J], got " +
                     shape_str(xs));
  const std::size_t cch = xs[0], tlen = xs[1], nj = xs[2];
  const auto& xd = tp.data(x);
  std::vector<float> y(tlen * cch * nj);
  for (std::size_t c = 0; c < cch; ++c)
    for (std::size_t t = 0; t < tlen; ++t)
      for (std::size_t j = 0; j < nj; ++j)
        y[t * (cch * nj) + c * nj + j] = xd[(c * tlen + t) * nj + j];
  Var out = detail::next_var(tp);
  return tp.push({tlen, cch * nj}, std::move(y),
                 [x, cch, tlen, nj, out](Tape& t) {
                   const auto& g = t.grad(out);
                   auto& gx = t.grad(x);
                   for (std::size_t c = 0; c < cch; ++c)
                     for (std::size_t tt = 0; tt < tlen; ++tt)
                       for (std::size_t j = 0; j < nj; ++j)
                         gx[(c * tlen + tt) * nj + j] +=
                             g[tt * (cch * nj) + c * nj + j];
                 });
}

}  // namespace harfuse
