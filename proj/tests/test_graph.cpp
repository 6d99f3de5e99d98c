#include <doctest.h>

#include <cmath>
#include <vector>

#include "harfuse/data.hpp"
#include "harfuse/grad_check.hpp"
#include "harfuse/graph.hpp"
#include "harfuse/rng.hpp"

using namespace harfuse;

TEST_CASE("build_adjacency hand-computed cases") {
  SUBCASE("2 joints, one edge") {
    auto adj = build_adjacency(2, {{0, 1}});
    for (float v : adj.matrix) CHECK(v == doctest::Approx(0.5).epsilon(1e-6));
  }
  SUBCASE("3-joint chain") {
    auto adj = build_adjacency(3, {{0, 1}, {1, 2}});
    CHECK(adj.matrix[0 * 3 + 0] == doctest::Approx(0.5).epsilon(1e-6));
    CHECK(adj.matrix[1 * 3 + 1] == doctest::Approx(1.0 / 3.0).epsilon(1e-6));
    CHECK(adj.matrix[2 * 3 + 2] == doctest::Approx(0.5).epsilon(1e-6));
    CHECK(adj.matrix[0 * 3 + 1] ==
          doctest::Approx(1.0 / std::sqrt(6.0)).epsilon(1e-6));
    CHECK(adj.matrix[0 * 3 + 2] == doctest::Approx(0.0));
  }
  SUBCASE("no edges is the identity") {
    auto adj = build_adjacency(3, {});
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 3; ++j)
        CHECK(adj.matrix[i * 3 + j] == doctest::Approx(i == j ? 1.0 : 0.0));
  }
}

TEST_CASE("adjacency invariants on random topologies") {
  SplitMix64 rng(99);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t joints = 2 + rng.next_below(10);
    std::vector<std::pair<std::size_t, std::size_t>> edges;
    for (std::size_t i = 0; i < joints; ++i)
      for (std::size_t j = i + 1; j < joints; ++j)
        if (rng.next_below(3) == 0) edges.emplace_back(i, j);
    auto adj = build_adjacency(joints, edges);

    // Symmetric, entries in [0,1], zero off the edge pattern.
    for (std::size_t i = 0; i < joints; ++i)
      for (std::size_t j = 0; j < joints; ++j) {
        const float v = adj.matrix[i * joints + j];
        CHECK(v >= 0.0f);
        CHECK(v <= 1.0f);
        CHECK(v == doctest::Approx(adj.matrix[j * joints + i]).epsilon(1e-6));
      }

    // Direct reconstruction of D^{-1/2}(A+I)D^{-1/2}.
    std::vector<double> a((joints) * (joints), 0.0);
    for (std::size_t i = 0; i < joints; ++i) a[i * joints + i] = 1.0;
    for (auto [x, y] : edges) a[x * joints + y] = a[y * joints + x] = 1.0;
    std::vector<double> deg(joints, 0.0);
    for (std::size_t i = 0; i < joints; ++i)
      for (std::size_t j = 0; j < joints; ++j) deg[i] += a[i * joints + j];
    for (std::size_t i = 0; i < joints; ++i)
      for (std::size_t j = 0; j < joints; ++j) {
        const double expected =
            a[i * joints + j] / std::sqrt(deg[i] * deg[j]);
        CHECK(adj.matrix[i * joints + j] ==
              doctest::Approx(expected).epsilon(1e-6));
      }
  }
}

TEST_CASE("regular graph keeps the all-ones vector fixed") {
  // 4-cycle: every node has degree 2, so rows of the normalized operator
  // sum to 1 and constant features are preserved.
  auto adj = build_adjacency(4, {{0, 1}, {1, 2}, {2, 3}, {3, 0}});
  for (std::size_t i = 0; i < 4; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < 4; ++j) s += adj.matrix[i * 4 + j];
    CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("pooled edges derived from cross-cluster original edges") {
  auto map = build_pooling_map(default_topology());
  CHECK(map.cluster_count == 4);
  std::vector<std::pair<std::size_t, std::size_t>> expected = {
      {0, 1}, {0, 2}, {1, 3}};
  CHECK(map.pooled_edges == expected);
}

TEST_CASE("graph_conv identity case") {
  NormalizedAdjacency eye;
  eye.joints = 3;
  eye.matrix = {1, 0, 0, 0, 1, 0, 0, 0, 1};
  Tape tp;
  std::vector<float> xd = {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12};
  Var x = tp.leaf({2, 2, 3}, xd);
  Var w = tp.leaf({2, 2}, {1, 0, 0, 1});
  CHECK(tp.data(graph_conv(tp, x, eye, w)) == xd);
}

TEST_CASE("graph_conv preserves constant features on the 2-joint graph") {
  auto adj = build_adjacency(2, {{0, 1}});  // rows sum to 1
  Tape tp;
  Var x = tp.leaf({1, 2, 2}, {3, 3, 5, 5});
  Var w = tp.leaf({1, 1}, {1});
  const auto& y = tp.data(graph_conv(tp, x, adj, w));
  CHECK(y[0] == doctest::Approx(3.0));
  CHECK(y[1] == doctest::Approx(3.0));
  CHECK(y[2] == doctest::Approx(5.0));
  CHECK(y[3] == doctest::Approx(5.0));
}

TEST_CASE("graph_conv gradient vs finite differences") {
  auto adj = build_adjacency(3, {{0, 1}, {1, 2}});
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    SplitMix64 rng(seed);
    ParamSet params;
    TensorValue x = TensorValue::zeros({2, 2, 3}, true);
    TensorValue w = TensorValue::zeros({2, 2}, true);
    for (float& v : x.data) v = rng.uniform(-1, 1);
    for (float& v : w.data) v = rng.uniform(-1, 1);
    TensorValue& px = params.add("x", x);
    TensorValue& pw = params.add("w", w);
    CHECK(grad_check(
              [&](Tape& tp) {
                Var y = graph_conv(tp, tp.param(px), adj, tp.param(pw));
                // weight the output so every element carries distinct gradient
                Var f = frame_flatten(tp, y);
                Var w = tp.leaf({2, 6}, {1, -2, 3, 0.5, -1, 2,
                                         2, 1, -0.5, 3, 1, -2});
                return sum(tp, matmul(tp, f, transpose2d(tp, w)));
              },
              params) < 2e-3);
  }
}

TEST_CASE("graph_pool mean and identity cases") {
  PoolingMap pairs;
  pairs.clusters = {0, 0, 1, 1};
  pairs.cluster_count = 2;
  Tape tp;
  Var x = tp.leaf({1, 1, 4}, {1, 3, 5, 7});
  CHECK(tp.data(graph_pool(tp, x, pairs)) == std::vector<float>{2, 6});

  PoolingMap ident;
  ident.clusters = {0, 1, 2, 3};
  ident.cluster_count = 4;
  CHECK(tp.data(graph_pool(tp, x, ident)) == std::vector<float>{1, 3, 5, 7});
}

TEST_CASE("graph_pool backward splits gradient by cluster size") {
  PoolingMap pairs;
  pairs.clusters = {0, 0, 1, 1};
  pairs.cluster_count = 2;
  ParamSet params;
  TensorValue& x = params.add("x", TensorValue({1, 1, 4}, {1, 3, 5, 7}, true));
  Tape tp;
  tp.backward(sum(tp, graph_pool(tp, tp.param(x), pairs)));
  CHECK(x.grad == std::vector<float>{0.5, 0.5, 0.5, 0.5});

  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    SplitMix64 rng(seed);
    ParamSet p2;
    TensorValue t = TensorValue::zeros({2, 3, 4}, true);
    for (float& v : t.data) v = rng.uniform(-1, 1);
    TensorValue& px = p2.add("x", t);
    CHECK(grad_check(
              [&](Tape& tp2) {
                Var y = graph_pool(tp2, tp2.param(px), pairs);
                return sum(tp2, relu(tp2, y));
              },
              p2) < 2e-3);
  }
}

TEST_CASE("joint_mean, broadcast_joints, frame_flatten") {
  Tape tp;
  Var x = tp.leaf({2, 1, 2}, {1, 3, 10, 20});
  CHECK(tp.data(joint_mean(tp, x)) == std::vector<float>{2, 15});

  Var probs = tp.leaf({2, 3}, {1, 2, 3, 4, 5, 6});
  Var b = broadcast_joints(tp, probs, 2);
  CHECK(tp.shape(b) == Shape{3, 2, 2});
  // class c, frame t, joint j = probs[t][c]
  CHECK(tp.data(b) == std::vector<float>{1, 1, 4, 4, 2, 2, 5, 5, 3, 3, 6, 6});

  Var h = tp.leaf({2, 2, 2}, {1, 2, 3, 4, 5, 6, 7, 8});  // [C x T x J]
  Var f = frame_flatten(tp, h);
  CHECK(tp.shape(f) == Shape{2, 4});
  // frame t row = channel-major (c0 joints, c1 joints)
  CHECK(tp.data(f) == std::vector<float>{1, 2, 5, 6, 3, 4, 7, 8});
}

TEST_CASE("topology hash distinguishes topologies") {
  auto a = build_adjacency(3, {{0, 1}, {1, 2}});
  auto b = build_adjacency(3, {{0, 1}, {0, 2}});
  CHECK(a.source_topology_hash != b.source_topology_hash);
  auto a2 = build_adjacency(3, {{0, 1}, {1, 2}});
  CHECK(a.source_topology_hash == a2.source_topology_hash);
}
