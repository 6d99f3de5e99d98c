#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "harfuse/data.hpp"
#include "harfuse/errors.hpp"
#include "harfuse/graph.hpp"
#include "harfuse/ops.hpp"
#include "harfuse/rng.hpp"
#include "harfuse/tensor.hpp"

namespace harfuse {

struct TransformerConfig {
  std::size_t depth = 2;      // L
  std::size_t model_dim = 32; // d
  std::size_t heads = 4;      // H
  std::size_t ff_dim = 64;
  std::size_t max_t = 512;
};

struct ModelConfig {
  std::size_t stages = 4;  // S
  std::vector<std::size_t> gcn_channels{32, 32, 32, 32};
  std::size_t temporal_kernel = 5;  // k, odd
  TransformerConfig transformer;
  std::size_t num_classes = 0;  // K
  std::size_t fusion_hidden = 64;

  void validate() const {
    if (stages < 1) throw ConfigError("model: stages must be >= 1");
    if (gcn_channels.size() != stages)
      throw ConfigError("model: gcn_channels must list one width per stage");
    for (std::size_t c : gcn_channels)
      if (c == 0) throw ConfigError("model: gcn channel widths must be positive");
    if (temporal_kernel % 2 == 0)
      throw ConfigError("model: temporal_kernel must be odd");
    if (transformer.model_dim % transformer.heads != 0)
      throw ConfigError("model: model_dim must be divisible by heads");
    if (transformer.depth < 1 || transformer.ff_dim < 1)
      throw ConfigError("model: transformer depth/ff_dim must be positive");
    if (num_classes < 2) throw ConfigError("model: need at least 2 classes");
    if (fusion_hidden < 1) throw ConfigError("model: fusion_hidden must be positive");
  }
};

struct StageOutputs {
  std::vector<TensorValue> stages;  // S tensors of shape [T x K]
};

struct FeatureBundle {
  std::string model_id;  // "pogcn" | "transformer"
  TensorValue features;  // [T x F]
};

struct FusedFeature {
  TensorValue features;  // [T x (F1 + F2)], pogcn block first
};

namespace detail {

// uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) weights, zero biases.
inline TensorValue init_weight(Shape shape, std::size_t fan_in,
                               SplitMix64& rng) {
  const float bound = 1.0f / std::sqrt(static_cast<float>(fan_in));
  TensorValue t = TensorValue::zeros(std::move(shape), true);
  for (float& v : t.data) v = rng.uniform(-bound, bound);
  return t;
}

inline TensorValue init_const(Shape shape, float value) {
  TensorValue t = TensorValue::zeros(std::move(shape), true);
  for (float& v : t.data) v = value;
  return t;
}

}  // namespace detail

// Tensor views of a sequence.
inline TensorValue sequence_as_ctj(const SkeletonSequence& seq) {
  const std::size_t t_len = seq.length(), nj = seq.joints, cch = seq.channels;
  TensorValue x = TensorValue::zeros({cch, t_len, nj});
  for (std::size_t t = 0; t < t_len; ++t)
    for (std::size_t j = 0; j < nj; ++j)
      for (std::size_t c = 0; c < cch; ++c)
        x.data[(c * t_len + t) * nj + j] = seq.at(t, j, c);
  return x;
}

inline TensorValue sequence_as_frames(const SkeletonSequence& seq) {
  const std::size_t t_len = seq.length(), nj = seq.joints, cch = seq.channels;
  TensorValue x = TensorValue::zeros({t_len, nj * cch});
  for (std::size_t t = 0; t < t_len; ++t)
    for (std::size_t j = 0; j < nj; ++j)
      for (std::size_t c = 0; c < cch; ++c)
        x.data[t * (nj * cch) + j * cch + c] = seq.at(t, j, c);
  return x;
}

// graph conv -> ReLU -> temporal conv -> ReLU, residual when C_in == C_out
// (added before the final ReLU).
inline Var stgcn_block(Tape& tp, Var x, const NormalizedAdjacency& adj,
                       Var gc_w, Var gc_b, Var tc_w, Var tc_b) {
  const bool residual = tp.shape(gc_w)[0] == tp.shape(gc_w)[1] &&
                        tp.shape(x)[0] == tp.shape(gc_w)[1];
  Var h = graph_conv(tp, x, adj, gc_w);
  h = add_channel_bias(tp, h, gc_b);
  h = relu(tp, h);
  h = temporal_conv_joints(tp, h, tc_w);
  h = add_channel_bias(tp, h, tc_b);
  if (residual) h = add(tp, h, x);
  return relu(tp, h);
}

// softmax(Q K^T / sqrt(d_h)) V over full bidirectional context.
inline Var attention(Tape& tp, Var q, Var k, Var v) {
  const Shape qs = tp.shape(q);
  detail::check_same_shape(qs, tp.shape(k), "attention q/k");
  detail::check_same_shape(qs, tp.shape(v), "attention q/v");
  if (qs.size() != 2)
    throw ShapeError("attention: expected [T x d_h], got " + shape_str(qs));
  Var scores = matmul(tp, q, transpose2d(tp, k));
  scores = scale(tp, scores, 1.0f / std::sqrt(static_cast<float>(qs[1])));
  return matmul(tp, softmax(tp, scores, 1), v);
}

// ---------------------------------------------------------------------------
// PO-GCN: stage 1 reads raw coordinates on the full skeleton; the graph is
// pooled once, and every later stage refines the previous stage's per-frame
// class probabilities on the pooled graph.
// ---------------------------------------------------------------------------

class PoGcnModel {
 public:
  ModelConfig cfg;
  SkeletonTopology topo;
  NormalizedAdjacency adj_full;
  PoolingMap pool;
  NormalizedAdjacency adj_pooled;
  std::size_t input_channels = 0;
  ParamSet params;

  static PoGcnModel create(const ModelConfig& cfg, const SkeletonTopology& topo,
                           std::size_t input_channels, std::uint64_t seed) {
    cfg.validate();
    topo.validate();
    PoGcnModel m;
    m.cfg = cfg;
    m.topo = topo;
    m.adj_full = build_adjacency(topo);
    m.pool = build_pooling_map(topo);
    m.adj_pooled = build_adjacency(m.pool.cluster_count, m.pool.pooled_edges);
    m.input_channels = input_channels;
    SplitMix64 rng(seed);
    const std::size_t k = cfg.temporal_kernel;
    for (std::size_t s = 0; s < cfg.stages; ++s) {
      const std::size_t cin = (s == 0) ? input_channels : cfg.num_classes;
      const std::size_t ch = cfg.gcn_channels[s];
      const std::string p = "s" + std::to_string(s) + ".";
      m.params.add(p + "b1.gc_w", detail::init_weight({ch, cin}, cin, rng));
      m.params.add(p + "b1.gc_b", TensorValue::zeros({ch}));
      m.params.add(p + "b1.tc_w",
                   detail::init_weight({ch, ch, k}, ch * k, rng));
      m.params.add(p + "b1.tc_b", TensorValue::zeros({ch}));
      m.params.add(p + "b2.gc_w", detail::init_weight({ch, ch}, ch, rng));
      m.params.add(p + "b2.gc_b", TensorValue::zeros({ch}));
      m.params.add(p + "b2.tc_w",
                   detail::init_weight({ch, ch, k}, ch * k, rng));
      m.params.add(p + "b2.tc_b", TensorValue::zeros({ch}));
      m.params.add(p + "head_w",
                   detail::init_weight({cfg.num_classes, ch}, ch, rng));
      m.params.add(p + "head_b", TensorValue::zeros({cfg.num_classes}));
    }
    return m;
  }

  // Per-frame feature width of the flattened last hidden layer.
  std::size_t feature_dim() const {
    const std::size_t ch = cfg.gcn_channels[cfg.stages - 1];
    return ch * (cfg.stages == 1 ? topo.joint_count : pool.cluster_count);
  }

  struct ForwardVars {
    std::vector<Var> stage_logits;  // each [T x K]
    Var features;                   // [T x F]
  };

  ForwardVars forward(Tape& tp, const SkeletonSequence& seq) const {
    if (seq.joints != topo.joint_count)
      throw ShapeError("pogcn: sequence has " + std::to_string(seq.joints) +
                       " joints, topology expects " +
                       std::to_string(topo.joint_count));
    if (seq.channels != input_channels)
      throw ShapeError("pogcn: sequence has " + std::to_string(seq.channels) +
                       " channels, model expects " +
                       std::to_string(input_channels));
    if (seq.length() < cfg.temporal_kernel)
      throw DataError("pogcn: sequence '" + seq.id + "' has " +
                      std::to_string(seq.length()) +
                      " frames, shorter than temporal kernel " +
                      std::to_string(cfg.temporal_kernel));
    return forward_from(tp, tp.leaf(sequence_as_ctj(seq)));
  }

  // x: [C x T x J] leaf or upstream node on the full graph.
  ForwardVars forward_from(Tape& tp, Var x) const {
    ForwardVars out;
    Var h;
    for (std::size_t s = 0; s < cfg.stages; ++s) {
      const std::string p = "s" + std::to_string(s) + ".";
      const NormalizedAdjacency& adj = (s == 0) ? adj_full : adj_pooled;
      Var input = x;
      if (s > 0) {
        Var probs = softmax(tp, out.stage_logits.back(), 1);
        input = broadcast_joints(tp, probs, pool.cluster_count);
      }
      h = stgcn_block(tp, input, adj, tp.param(param(p + "b1.gc_w")),
                      tp.param(param(p + "b1.gc_b")),
                      tp.param(param(p + "b1.tc_w")),
                      tp.param(param(p + "b1.tc_b")));
      h = stgcn_block(tp, h, adj, tp.param(param(p + "b2.gc_w")),
                      tp.param(param(p + "b2.gc_b")),
                      tp.param(param(p + "b2.tc_w")),
                      tp.param(param(p + "b2.tc_b")));
      // 1x1 projection to class logits, then joint average: [T x K].
      const Shape hs = tp.shape(h);
      Var flat = reshape(tp, h, {hs[0], hs[1] * hs[2]});
      Var proj = matmul(tp, tp.param(param(p + "head_w")), flat);
      proj = reshape(tp, proj, {cfg.num_classes, hs[1], hs[2]});
      proj = add_channel_bias(tp, proj, tp.param(param(p + "head_b")));
      out.stage_logits.push_back(transpose2d(tp, joint_mean(tp, proj)));
    }
    out.features = frame_flatten(tp, h);
    return out;
  }

  StageOutputs stage_outputs(const SkeletonSequence& seq) const {
    Tape tp;
    ForwardVars fv = forward(tp, seq);
    StageOutputs so;
    for (Var v : fv.stage_logits)
      so.stages.emplace_back(tp.shape(v), tp.data(v));
    return so;
  }

  FeatureBundle extract(const SkeletonSequence& seq) const {
    Tape tp;
    ForwardVars fv = forward(tp, seq);
    return {"pogcn", TensorValue(tp.shape(fv.features), tp.data(fv.features))};
  }

 private:
  TensorValue& param(const std::string& name) {
    return params.at(name);
  }
  // forward() is const; parameters are read-shared during evaluation.
  TensorValue& param(const std::string& name) const {
    return const_cast<ParamSet&>(params).at(name);
  }
};

// ---------------------------------------------------------------------------
// Transformer encoder over per-frame joint coordinates.
// ---------------------------------------------------------------------------

inline TensorValue sinusoidal_positional_encoding(std::size_t t_len,
                                                  std::size_t dim) {
  TensorValue pe = TensorValue::zeros({t_len, dim});
  for (std::size_t t = 0; t < t_len; ++t)
    for (std::size_t i = 0; i * 2 < dim; ++i) {
      const double rate =
          std::pow(10000.0, -2.0 * static_cast<double>(i) /
                                static_cast<double>(dim));
      const double a = static_cast<double>(t) * rate;
      pe.data[t * dim + 2 * i] = static_cast<float>(std::sin(a));
      if (2 * i + 1 < dim)
        pe.data[t * dim + 2 * i + 1] = static_cast<float>(std::cos(a));
    }
  return pe;
}

class TransformerModel {
 public:
  ModelConfig cfg;
  std::size_t joints = 0;
  std::size_t input_channels = 0;
  ParamSet params;

  static TransformerModel create(const ModelConfig& cfg, std::size_t joints,
                                 std::size_t input_channels,
                                 std::uint64_t seed) {
    cfg.validate();
    TransformerModel m;
    m.cfg = cfg;
    m.joints = joints;
    m.input_channels = input_channels;
    const TransformerConfig& tc = cfg.transformer;
    const std::size_t in = joints * input_channels;
    const std::size_t d = tc.model_dim;
    SplitMix64 rng(seed);
    m.params.add("embed_w", detail::init_weight({in, d}, in, rng));
    m.params.add("embed_b", TensorValue::zeros({d}));
    for (std::size_t l = 0; l < tc.depth; ++l) {
      const std::string p = "l" + std::to_string(l) + ".";
      for (const char* name : {"wq", "wk", "wv", "wo"})
        m.params.add(p + name, detail::init_weight({d, d}, d, rng));
      for (const char* name : {"bq", "bk", "bv", "bo"})
        m.params.add(p + name, TensorValue::zeros({d}));
      m.params.add(p + "ln1_g", detail::init_const({d}, 1.0f));
      m.params.add(p + "ln1_b", TensorValue::zeros({d}));
      m.params.add(p + "ff1_w", detail::init_weight({d, tc.ff_dim}, d, rng));
      m.params.add(p + "ff1_b", TensorValue::zeros({tc.ff_dim}));
      m.params.add(p + "ff2_w",
                   detail::init_weight({tc.ff_dim, d}, tc.ff_dim, rng));
      m.params.add(p + "ff2_b", TensorValue::zeros({d}));
      m.params.add(p + "ln2_g", detail::init_const({d}, 1.0f));
      m.params.add(p + "ln2_b", TensorValue::zeros({d}));
    }
    m.params.add("head_w", detail::init_weight({d, cfg.num_classes}, d, rng));
    m.params.add("head_b", TensorValue::zeros({cfg.num_classes}));
    return m;
  }

  std::size_t feature_dim() const { return cfg.transformer.model_dim; }

  struct ForwardVars {
    Var logits;    // [T x K]
    Var features;  // [T x d], pre-head hidden state
  };

  ForwardVars forward(Tape& tp, const SkeletonSequence& seq) const {
    if (seq.joints != joints || seq.channels != input_channels)
      throw ShapeError("transformer: sequence dims " +
                       std::to_string(seq.joints) + "x" +
                       std::to_string(seq.channels) + " do not match model " +
                       std::to_string(joints) + "x" +
                       std::to_string(input_channels));
    if (seq.length() > cfg.transformer.max_t)
      throw DataError("transformer: sequence '" + seq.id + "' has " +
                      std::to_string(seq.length()) +
                      " frames, above max_t = " +
                      std::to_string(cfg.transformer.max_t));
    return forward_from(tp, tp.leaf(sequence_as_frames(seq)), seq.length());
  }

  ForwardVars forward_from(Tape& tp, Var x, std::size_t t_len) const {
    const TransformerConfig& tc = cfg.transformer;
    const std::size_t d = tc.model_dim;
    const std::size_t dh = d / tc.heads;
    Var h = add_rowvec(tp, matmul(tp, x, tp.param(param("embed_w"))),
                       tp.param(param("embed_b")));
    h = add(tp, h, tp.leaf(sinusoidal_positional_encoding(t_len, d)));
    for (std::size_t l = 0; l < tc.depth; ++l) {
      const std::string p = "l" + std::to_string(l) + ".";
      Var q = add_rowvec(tp, matmul(tp, h, tp.param(param(p + "wq"))),
                         tp.param(param(p + "bq")));
      Var k = add_rowvec(tp, matmul(tp, h, tp.param(param(p + "wk"))),
                         tp.param(param(p + "bk")));
      Var v = add_rowvec(tp, matmul(tp, h, tp.param(param(p + "wv"))),
                         tp.param(param(p + "bv")));
      std::vector<Var> heads;
      heads.reserve(tc.heads);
      for (std::size_t i = 0; i < tc.heads; ++i)
        heads.push_back(attention(tp, col_slice(tp, q, i * dh, dh),
                                  col_slice(tp, k, i * dh, dh),
                                  col_slice(tp, v, i * dh, dh)));
      Var att = add_rowvec(
          tp, matmul(tp, concat(tp, heads, 1), tp.param(param(p + "wo"))),
          tp.param(param(p + "bo")));
      h = layer_norm(tp, add(tp, h, att), tp.param(param(p + "ln1_g")),
                     tp.param(param(p + "ln1_b")));
      Var f = relu(tp, add_rowvec(tp, matmul(tp, h, tp.param(param(p + "ff1_w"))),
                                  tp.param(param(p + "ff1_b"))));
      f = add_rowvec(tp, matmul(tp, f, tp.param(param(p + "ff2_w"))),
                     tp.param(param(p + "ff2_b")));
      h = layer_norm(tp, add(tp, h, f), tp.param(param(p + "ln2_g")),
                     tp.param(param(p + "ln2_b")));
    }
    ForwardVars out;
    out.features = h;
    out.logits = add_rowvec(tp, matmul(tp, h, tp.param(param("head_w"))),
                            tp.param(param("head_b")));
    return out;
  }

  FeatureBundle extract(const SkeletonSequence& seq) const {
    Tape tp;
    ForwardVars fv = forward(tp, seq);
    return {"transformer",
            TensorValue(tp.shape(fv.features), tp.data(fv.features))};
  }

 private:
  TensorValue& param(const std::string& name) {
    return params.at(name);
  }
  TensorValue& param(const std::string& name) const {
    return const_cast<ParamSet&>(params).at(name);
  }
};

// ---------------------------------------------------------------------------
// Last-layer fusion: per-frame concatenation, pogcn block first.
// ---------------------------------------------------------------------------

inline FusedFeature fuse(const FeatureBundle& a, const FeatureBundle& b) {
  if (a.features.shape[0] != b.features.shape[0])
    throw DataError("fuse: feature length mismatch (" +
                    std::to_string(a.features.shape[0]) + " vs " +
                    std::to_string(b.features.shape[0]) + " frames)");
  const std::size_t t_len = a.features.shape[0];
  const std::size_t f1 = a.features.shape[1], f2 = b.features.shape[1];
  FusedFeature out;
  out.features = TensorValue::zeros({t_len, f1 + f2});
  for (std::size_t t = 0; t < t_len; ++t) {
    for (std::size_t i = 0; i < f1; ++i)
      out.features.data[t * (f1 + f2) + i] = a.features.data[t * f1 + i];
    for (std::size_t i = 0; i < f2; ++i)
      out.features.data[t * (f1 + f2) + f1 + i] = b.features.data[t * f2 + i];
  }
  return out;
}

// batch norm -> dense(hidden, ReLU) -> dense(K). Softmax stays in the
// loss/metrics. Frames form the batch dimension.
class FusionHead {
 public:
  std::size_t in_dim = 0, hidden = 0, num_classes = 0;
  ParamSet params;
  BatchNormState bn_state;

  static FusionHead create(std::size_t in_dim, std::size_t hidden,
                           std::size_t num_classes, std::uint64_t seed) {
    FusionHead h;
    h.in_dim = in_dim;
    h.hidden = hidden;
    h.num_classes = num_classes;
    h.bn_state = BatchNormState(in_dim);
    SplitMix64 rng(seed);
    h.params.add("bn_gamma", detail::init_const({in_dim}, 1.0f));
    h.params.add("bn_beta", TensorValue::zeros({in_dim}));
    h.params.add("fc1_w", detail::init_weight({in_dim, hidden}, in_dim, rng));
    h.params.add("fc1_b", TensorValue::zeros({hidden}));
    h.params.add("fc2_w", detail::init_weight({hidden, num_classes}, hidden, rng));
    h.params.add("fc2_b", TensorValue::zeros({num_classes}));
    return h;
  }

  // x: [N x in_dim]; returns logits [N x K]. Train mode needs N >= 2.
  Var forward(Tape& tp, Var x, bool train) {
    Var h = batch_norm(tp, x, tp.param(params.at("bn_gamma")),
                       tp.param(params.at("bn_beta")), bn_state, train);
    h = relu(tp, add_rowvec(tp, matmul(tp, h, tp.param(params.at("fc1_w"))),
                            tp.param(params.at("fc1_b"))));
    return add_rowvec(tp, matmul(tp, h, tp.param(params.at("fc2_w"))),
                      tp.param(params.at("fc2_b")));
  }
};

// Per-frame argmax of a [T x K] logits tensor.
inline std::vector<std::size_t> argmax_rows(const Shape& shape,
                                            const std::vector<float>& data) {
  const std::size_t t_len = shape[0], k = shape[1];
  std::vector<std::size_t> out(t_len);
  for (std::size_t t = 0; t < t_len; ++t) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < k; ++c)
      if (data[t * k + c] > data[t * k + best]) best = c;
    out[t] = best;
  }
  return out;
}

}  // namespace harfuse
