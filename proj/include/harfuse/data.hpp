#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "harfuse/errors.hpp"
#include "harfuse/rng.hpp"

namespace harfuse {

using json = nlohmann::json;

struct SkeletonTopology {
  std::size_t joint_count = 0;
  std::vector<std::pair<std::size_t, std::size_t>> edges;
  std::vector<std::size_t> pooling_map;  // cluster id per joint

  std::size_t cluster_count() const {
    std::size_t m = 0;
    for (std::size_t c : pooling_map) m = std::max(m, c + 1);
    return m;
  }

  void validate() const {
    if (joint_count == 0) throw ConfigError("topology: joint_count must be positive");
    std::set<std::pair<std::size_t, std::size_t>> seen;
    for (auto [a, b] : edges) {
      if (a >= joint_count || b >= joint_count)
        throw ConfigError("topology: edge (" + std::to_string(a) + "," +
                          std::to_string(b) + ") out of range for " +
                          std::to_string(joint_count) + " joints");
      if (a == b)
        throw ConfigError("topology: self-edge at joint " + std::to_string(a));
      auto key = std::minmax(a, b);
      if (!seen.insert(key).second)
        throw ConfigError("topology: duplicate edge (" + std::to_string(a) +
                          "," + std::to_string(b) + ")");
    }
    if (pooling_map.size() != joint_count)
      throw ConfigError("topology: pooling_map must list one cluster per joint");
    const std::size_t jp = cluster_count();
    if (jp >= joint_count)
      throw ConfigError("topology: pooling must reduce the graph (J' < J)");
    std::vector<bool> covered(jp, false);
    for (std::size_t c : pooling_map) covered[c] = true;
    for (std::size_t c = 0; c < jp; ++c)
      if (!covered[c])
        throw ConfigError("topology: pooling cluster " + std::to_string(c) +
                          " is empty");
  }
};

// 8-joint chain with branches, pooled pairwise down to 4 clusters.
inline SkeletonTopology default_topology() {
  SkeletonTopology t;
  t.joint_count = 8;
  t.edges = {{0, 1}, {1, 2}, {2, 3}, {1, 4}, {1, 5}, {3, 6}, {3, 7}};
  t.pooling_map = {0, 0, 1, 1, 2, 2, 3, 3};
  return t;
}

struct LabelCatalog {
  std::vector<std::string> names;

  std::size_t size() const { return names.size(); }

  void validate() const {
    if (names.size() < 2)
      throw ConfigError("catalog: need at least 2 classes, got " +
                        std::to_string(names.size()));
    std::set<std::string> s(names.begin(), names.end());
    if (s.size() != names.size())
      throw ConfigError("catalog: class names must be distinct");
  }

  int index_of(const std::string& name) const {
    for (std::size_t i = 0; i < names.size(); ++i)
      if (names[i] == name) return static_cast<int>(i);
    return -1;
  }
};

struct SkeletonSequence {
  std::string id;
  double sampling_rate_hz = 0.0;
  std::size_t joints = 0;    // J
  std::size_t channels = 0;  // C
  std::vector<float> frames;        // T x J x C, row-major
  std::vector<std::size_t> labels;  // length T

  std::size_t length() const { return labels.size(); }

  float at(std::size_t t, std::size_t j, std::size_t c) const {
    return frames[(t * joints + j) * channels + c];
  }
  float& at(std::size_t t, std::size_t j, std::size_t c) {
    return frames[(t * joints + j) * channels + c];
  }
};

struct DatasetSplit {
  std::vector<SkeletonSequence> train;
  std::vector<SkeletonSequence> test;
  std::uint64_t seed = 0;
};

// ---------------------------------------------------------------------------
// JSONL ingestion. One sequence object per line:
//   {"id": str, "sampling_rate_hz": num, "frames": [[[num]*C]*J]*T,
//    "labels": [str]*T}
// Any invalid line rejects the whole file, reporting the line number.
// ---------------------------------------------------------------------------

inline SkeletonSequence parse_sequence_json(const json& obj,
                                            const LabelCatalog& catalog,
                                            std::size_t line_no) {
  auto fail = [line_no](const std::string& msg) -> void {
    throw DataError("line " + std::to_string(line_no) + ": " + msg);
  };
  if (!obj.is_object()) fail("expected a JSON object");
  for (const auto& [key, value] : obj.items()) {
    (void)value;
    if (key != "id" && key != "sampling_rate_hz" && key != "frames" &&
        key != "labels")
      fail("unknown key '" + key + "'");
  }
  if (!obj.contains("id") || !obj["id"].is_string()) fail("missing string 'id'");
  if (!obj.contains("sampling_rate_hz") || !obj["sampling_rate_hz"].is_number())
    fail("missing numeric 'sampling_rate_hz'");
  if (!obj.contains("frames") || !obj["frames"].is_array())
    fail("missing array 'frames'");
  if (!obj.contains("labels") || !obj["labels"].is_array())
    fail("missing array 'labels'");

  SkeletonSequence seq;
  seq.id = obj["id"].get<std::string>();
  seq.sampling_rate_hz = obj["sampling_rate_hz"].get<double>();
  if (!(seq.sampling_rate_hz > 0.0) || !std::isfinite(seq.sampling_rate_hz))
    fail("sampling_rate_hz must be a positive finite number");

  const json& frames = obj["frames"];
  const std::size_t t_len = frames.size();
  if (t_len == 0) fail("frames must be non-empty");
  if (obj["labels"].size() != t_len)
    fail("labels length " + std::to_string(obj["labels"].size()) +
         " != frame count " + std::to_string(t_len));

  for (std::size_t t = 0; t < t_len; ++t) {
    const json& fr = frames[t];
    if (!fr.is_array()) fail("frame " + std::to_string(t) + " is not an array");
    if (t == 0) {
      seq.joints = fr.size();
      if (seq.joints == 0) fail("frame 0 has no joints");
      if (!fr[0].is_array()) fail("joint entries must be coordinate arrays");
      seq.channels = fr[0].size();
      if (seq.channels == 0) fail("joint 0 has no coordinate channels");
      seq.frames.resize(t_len * seq.joints * seq.channels);
    }
    if (fr.size() != seq.joints)
      fail("frame " + std::to_string(t) + " has " +
           std::to_string(fr.size()) + " joints, expected " +
           std::to_string(seq.joints));
    for (std::size_t j = 0; j < seq.joints; ++j) {
      const json& joint = fr[j];
      if (!joint.is_array() || joint.size() != seq.channels)
        fail("frame " + std::to_string(t) + " joint " + std::to_string(j) +
             " is ragged (expected " + std::to_string(seq.channels) +
             " channels)");
      for (std::size_t c = 0; c < seq.channels; ++c) {
        if (!joint[c].is_number())
          fail("non-numeric coordinate at frame " + std::to_string(t));
        const double v = joint[c].get<double>();
        if (!std::isfinite(v)) fail("non-finite coordinate at frame " +
                                    std::to_string(t));
        seq.at(t, j, c) = static_cast<float>(v);
      }
    }
  }
  seq.labels.resize(t_len);
  for (std::size_t t = 0; t < t_len; ++t) {
    if (!obj["labels"][t].is_string())
      fail("label at frame " + std::to_string(t) + " is not a string");
    const std::string name = obj["labels"][t].get<std::string>();
    const int idx = catalog.index_of(name);
    if (idx < 0) fail("unknown label '" + name + "'");
    seq.labels[t] = static_cast<std::size_t>(idx);
  }
  return seq;
}

inline std::vector<SkeletonSequence> load_jsonl(const std::string& path,
                                                const LabelCatalog& catalog) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open dataset file '" + path + "'");
  std::vector<SkeletonSequence> seqs;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json obj;
    try {
      obj = json::parse(line);
    } catch (const json::parse_error& e) {
      throw DataError("line " + std::to_string(line_no) + ": " + e.what());
    }
    seqs.push_back(parse_sequence_json(obj, catalog, line_no));
  }
  return seqs;
}

inline json sequence_to_json(const SkeletonSequence& seq,
                             const LabelCatalog& catalog) {
  json frames = json::array();
  for (std::size_t t = 0; t < seq.length(); ++t) {
    json fr = json::array();
    for (std::size_t j = 0; j < seq.joints; ++j) {
      json joint = json::array();
      for (std::size_t c = 0; c < seq.channels; ++c)
        joint.push_back(seq.at(t, j, c));
      fr.push_back(std::move(joint));
    }
    frames.push_back(std::move(fr));
  }
  json labels = json::array();
  for (std::size_t lab : seq.labels) labels.push_back(catalog.names.at(lab));
  return json{{"id", seq.id},
              {"sampling_rate_hz", seq.sampling_rate_hz},
              {"frames", std::move(frames)},
              {"labels", std::move(labels)}};
}

inline void write_jsonl(const std::string& path,
                        const std::vector<SkeletonSequence>& seqs,
                        const LabelCatalog& catalog) {
  std::ofstream out(path, std::ios::binary);  // LF endings everywhere
  if (!out) throw DataError("cannot write dataset file '" + path + "'");
  for (const auto& seq : seqs) out << sequence_to_json(seq, catalog) << '\n';
}

inline LabelCatalog load_catalog(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open catalog file '" + path + "'");
  json obj;
  try {
    obj = json::parse(in);
  } catch (const json::parse_error& e) {
    throw DataError(std::string("catalog: ") + e.what());
  }
  if (!obj.is_object() || !obj.contains("classes") || !obj["classes"].is_array())
    throw DataError("catalog: expected {\"classes\": [...]}");
  LabelCatalog cat;
  for (const auto& n : obj["classes"]) {
    if (!n.is_string()) throw DataError("catalog: class names must be strings");
    cat.names.push_back(n.get<std::string>());
  }
  cat.validate();
  return cat;
}

inline void save_catalog(const std::string& path, const LabelCatalog& cat) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write catalog file '" + path + "'");
  out << json{{"classes", cat.names}} << '\n';
}

inline SkeletonTopology load_topology(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open topology file '" + path + "'");
  json obj;
  try {
    obj = json::parse(in);
  } catch (const json::parse_error& e) {
    throw DataError(std::string("topology: ") + e.what());
  }
  if (!obj.is_object() || !obj.contains("joint_count") ||
      !obj.contains("edges") || !obj.contains("pooling_map"))
    throw DataError("topology: expected joint_count, edges, pooling_map");
  SkeletonTopology t;
  t.joint_count = obj["joint_count"].get<std::size_t>();
  for (const auto& e : obj["edges"]) {
    if (!e.is_array() || e.size() != 2)
      throw DataError("topology: edges must be [i, j] pairs");
    t.edges.emplace_back(e[0].get<std::size_t>(), e[1].get<std::size_t>());
  }
  t.pooling_map = obj["pooling_map"].get<std::vector<std::size_t>>();
  t.validate();
  return t;
}

inline void save_topology(const std::string& path, const SkeletonTopology& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write topology file '" + path + "'");
  json edges = json::array();
  for (auto [a, b] : t.edges) edges.push_back(json::array({a, b}));
  out << json{{"joint_count", t.joint_count},
              {"edges", std::move(edges)},
              {"pooling_map", t.pooling_map}}
      << '\n';
}

// ---------------------------------------------------------------------------
// Resampling. Coordinates are linearly interpolated on an endpoint-aligned
// grid; labels are categorical and taken from the nearest original frame.
// ---------------------------------------------------------------------------

inline SkeletonSequence resample(const SkeletonSequence& seq, double target_hz) {
  if (!(target_hz > 0.0))
    throw ConfigError("resample: target rate must be positive");
  if (target_hz == seq.sampling_rate_hz) return seq;  // bit-identical

  const std::size_t t_old = seq.length();
  const std::size_t t_new = std::max<std::size_t>(
      1, static_cast<std::size_t>(
             std::llround(static_cast<double>(t_old) * target_hz /
                          seq.sampling_rate_hz)));
  SkeletonSequence out;
  out.id = seq.id;
  out.sampling_rate_hz = target_hz;
  out.joints = seq.joints;
  out.channels = seq.channels;
  out.frames.resize(t_new * seq.joints * seq.channels);
  out.labels.resize(t_new);
  for (std::size_t i = 0; i < t_new; ++i) {
    const double pos =
        (t_new == 1 || t_old == 1)
            ? 0.0
            : static_cast<double>(i) * static_cast<double>(t_old - 1) /
                  static_cast<double>(t_new - 1);
    const std::size_t lo = static_cast<std::size_t>(pos);
    const std::size_t hi = std::min(lo + 1, t_old - 1);
    const double w = pos - static_cast<double>(lo);
    for (std::size_t j = 0; j < seq.joints; ++j)
      for (std::size_t c = 0; c < seq.channels; ++c)
        out.at(i, j, c) = static_cast<float>((1.0 - w) * seq.at(lo, j, c) +
                                             w * seq.at(hi, j, c));
    out.labels[i] = seq.labels[static_cast<std::size_t>(std::llround(pos))];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic motion generator. Class k moves at f_k = 0.5 + 0.25k Hz with
// class-dependent per-joint amplitudes and a small per-channel offset, plus
// Gaussian noise. Each sequence concatenates 2-4 class segments so segmental
// metrics see transitions. Pure function of its spec.
// ---------------------------------------------------------------------------

struct SyntheticSpec {
  std::size_t num_classes = 5;       // K
  std::size_t joints = 8;            // J
  std::size_t channels = 3;          // C
  std::size_t frames = 100;          // T
  std::size_t per_class_count = 40;  // sequences per class
  float noise_std = 0.05f;
  std::uint64_t seed = 1;

  void validate() const {
    if (num_classes < 2) throw ConfigError("synthetic: K must be >= 2");
    if (per_class_count < 2)
      throw ConfigError("synthetic: per_class_count must be >= 2");
    if (joints == 0 || channels == 0 || frames == 0)
      throw ConfigError("synthetic: J, C, T must be positive");
  }
};

// The generator always emits at this rate; class frequencies were chosen so
// every class has an integral period in frames at 10 Hz.
inline constexpr double kSyntheticRateHz = 10.0;

namespace detail {

// Smallest L with f_k * L / rate integral, for f_k = (2+k)/4 at 10 Hz:
// (2+k) L / 40 integral.
inline std::size_t class_period_frames(std::size_t k) {
  const std::size_t num = 2 + k;
  std::size_t g = std::gcd(num, static_cast<std::size_t>(40));
  return 40 / g;
}

inline float synthetic_sample(std::size_t klass, std::size_t tau,
                              std::size_t j, std::size_t c,
                              const SyntheticSpec& spec) {
  const double f = 0.5 + 0.25 * static_cast<double>(klass);
  const std::size_t period = class_period_frames(klass);
  const double turn = f * static_cast<double>(tau % period) / kSyntheticRateHz;
  const double phase = 6.283185307179586 *
                       static_cast<double>(j * spec.channels + c) /
                       static_cast<double>(spec.joints * spec.channels);
  const double amp =
      1.0 + 0.3 * std::cos(6.283185307179586 *
                           static_cast<double>(klass * spec.joints + j) /
                           static_cast<double>(spec.num_classes * spec.joints));
  const double offset =
      0.4 * std::sin(6.283185307179586 *
                     (static_cast<double>(klass * spec.channels + c) + 0.5) /
                     static_cast<double>(spec.num_classes * spec.channels));
  return static_cast<float>(
      amp * std::sin(6.283185307179586 * turn + phase) + offset);
}

}  // namespace detail

inline std::pair<DatasetSplit, LabelCatalog> generate_synthetic(
    const SyntheticSpec& spec) {
  spec.validate();
  LabelCatalog catalog;
  for (std::size_t k = 0; k < spec.num_classes; ++k)
    catalog.names.push_back("class_" + std::to_string(k));

  DatasetSplit split;
  split.seed = spec.seed;
  SplitMix64 rng(spec.seed);
  const std::size_t n_train_per_class =
      (spec.per_class_count * 8) / 10;  // 80/20
  std::size_t global_index = 0;
  for (std::size_t klass = 0; klass < spec.num_classes; ++klass) {
    for (std::size_t i = 0; i < spec.per_class_count; ++i, ++global_index) {
      SkeletonSequence seq;
      {
        std::ostringstream id;
        id << "syn_" << global_index;
        seq.id = id.str();
      }
      seq.sampling_rate_hz = kSyntheticRateHz;
      seq.joints = spec.joints;
      seq.channels = spec.channels;
      seq.frames.resize(spec.frames * spec.joints * spec.channels);
      seq.labels.resize(spec.frames);

      const std::size_t n_seg =
          std::min<std::size_t>(2 + rng.next_below(3), spec.frames);
      const std::size_t min_len =
          std::max<std::size_t>(1, spec.frames / (2 * n_seg));
      std::vector<std::size_t> seg_len(n_seg, min_len);
      std::size_t rest = spec.frames - n_seg * min_len;
      for (std::size_t s = 0; s + 1 < n_seg; ++s) {
        const std::size_t take = rng.next_below(rest + 1);
        seg_len[s] += take;
        rest -= take;
      }
      seg_len[n_seg - 1] += rest;

      std::vector<std::size_t> seg_class(n_seg);
      seg_class[0] = klass;  // the class this sequence is counted under
      for (std::size_t s = 1; s < n_seg; ++s) {
        std::size_t c = rng.next_below(spec.num_classes - 1);
        if (c >= seg_class[s - 1]) ++c;  // adjacent segments differ
        seg_class[s] = c;
      }

      std::size_t t = 0;
      for (std::size_t s = 0; s < n_seg; ++s) {
        for (std::size_t tau = 0; tau < seg_len[s]; ++tau, ++t) {
          seq.labels[t] = seg_class[s];
          for (std::size_t j = 0; j < spec.joints; ++j)
            for (std::size_t c = 0; c < spec.channels; ++c) {
              float v = detail::synthetic_sample(seg_class[s], tau, j, c, spec);
              if (spec.noise_std > 0.0f) v += spec.noise_std * rng.normal();
              seq.at(t, j, c) = v;
            }
        }
      }

      if (i < n_train_per_class)
        split.train.push_back(std::move(seq));
      else
        split.test.push_back(std::move(seq));
    }
  }
  return {std::move(split), std::move(catalog)};
}

// ---------------------------------------------------------------------------
// Batching: deterministic shuffle keyed on (seed, epoch); the final partial
// batch is kept.
// ---------------------------------------------------------------------------

inline std::vector<std::vector<std::size_t>> make_batches(
    std::size_t n_items, std::size_t batch_size, std::uint64_t seed,
    std::uint64_t epoch) {
  if (batch_size < 1) throw ConfigError("batch size must be >= 1");
  std::vector<std::size_t> order(n_items);
  std::iota(order.begin(), order.end(), 0);
  SplitMix64 rng(SplitMix64::mix(seed, epoch));
  for (std::size_t i = n_items; i > 1; --i)
    std::swap(order[i - 1], order[rng.next_below(i)]);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < n_items; start += batch_size) {
    const std::size_t end = std::min(start + batch_size, n_items);
    batches.emplace_back(order.begin() + start, order.begin() + end);
  }
  return batches;
}

}  // namespace harfuse
