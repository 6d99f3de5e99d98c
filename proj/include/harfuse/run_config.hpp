#pragma once

#include <cmath>
#include <fstream>
#include <initializer_list>
#include <string>
#include <vector>

#include <json.hpp>

#include "harfuse/data.hpp"
#include "harfuse/errors.hpp"
#include "harfuse/losses.hpp"
#include "harfuse/models.hpp"
#include "harfuse/train.hpp"

namespace harfuse {

inline constexpr int kRunConfigVersion = 1;

// Run configuration file. Strict JSON: unknown keys are hard errors so a
// typo in a hyperparameter name can never pass silently.
//
// {
//   "version": 1,
//   "model": {"stages", "gcn_channels", "temporal_kernel", "fusion_hidden",
//             "transformer": {"depth","model_dim","heads","ff_dim","max_t"}},
//   "train": {"epochs","batch_size","seed","lr","target_hz",
//             "loss": {"sigma","tau","mse_mode"}},
//   "data": {"train","test","catalog"} | {"synthetic": {...SyntheticSpec}},
//   "topology": "topology.json",   (required with data paths)
//   "out_dir": "runs/a"            (optional; --out overrides)
// }
struct RunConfig {
  ModelConfig model;  // num_classes filled in once the catalog is known
  TrainConfig train;
  bool synthetic = false;
  SyntheticSpec synth;
  std::string train_path, test_path, catalog_path;
  std::string topology_path;
  std::string out_dir;
};

namespace detail {

inline void check_keys(const nlohmann::json& obj,
                       std::initializer_list<const char*> allowed,
                       const std::string& where) {
  if (!obj.is_object())
    throw ConfigError("config: '" + where + "' must be a JSON object");
  for (const auto& [key, value] : obj.items()) {
    (void)value;
    bool ok = false;
    for (const char* a : allowed)
      if (key == a) ok = true;
    if (!ok)
      throw ConfigError("config: unknown key '" + key + "' in " + where);
  }
}

inline double get_number(const nlohmann::json& obj, const char* key,
                         const std::string& where) {
  if (!obj.contains(key) || !obj[key].is_number())
    throw ConfigError("config: " + where + " needs numeric '" + key + "'");
  return obj[key].get<double>();
}

inline std::size_t get_count(const nlohmann::json& obj, const char* key,
                             std::size_t fallback, const std::string& where) {
  if (!obj.contains(key)) return fallback;
  if (!obj[key].is_number_unsigned())
    throw ConfigError("config: " + where + "." + key +
                      " must be a non-negative integer");
  return obj[key].get<std::size_t>();
}

inline std::string get_string(const nlohmann::json& obj, const char* key,
                              const std::string& where) {
  if (!obj.contains(key) || !obj[key].is_string())
    throw ConfigError("config: " + where + " needs string '" + key + "'");
  return obj[key].get<std::string>();
}

}  // namespace detail

inline SyntheticSpec parse_synthetic_spec(const nlohmann::json& obj) {
  detail::check_keys(obj,
                     {"num_classes", "joints", "channels", "frames",
                      "per_class_count", "noise_std", "seed"},
                     "data.synthetic");
  SyntheticSpec spec;
  spec.num_classes = detail::get_count(obj, "num_classes", spec.num_classes,
                                       "data.synthetic");
  spec.joints = detail::get_count(obj, "joints", spec.joints, "data.synthetic");
  spec.channels =
      detail::get_count(obj, "channels", spec.channels, "data.synthetic");
  spec.frames = detail::get_count(obj, "frames", spec.frames, "data.synthetic");
  spec.per_class_count = detail::get_count(obj, "per_class_count",
                                           spec.per_class_count,
                                           "data.synthetic");
  if (obj.contains("noise_std")) {
    if (!obj["noise_std"].is_number())
      throw ConfigError("config: data.synthetic.noise_std must be numeric");
    spec.noise_std = obj["noise_std"].get<float>();
    if (spec.noise_std < 0.0f)
      throw ConfigError("config: data.synthetic.noise_std must be >= 0");
  }
  spec.seed = detail::get_count(obj, "seed", spec.seed, "data.synthetic");
  spec.validate();
  return spec;
}

inline RunConfig parse_run_config(const nlohmann::json& obj) {
  detail::check_keys(
      obj, {"version", "model", "train", "data", "topology", "out_dir"},
      "config");
  if (!obj.contains("version") || !obj["version"].is_number_integer() ||
      obj["version"].get<int>() != kRunConfigVersion)
    throw ConfigError("config: 'version' must be " +
                      std::to_string(kRunConfigVersion));
  RunConfig rc;

  if (obj.contains("model")) {
    const auto& m = obj["model"];
    detail::check_keys(m,
                       {"stages", "gcn_channels", "temporal_kernel",
                        "fusion_hidden", "transformer"},
                       "model");
    rc.model.stages = detail::get_count(m, "stages", rc.model.stages, "model");
    if (m.contains("gcn_channels")) {
      if (!m["gcn_channels"].is_array())
        throw ConfigError("config: model.gcn_channels must be an array");
      rc.model.gcn_channels =
          m["gcn_channels"].get<std::vector<std::size_t>>();
    }
    rc.model.temporal_kernel =
        detail::get_count(m, "temporal_kernel", rc.model.temporal_kernel,
                          "model");
    rc.model.fusion_hidden = detail::get_count(m, "fusion_hidden",
                                               rc.model.fusion_hidden, "model");
    if (m.contains("transformer")) {
      const auto& t = m["transformer"];
      detail::check_keys(t, {"depth", "model_dim", "heads", "ff_dim", "max_t"},
                         "model.transformer");
      TransformerConfig& tc = rc.model.transformer;
      tc.depth = detail::get_count(t, "depth", tc.depth, "model.transformer");
      tc.model_dim =
          detail::get_count(t, "model_dim", tc.model_dim, "model.transformer");
      tc.heads = detail::get_count(t, "heads", tc.heads, "model.transformer");
      tc.ff_dim =
          detail::get_count(t, "ff_dim", tc.ff_dim, "model.transformer");
      tc.max_t = detail::get_count(t, "max_t", tc.max_t, "model.transformer");
    }
  }
  if (rc.model.gcn_channels.size() != rc.model.stages)
    throw ConfigError("config: model.gcn_channels lists " +
                      std::to_string(rc.model.gcn_channels.size()) +
                      " widths for " + std::to_string(rc.model.stages) +
                      " stages");

  if (!obj.contains("train"))
    throw ConfigError("config: missing 'train' section");
  {
    const auto& t = obj["train"];
    detail::check_keys(
        t, {"epochs", "batch_size", "seed", "lr", "target_hz", "loss"},
        "train");
    rc.train.epochs = detail::get_count(t, "epochs", rc.train.epochs, "train");
    rc.train.batch_size =
        detail::get_count(t, "batch_size", rc.train.batch_size, "train");
    rc.train.seed = detail::get_count(t, "seed", rc.train.seed, "train");
    if (t.contains("lr"))
      rc.train.adam.lr = static_cast<float>(detail::get_number(t, "lr", "train"));
    // The common post-resampling rate is dataset-specific; there is no
    // defensible default, so it must be stated explicitly.
    rc.train.target_hz = detail::get_number(t, "target_hz", "train");
    if (!(rc.train.target_hz > 0.0) || !std::isfinite(rc.train.target_hz))
      throw ConfigError("config: train.target_hz must be a positive number");
    if (t.contains("loss")) {
      const auto& l = t["loss"];
      detail::check_keys(l, {"sigma", "tau", "mse_mode"}, "train.loss");
      if (l.contains("sigma"))
        rc.train.loss.sigma =
            static_cast<float>(detail::get_number(l, "sigma", "train.loss"));
      if (l.contains("tau"))
        rc.train.loss.tau =
            static_cast<float>(detail::get_number(l, "tau", "train.loss"));
      if (l.contains("mse_mode")) {
        const std::string mode = detail::get_string(l, "mse_mode", "train.loss");
        if (mode == "literal")
          rc.train.loss.mse_mode = MseMode::kLiteral;
        else if (mode == "smoothing")
          rc.train.loss.mse_mode = MseMode::kSmoothing;
        else
          throw ConfigError("config: train.loss.mse_mode must be 'literal' or "
                            "'smoothing', got '" + mode + "'");
      }
    }
    rc.train.validate();
  }

  if (!obj.contains("data"))
    throw ConfigError("config: missing 'data' section");
  {
    const auto& d = obj["data"];
    if (!d.is_object())
      throw ConfigError("config: 'data' must be a JSON object");
    const bool has_synth = d.contains("synthetic");
    const bool has_paths =
        d.contains("train") || d.contains("test") || d.contains("catalog");
    if (has_synth == has_paths)
      throw ConfigError("config: data must hold exactly one of 'synthetic' or "
                        "the train/test/catalog paths");
    if (has_synth) {
      detail::check_keys(d, {"synthetic"}, "data");
      rc.synthetic = true;
      rc.synth = parse_synthetic_spec(d["synthetic"]);
    } else {
      detail::check_keys(d, {"train", "test", "catalog"}, "data");
      rc.train_path = detail::get_string(d, "train", "data");
      rc.test_path = detail::get_string(d, "test", "data");
      rc.catalog_path = detail::get_string(d, "catalog", "data");
    }
  }

  if (obj.contains("topology"))
    rc.topology_path = detail::get_string(obj, "topology", "config");
  if (!rc.synthetic && rc.topology_path.empty())
    throw ConfigError("config: 'topology' path is required with data paths");
  if (obj.contains("out_dir"))
    rc.out_dir = detail::get_string(obj, "out_dir", "config");
  return rc;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  nlohmann::json obj;
  try {
    obj = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config '" + path + "': " + e.what());
  }
  return parse_run_config(obj);
}

// Simple chain topology with pairwise pooling, used when the synthetic joint
// count differs from the 8-joint default.
inline SkeletonTopology make_chain_topology(std::size_t joints) {
  if (joints < 2)
    throw ConfigError("topology: need at least 2 joints to pool");
  SkeletonTopology t;
  t.joint_count = joints;
  for (std::size_t j = 0; j + 1 < joints; ++j) t.edges.emplace_back(j, j + 1);
  t.pooling_map.resize(joints);
  for (std::size_t j = 0; j < joints; ++j) t.pooling_map[j] = j / 2;
  t.validate();
  return t;
}

struct LoadedRun {
  DatasetSplit split;
  LabelCatalog catalog;
  SkeletonTopology topology;
};

// Materializes the data a run needs: generates or loads the split, applies
// the common-rate resampling, and resolves the topology.
inline LoadedRun load_run_data(const RunConfig& rc) {
  LoadedRun run;
  if (rc.synthetic) {
    auto [split, catalog] = generate_synthetic(rc.synth);
    run.split = std::move(split);
    run.catalog = std::move(catalog);
    run.topology = rc.topology_path.empty()
                       ? (rc.synth.joints == 8 ? default_topology()
                                               : make_chain_topology(
                                                     rc.synth.joints))
                       : load_topology(rc.topology_path);
  } else {
    run.catalog = load_catalog(rc.catalog_path);
    run.split.train = load_jsonl(rc.train_path, run.catalog);
    run.split.test = load_jsonl(rc.test_path, run.catalog);
    run.split.seed = rc.train.seed;
    run.topology = load_topology(rc.topology_path);
  }
  for (auto* seqs : {&run.split.train, &run.split.test})
    for (auto& seq : *seqs) seq = resample(seq, rc.train.target_hz);
  return run;
}

}  // namespace harfuse
