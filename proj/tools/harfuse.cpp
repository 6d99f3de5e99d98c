// harfuse: skeleton action segmentation toolkit.
//
// Subcommands: gen, train, fuse, eval, metrics. Exit codes: 0 success,
// 2 usage/config error, 3 data/artifact error.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "harfuse/checkpoint.hpp"
#include "harfuse/data.hpp"
#include "harfuse/errors.hpp"
#include "harfuse/metrics.hpp"
#include "harfuse/models.hpp"
#include "harfuse/run_config.hpp"
#include "harfuse/train.hpp"

namespace {

using harfuse::ConfigError;
using harfuse::DataError;
using nlohmann::json;

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitData = 3;

struct GlobalOpts {
  std::optional<std::uint64_t> seed;
  bool quiet = false;
};

void ensure_out_dir(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec)
    throw ConfigError("cannot create output directory '" + dir +
                      "': " + ec.message());
}

void require_file(const std::string& path, const std::string& what) {
  if (!std::filesystem::exists(path))
    throw ConfigError("missing " + what + " file '" + path + "'");
}

json model_config_json(const harfuse::ModelConfig& m) {
  return {{"stages", m.stages},
          {"gcn_channels", m.gcn_channels},
          {"temporal_kernel", m.temporal_kernel},
          {"fusion_hidden", m.fusion_hidden},
          {"transformer",
           {{"depth", m.transformer.depth},
            {"model_dim", m.transformer.model_dim},
            {"heads", m.transformer.heads},
            {"ff_dim", m.transformer.ff_dim},
            {"max_t", m.transformer.max_t}}}};
}

void apply_overrides(harfuse::RunConfig& rc, const GlobalOpts& g) {
  if (g.seed) rc.train.seed = *g.seed;
  rc.train.quiet = g.quiet;
}

void print_report(const harfuse::MetricsReport& report) {
  std::cout << "accuracy " << report.accuracy << '\n';
  for (const auto& [th, f1] : report.f1_at)
    std::cout << "F1@" << harfuse::threshold_key(th) << ' ' << f1 << '\n';
}

void write_report(const std::string& path,
                  const harfuse::MetricsReport& report) {
  harfuse::detail::AtomicFile file(path);
  file.stream() << harfuse::metrics_to_json(report).dump(2) << '\n';
  file.commit();
}

// ---------------------------------------------------------------------------
// gen
// ---------------------------------------------------------------------------

int cmd_gen(const std::string& spec_path, const std::string& out_dir,
            const GlobalOpts& g) {
  harfuse::SyntheticSpec spec;
  if (!spec_path.empty()) {
    std::ifstream in(spec_path);
    if (!in) throw ConfigError("cannot open spec file '" + spec_path + "'");
    json obj;
    try {
      obj = json::parse(in);
    } catch (const json::parse_error& e) {
      throw ConfigError("spec '" + spec_path + "': " + e.what());
    }
    spec = harfuse::parse_synthetic_spec(obj);
  }
  if (g.seed) spec.seed = *g.seed;
  spec.validate();

  auto [split, catalog] = harfuse::generate_synthetic(spec);
  const harfuse::SkeletonTopology topo =
      spec.joints == 8 ? harfuse::default_topology()
                       : harfuse::make_chain_topology(spec.joints);
  ensure_out_dir(out_dir);
  const std::filesystem::path out(out_dir);
  try {
    harfuse::write_jsonl((out / "train.jsonl").string(), split.train, catalog);
    harfuse::write_jsonl((out / "test.jsonl").string(), split.test, catalog);
    harfuse::save_catalog((out / "catalog.json").string(), catalog);
    harfuse::save_topology((out / "topology.json").string(), topo);
  } catch (const DataError& e) {
    throw ConfigError(e.what());  // unwritable output location
  }
  if (!g.quiet)
    std::cout << "wrote " << split.train.size() << " train / "
              << split.test.size() << " test sequences to " << out_dir << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

int cmd_train(const std::string& config_path, const std::string& model_kind,
              const std::string& out_dir, const GlobalOpts& g) {
  const harfuse::ModelKind kind = harfuse::parse_model_kind(model_kind);
  harfuse::RunConfig rc = harfuse::load_run_config(config_path);
  apply_overrides(rc, g);
  harfuse::LoadedRun run = harfuse::load_run_data(rc);
  if (run.split.train.empty()) throw DataError("train: empty train split");
  rc.model.num_classes = run.catalog.size();
  const harfuse::SkeletonSequence& first = run.split.train.front();

  ensure_out_dir(out_dir);
  const std::filesystem::path out(out_dir);
  json echo = {{"kind", model_kind},
               {"model", model_config_json(rc.model)},
               {"joints", first.joints},
               {"channels", first.channels},
               {"num_classes", rc.model.num_classes},
               {"seed", rc.train.seed}};

  std::vector<harfuse::EpochLog> logs;
  if (kind == harfuse::ModelKind::kPoGcn) {
    auto model = harfuse::PoGcnModel::create(rc.model, run.topology,
                                             first.channels, rc.train.seed);
    logs = harfuse::train_pogcn(model, run.split.train, rc.train);
    harfuse::save_checkpoint((out / "model.ckpt").string(), model.params, echo);
  } else {
    auto model = harfuse::TransformerModel::create(
        rc.model, first.joints, first.channels, rc.train.seed);
    logs = harfuse::train_transformer(model, run.split.train, rc.train);
    harfuse::save_checkpoint((out / "model.ckpt").string(), model.params, echo);
  }
  harfuse::write_train_log((out / "train_log.jsonl").string(), logs);
  if (!logs.empty() && !g.quiet) {
    const harfuse::EpochLog& last = logs.back();
    std::cout << "epoch " << last.epoch << " loss " << last.loss
              << " train_acc " << last.train_acc << '\n';
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------
// fuse / eval shared model loading
// ---------------------------------------------------------------------------

harfuse::PoGcnModel load_pogcn(const std::string& ckpt_path,
                               const harfuse::RunConfig& rc,
                               const harfuse::LoadedRun& run) {
  auto contents = harfuse::load_checkpoint(ckpt_path);
  harfuse::ModelConfig mc = rc.model;
  mc.num_classes = run.catalog.size();
  auto model = harfuse::PoGcnModel::create(
      mc, run.topology, run.split.train.empty()
                            ? run.split.test.front().channels
                            : run.split.train.front().channels,
      rc.train.seed);
  harfuse::load_params(contents, model.params, "checkpoint '" + ckpt_path + "'");
  return model;
}

harfuse::TransformerModel load_transformer(const std::string& ckpt_path,
                                           const harfuse::RunConfig& rc,
                                           const harfuse::LoadedRun& run) {
  auto contents = harfuse::load_checkpoint(ckpt_path);
  const harfuse::SkeletonSequence& first = run.split.train.empty()
                                               ? run.split.test.front()
                                               : run.split.train.front();
  harfuse::ModelConfig mc = rc.model;
  mc.num_classes = run.catalog.size();
  auto model = harfuse::TransformerModel::create(mc, first.joints,
                                                 first.channels, rc.train.seed);
  harfuse::load_params(contents, model.params, "checkpoint '" + ckpt_path + "'");
  return model;
}

void save_fusion_checkpoint(const std::string& path,
                            const harfuse::FusionHead& head,
                            json config) {
  std::map<std::string, harfuse::TensorValue> tensors = head.params.entries;
  tensors.emplace("bn_running_mean",
                  harfuse::TensorValue({head.in_dim},
                                       head.bn_state.running_mean));
  tensors.emplace("bn_running_var",
                  harfuse::TensorValue({head.in_dim},
                                       head.bn_state.running_var));
  harfuse::save_checkpoint(path, tensors, std::move(config));
}

harfuse::FusionHead load_fusion_head(const std::string& ckpt_path,
                                     std::size_t expected_in_dim,
                                     std::size_t num_classes,
                                     std::uint64_t seed) {
  auto contents = harfuse::load_checkpoint(ckpt_path);
  const json& cfg = contents.config;
  if (!cfg.contains("in_dim") || !cfg.contains("hidden"))
    throw DataError("checkpoint '" + ckpt_path +
                    "': not a fusion checkpoint (missing in_dim/hidden)");
  const std::size_t in_dim = cfg["in_dim"].get<std::size_t>();
  const std::size_t hidden = cfg["hidden"].get<std::size_t>();
  if (in_dim != expected_in_dim)
    throw DataError("checkpoint '" + ckpt_path + "': tensor 'fc1_w' expects " +
                    std::to_string(in_dim) + " input features, base models" +
                    " provide " + std::to_string(expected_in_dim));
  auto head = harfuse::FusionHead::create(in_dim, hidden, num_classes, seed);
  auto params_only = contents;
  for (const char* stat : {"bn_running_mean", "bn_running_var"}) {
    auto it = params_only.tensors.find(stat);
    if (it == params_only.tensors.end())
      throw DataError("checkpoint '" + ckpt_path + "': missing tensor '" +
                      std::string(stat) + "'");
    params_only.tensors.erase(it);
  }
  harfuse::load_params(params_only, head.params,
                       "checkpoint '" + ckpt_path + "'");
  head.bn_state.running_mean = contents.tensors.at("bn_running_mean").data;
  head.bn_state.running_var = contents.tensors.at("bn_running_var").data;
  return head;
}

// ---------------------------------------------------------------------------
// fuse
// ---------------------------------------------------------------------------

int cmd_fuse(const std::string& config_path, const std::string& pogcn_ckpt,
             const std::string& transformer_ckpt, const std::string& out_dir,
             const GlobalOpts& g) {
  require_file(pogcn_ckpt, "checkpoint");
  require_file(transformer_ckpt, "checkpoint");
  harfuse::RunConfig rc = harfuse::load_run_config(config_path);
  apply_overrides(rc, g);
  harfuse::LoadedRun run = harfuse::load_run_data(rc);
  if (run.split.train.empty()) throw DataError("fuse: empty train split");

  auto pogcn = load_pogcn(pogcn_ckpt, rc, run);
  auto transformer = load_transformer(transformer_ckpt, rc, run);
  auto result = harfuse::train_fusion(pogcn, transformer, run.split.train,
                                      rc.train, rc.model.fusion_hidden);

  ensure_out_dir(out_dir);
  const std::filesystem::path out(out_dir);
  json echo = {{"kind", "fusion"},
               {"in_dim", result.head.in_dim},
               {"hidden", result.head.hidden},
               {"num_classes", result.head.num_classes},
               {"seed", rc.train.seed}};
  save_fusion_checkpoint((out / "fusion.ckpt").string(), result.head, echo);
  harfuse::write_train_log((out / "fuse_log.jsonl").string(), result.logs);
  if (!result.logs.empty() && !g.quiet) {
    const harfuse::EpochLog& last = result.logs.back();
    std::cout << "epoch " << last.epoch << " loss " << last.loss
              << " train_acc " << last.train_acc << '\n';
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

int cmd_eval(const std::string& config_path, const std::string& ckpt_path,
             const std::vector<std::string>& fusion_ckpts,
             const std::string& data_path, const std::string& report_path,
             const GlobalOpts& g) {
  if (ckpt_path.empty() == fusion_ckpts.empty())
    throw ConfigError("eval: pass exactly one of --ckpt or --fusion");
  harfuse::RunConfig rc = harfuse::load_run_config(config_path);
  apply_overrides(rc, g);
  if (!ckpt_path.empty()) require_file(ckpt_path, "checkpoint");
  for (const auto& p : fusion_ckpts) require_file(p, "checkpoint");
  if (!data_path.empty()) require_file(data_path, "data");
  harfuse::LoadedRun run = harfuse::load_run_data(rc);

  std::vector<harfuse::SkeletonSequence> test;
  if (data_path.empty()) {
    test = run.split.test;
  } else {
    test = harfuse::load_jsonl(data_path, run.catalog);
    for (auto& seq : test) seq = harfuse::resample(seq, rc.train.target_hz);
  }
  if (test.empty()) throw DataError("eval: empty test set");

  harfuse::MetricsReport report;
  if (!ckpt_path.empty()) {
    const json echo = harfuse::load_checkpoint(ckpt_path).config;
    const std::string kind =
        echo.contains("kind") ? echo["kind"].get<std::string>() : "";
    if (kind == "pogcn") {
      report = harfuse::evaluate_pogcn(load_pogcn(ckpt_path, rc, run), test);
    } else if (kind == "transformer") {
      report = harfuse::evaluate_transformer(
          load_transformer(ckpt_path, rc, run), test);
    } else {
      throw DataError("checkpoint '" + ckpt_path +
                      "': unknown model kind '" + kind + "'");
    }
  } else {
    if (fusion_ckpts.size() != 3)
      throw ConfigError(
          "eval: --fusion needs pogcn, transformer, and fusion checkpoints");
    auto pogcn = load_pogcn(fusion_ckpts[0], rc, run);
    auto transformer = load_transformer(fusion_ckpts[1], rc, run);
    auto head = load_fusion_head(
        fusion_ckpts[2], pogcn.feature_dim() + transformer.feature_dim(),
        run.catalog.size(), rc.train.seed);
    report = harfuse::evaluate_fusion(pogcn, transformer, head, test);
  }
  print_report(report);
  if (!report_path.empty()) write_report(report_path, report);
  return kExitOk;
}

// ---------------------------------------------------------------------------
// metrics: model-free evaluation of externally produced label streams.
// Files are JSONL of {"id": str, "labels": [str|int]xT}.
// ---------------------------------------------------------------------------

std::map<std::string, std::vector<std::string>> load_label_streams(
    const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open labels file '" + path + "'");
  std::map<std::string, std::vector<std::string>> streams;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json obj;
    try {
      obj = json::parse(line);
    } catch (const json::parse_error& e) {
      throw DataError(path + " line " + std::to_string(line_no) + ": " +
                      e.what());
    }
    const std::string where = path + " line " + std::to_string(line_no);
    if (!obj.is_object() || !obj.contains("id") || !obj["id"].is_string() ||
        !obj.contains("labels") || !obj["labels"].is_array())
      throw DataError(where + ": expected {\"id\", \"labels\"}");
    std::vector<std::string> labels;
    for (const auto& l : obj["labels"]) {
      if (l.is_string())
        labels.push_back(l.get<std::string>());
      else if (l.is_number_unsigned())
        labels.push_back(std::to_string(l.get<std::uint64_t>()));
      else
        throw DataError(where + ": labels must be strings or"
                        " non-negative integers");
    }
    if (labels.empty()) throw DataError(where + ": empty label stream");
    const std::string id = obj["id"].get<std::string>();
    if (!streams.emplace(id, std::move(labels)).second)
      throw DataError(where + ": duplicate id '" + id + "'");
  }
  return streams;
}

int cmd_metrics(const std::string& pred_path, const std::string& gt_path,
                const std::string& report_path) {
  const auto pred = load_label_streams(pred_path);
  const auto gt = load_label_streams(gt_path);

  std::vector<std::string> only_pred, only_gt;
  for (const auto& [id, labels] : pred)
    if (!gt.count(id)) only_pred.push_back(id);
  for (const auto& [id, labels] : gt)
    if (!pred.count(id)) only_gt.push_back(id);
  if (!only_pred.empty() || !only_gt.empty()) {
    std::string msg = "metrics: id sets differ;";
    for (const auto& id : only_pred) msg += " only in predictions: " + id + ";";
    for (const auto& id : only_gt) msg += " only in ground truth: " + id + ";";
    throw DataError(msg);
  }
  if (pred.empty()) throw DataError("metrics: no sequences");

  std::set<std::string> universe;
  for (const auto& [id, labels] : pred)
    universe.insert(labels.begin(), labels.end());
  for (const auto& [id, labels] : gt)
    universe.insert(labels.begin(), labels.end());
  std::map<std::string, std::size_t> index;
  for (const auto& name : universe) index.emplace(name, index.size());

  std::vector<std::vector<std::size_t>> preds, truths;
  for (const auto& [id, plabels] : pred) {
    const auto& glabels = gt.at(id);
    if (plabels.size() != glabels.size())
      throw DataError("metrics: length mismatch for id '" + id + "' (" +
                      std::to_string(plabels.size()) + " vs " +
                      std::to_string(glabels.size()) + ")");
    std::vector<std::size_t> p, t;
    for (const auto& l : plabels) p.push_back(index.at(l));
    for (const auto& l : glabels) t.push_back(index.at(l));
    preds.push_back(std::move(p));
    truths.push_back(std::move(t));
  }
  const harfuse::MetricsReport report = harfuse::evaluate_streams(preds, truths);
  print_report(report);
  if (!report_path.empty()) write_report(report_path, report);
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"skeleton action segmentation toolkit"};
  app.require_subcommand(1);

  GlobalOpts g;
  std::uint64_t seed_value = 0;
  auto* seed_opt = app.add_option("--seed", seed_value,
                                  "override the config seed");
  app.add_flag("--quiet", g.quiet, "suppress progress output");

  std::string spec_path, config_path, model_kind, out_dir;
  std::string ckpt_path, data_path, report_path;
  std::string pogcn_ckpt, transformer_ckpt, pred_path, gt_path;
  std::vector<std::string> fusion_ckpts;

  auto* gen = app.add_subcommand("gen", "generate a synthetic dataset");
  gen->add_option("--spec", spec_path, "synthetic spec JSON");
  gen->add_option("--out", out_dir, "output directory")->required();

  auto* train = app.add_subcommand("train", "train one base model");
  train->add_option("--config", config_path, "run config JSON")->required();
  train->add_option("--model", model_kind, "pogcn|transformer")->required();
  train->add_option("--out", out_dir, "output directory")->required();

  auto* fuse = app.add_subcommand("fuse", "train the fusion head");
  fuse->add_option("--config", config_path, "run config JSON")->required();
  fuse->add_option("--pogcn", pogcn_ckpt, "pogcn checkpoint")->required();
  fuse->add_option("--transformer", transformer_ckpt,
                   "transformer checkpoint")->required();
  fuse->add_option("--out", out_dir, "output directory")->required();

  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  eval_cmd->add_option("--config", config_path, "run config JSON")->required();
  eval_cmd->add_option("--ckpt", ckpt_path, "base model checkpoint");
  eval_cmd->add_option("--fusion", fusion_ckpts,
                       "pogcn, transformer, fusion checkpoints")
      ->expected(3);
  eval_cmd->add_option("--data", data_path, "test JSONL (default: config)");
  eval_cmd->add_option("--report", report_path, "metrics report JSON path");

  auto* metrics = app.add_subcommand("metrics",
                                     "score externally produced predictions");
  metrics->add_option("--pred", pred_path, "predictions JSONL")->required();
  metrics->add_option("--gt", gt_path, "ground truth JSONL")->required();
  metrics->add_option("--report", report_path, "metrics report JSON path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitConfig;
  }
  if (*seed_opt) g.seed = seed_value;

  try {
    if (*gen) return cmd_gen(spec_path, out_dir, g);
    if (*train) return cmd_train(config_path, model_kind, out_dir, g);
    if (*fuse)
      return cmd_fuse(config_path, pogcn_ckpt, transformer_ckpt, out_dir, g);
    if (*eval_cmd)
      return cmd_eval(config_path, ckpt_path, fusion_ckpts, data_path,
                      report_path, g);
    if (*metrics) return cmd_metrics(pred_path, gt_path, report_path);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const harfuse::DataError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitData;
  } catch (const harfuse::ShapeError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return 1;
  }
  return kExitConfig;
}
