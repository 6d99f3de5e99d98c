#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "harfuse/checkpoint.hpp"
#include "harfuse/data.hpp"
#include "harfuse/models.hpp"
#include "harfuse/train.hpp"

using namespace harfuse;

namespace {

struct TempDir {
  std::filesystem::path path;
  TempDir() {
    static int counter = 0;
    path = std::filesystem::temp_directory_path() /
           ("harfuse_train_" + std::to_string(::getpid()) + "_" +
            std::to_string(counter++));
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
  std::string file(const std::string& name) const {
    return (path / name).string();
  }
};

SyntheticSpec tiny_task() {
  SyntheticSpec spec;
  spec.num_classes = 3;
  spec.joints = 8;
  spec.channels = 3;
  spec.frames = 20;
  spec.per_class_count = 5;
  spec.noise_std = 0.02f;
  spec.seed = 11;
  return spec;
}

ModelConfig tiny_model(std::size_t stages = 2) {
  ModelConfig cfg;
  cfg.stages = stages;
  cfg.gcn_channels.assign(stages, 8);
  cfg.temporal_kernel = 3;
  cfg.num_classes = 3;
  cfg.transformer.depth = 1;
  cfg.transformer.model_dim = 8;
  cfg.transformer.heads = 2;
  cfg.transformer.ff_dim = 16;
  cfg.transformer.max_t = 64;
  return cfg;
}

TrainConfig tiny_train(std::size_t epochs) {
  TrainConfig cfg;
  cfg.epochs = epochs;
  cfg.batch_size = 4;
  cfg.seed = 5;
  cfg.quiet = true;
  cfg.target_hz = 10.0;
  return cfg;
}

}  // namespace

TEST_CASE("adam first step moves by about lr in the gradient direction") {
  ParamSet params;
  TensorValue& w = params.add("w", TensorValue({3}, {1, 2, 3}, true));
  w.ensure_grad();
  w.grad = {0.5f, -2.0f, 1.0f};
  OptimizerState state;
  AdamConfig cfg;
  adam_step(params, state, cfg);
  CHECK(w.data[0] == doctest::Approx(1.0 - cfg.lr).epsilon(1e-4));
  CHECK(w.data[1] == doctest::Approx(2.0 + cfg.lr).epsilon(1e-4));
  CHECK(w.data[2] == doctest::Approx(3.0 - cfg.lr).epsilon(1e-4));
  CHECK(state.step == 1);
  CHECK(w.grad == std::vector<float>{0, 0, 0});  // zeroed afterward
}

TEST_CASE("adam with zero gradients leaves parameters unchanged") {
  ParamSet params;
  TensorValue& w = params.add("w", TensorValue({2}, {4, -4}, true));
  w.zero_grad();
  OptimizerState state;
  adam_step(params, state, AdamConfig{});
  CHECK(w.data == std::vector<float>{4, -4});
}

TEST_CASE("adam with lr = 0 never changes parameters") {
  ParamSet params;
  TensorValue& w = params.add("w", TensorValue({2}, {1, 2}, true));
  OptimizerState state;
  AdamConfig cfg;
  cfg.lr = 0.0f;
  for (int step = 0; step < 5; ++step) {
    w.grad = {3.0f, -7.0f};
    adam_step(params, state, cfg);
  }
  CHECK(w.data == std::vector<float>{1, 2});
}

TEST_CASE("adam missing gradient names the parameter") {
  ParamSet params;
  params.add("lonely", TensorValue({2}, {1, 2}, true));
  params.at("lonely").grad.clear();
  OptimizerState state;
  CHECK_THROWS_WITH_AS(adam_step(params, state, AdamConfig{}),
                       doctest::Contains("lonely"), ContractError);
}

TEST_CASE("adam step is deterministic") {
  auto run = [] {
    ParamSet params;
    TensorValue& w = params.add("w", TensorValue({3}, {1, -1, 2}, true));
    w.grad = {0.1f, 0.2f, -0.3f};
    OptimizerState state;
    adam_step(params, state, AdamConfig{});
    return w.data;
  };
  CHECK(run() == run());
}

TEST_CASE("a single adam step on f(x) = x^2 decreases f") {
  ParamSet params;
  TensorValue& w = params.add("w", TensorValue({1}, {1.0f}, true));
  Tape tp;
  Var v = tp.param(w);
  tp.backward(sum(tp, matmul(tp, reshape(tp, v, {1, 1}),
                             reshape(tp, v, {1, 1}))));
  OptimizerState state;
  adam_step(params, state, AdamConfig{});
  CHECK(w.data[0] * w.data[0] < 1.0f);
}

TEST_CASE("training is bit-deterministic for a fixed seed") {
  auto [split, catalog] = generate_synthetic(tiny_task());
  auto run = [&] {
    auto model = PoGcnModel::create(tiny_model(), default_topology(), 3, 7);
    auto logs = train_pogcn(model, split.train, tiny_train(3));
    return std::make_pair(logs, model.params.entries);
  };
  auto [logs_a, params_a] = run();
  auto [logs_b, params_b] = run();
  REQUIRE(logs_a.size() == logs_b.size());
  for (std::size_t i = 0; i < logs_a.size(); ++i) {
    CHECK(logs_a[i].loss == logs_b[i].loss);
    CHECK(logs_a[i].train_acc == logs_b[i].train_acc);
  }
  for (const auto& [name, t] : params_a)
    CHECK(t.data == params_b.at(name).data);
}

TEST_CASE("too-short sequences are skipped and counted") {
  auto [split, catalog] = generate_synthetic(tiny_task());
  SkeletonSequence stub = split.train.front();
  stub.id = "stub";
  stub.frames.resize(2 * stub.joints * stub.channels);
  stub.labels.resize(2);
  std::vector<SkeletonSequence> seqs = {split.train[0], split.train[1], stub};
  auto model = PoGcnModel::create(tiny_model(), default_topology(), 3, 7);
  auto logs = train_pogcn(model, seqs, tiny_train(2));
  REQUIRE(logs.size() == 2);
  CHECK(logs[0].skipped == 1);
  CHECK(logs[1].skipped == 1);
}

TEST_CASE("transformer training runs and logs finite losses") {
  auto [split, catalog] = generate_synthetic(tiny_task());
  auto model = TransformerModel::create(tiny_model(), 8, 3, 7);
  auto logs = train_transformer(model, split.train, tiny_train(2));
  REQUIRE(logs.size() == 2);
  for (const auto& l : logs) {
    CHECK(std::isfinite(l.loss));
    CHECK(l.train_acc >= 0.0);
    CHECK(l.train_acc <= 1.0);
  }
}

TEST_CASE("observer can stop training early") {
  auto [split, catalog] = generate_synthetic(tiny_task());
  auto model = PoGcnModel::create(tiny_model(), default_topology(), 3, 7);
  auto logs = train_pogcn(model, split.train, tiny_train(10),
                          [](const EpochLog& log) { return log.epoch < 2; });
  CHECK(logs.size() == 2);
}

TEST_CASE("fusion training freezes base models and learns") {
  auto [split, catalog] = generate_synthetic(tiny_task());
  auto pogcn = PoGcnModel::create(tiny_model(), default_topology(), 3, 7);
  auto transformer = TransformerModel::create(tiny_model(), 8, 3, 9);

  std::map<std::string, std::vector<float>> before;
  for (const auto& [name, t] : pogcn.params.entries)
    before["p." + name] = t.data;
  for (const auto& [name, t] : transformer.params.entries)
    before["t." + name] = t.data;

  TrainConfig cfg = tiny_train(40);
  auto result = train_fusion(pogcn, transformer, split.train, cfg, 16);

  for (const auto& [name, t] : pogcn.params.entries)
    CHECK(before.at("p." + name) == t.data);
  for (const auto& [name, t] : transformer.params.entries)
    CHECK(before.at("t." + name) == t.data);

  // Even untrained (random) bases carry enough signal for the head to beat
  // 1.5/K train accuracy on the synthetic task.
  CHECK(result.logs.back().train_acc > 1.5 / 3.0);
}

TEST_CASE("evaluation contracts") {
  auto [split, catalog] = generate_synthetic(tiny_task());
  auto model = PoGcnModel::create(tiny_model(), default_topology(), 3, 7);
  auto a = evaluate_pogcn(model, split.test);
  auto b = evaluate_pogcn(model, split.test);
  CHECK(a.accuracy == b.accuracy);
  CHECK(a.counts.at(0.5).tp == b.counts.at(0.5).tp);
  CHECK(a.accuracy >= 0.0);
  CHECK(a.accuracy <= 1.0);
  CHECK_THROWS_AS(evaluate_pogcn(model, {}), DataError);
}

TEST_CASE("grid search ranking") {
  auto spec = tiny_task();
  spec.per_class_count = 4;
  auto [split, catalog] = generate_synthetic(spec);
  DatasetSplit data = split;
  ModelConfig mcfg = tiny_model(1);
  TrainConfig tcfg = tiny_train(1);

  SUBCASE("single point ranks first") {
    auto ranked = grid_search({{"lr", {0.01}}}, ModelKind::kPoGcn, data,
                              default_topology(), mcfg, tcfg, 10, 1);
    REQUIRE(ranked.size() == 1);
    CHECK(ranked[0].values.at("lr") == 0.01);
  }
  SUBCASE("lr = 0 ranks last") {
    auto ranked = grid_search({{"lr", {0.0, 0.01}}}, ModelKind::kPoGcn, data,
                              default_topology(), mcfg, tcfg, 10, 8);
    REQUIRE(ranked.size() == 2);
    CHECK(ranked.back().values.at("lr") == 0.0);
  }
  SUBCASE("deterministic ranking and budget cap") {
    auto space = std::map<std::string, std::vector<double>>{
        {"lr", {0.001, 0.01}}, {"sigma", {0.0, 0.15}}};
    auto a = grid_search(space, ModelKind::kPoGcn, data, default_topology(),
                         mcfg, tcfg, 3, 1);
    auto b = grid_search(space, ModelKind::kPoGcn, data, default_topology(),
                         mcfg, tcfg, 3, 1);
    CHECK(a.size() == 3);  // budget caps the 4-point Cartesian space
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].index == b[i].index);
  }
  SUBCASE("validation") {
    CHECK_THROWS_AS(grid_search({}, ModelKind::kPoGcn, data,
                                default_topology(), mcfg, tcfg, 10, 1),
                    ConfigError);
    CHECK_THROWS_AS(grid_search({{"momentum", {0.9}}}, ModelKind::kPoGcn, data,
                                default_topology(), mcfg, tcfg, 10, 1),
                    ConfigError);
  }
}

TEST_CASE("checkpoint round trip is bit-exact") {
  TempDir dir;
  ParamSet params;
  params.add("alpha", TensorValue({2, 3}, {1, 2, 3, 4, 5, 6}, true));
  params.add("beta", TensorValue({4}, {-1, 0.5f, 1e-20f, 3e8f}, true));
  nlohmann::json config = {{"kind", "test"}, {"k", 3}};
  save_checkpoint(dir.file("a.ckpt"), params, config);

  auto contents = load_checkpoint(dir.file("a.ckpt"));
  CHECK(contents.config == config);
  REQUIRE(contents.tensors.size() == 2);
  CHECK(contents.tensors.at("alpha").data == params.at("alpha").data);
  CHECK(contents.tensors.at("beta").data == params.at("beta").data);
  CHECK(contents.tensors.at("alpha").shape == Shape{2, 3});

  ParamSet restored;
  restored.add("alpha", TensorValue::zeros({2, 3}, true));
  restored.add("beta", TensorValue::zeros({4}, true));
  load_params(contents, restored, "test");
  CHECK(std::memcmp(restored.at("alpha").data.data(),
                    params.at("alpha").data.data(), 6 * sizeof(float)) == 0);
}

TEST_CASE("checkpoint error handling") {
  TempDir dir;
  ParamSet params;
  params.add("w", TensorValue({3}, {1, 2, 3}, true));
  save_checkpoint(dir.file("a.ckpt"), params);

  SUBCASE("truncating one byte fails with a truncation error") {
    std::ifstream in(dir.file("a.ckpt"), std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)),
                      std::istreambuf_iterator<char>());
    std::ofstream out(dir.file("b.ckpt"), std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 1));
    out.close();
    CHECK_THROWS_WITH_AS(load_checkpoint(dir.file("b.ckpt")),
                         doctest::Contains("truncated"), DataError);
  }
  SUBCASE("bad magic") {
    std::ofstream out(dir.file("c.ckpt"), std::ios::binary);
    out << "NOTMAGIC and then some";
    out.close();
    CHECK_THROWS_WITH_AS(load_checkpoint(dir.file("c.ckpt")),
                         doctest::Contains("magic"), DataError);
  }
  SUBCASE("out-of-order manifest offsets are rejected") {
    nlohmann::json manifest = {
        {"version", kCheckpointVersion},
        {"config", nlohmann::json::object()},
        {"tensors",
         {{{"name", "a"}, {"shape", {1}}, {"offset", 4}},
          {{"name", "b"}, {"shape", {1}}, {"offset", 0}}}}};
    const std::string mtext = manifest.dump();
    std::ofstream out(dir.file("d.ckpt"), std::ios::binary);
    out.write(kCheckpointMagic, 8);
    detail::write_u64_le(out, mtext.size());
    out << mtext;
    const float blob[2] = {1.0f, 2.0f};
    out.write(reinterpret_cast<const char*>(blob), sizeof(blob));
    out.close();
    CHECK_THROWS_WITH_AS(load_checkpoint(dir.file("d.ckpt")),
                         doctest::Contains("out of order"), DataError);
  }
  SUBCASE("version mismatch") {
    nlohmann::json manifest = {{"version", 999},
                               {"config", nlohmann::json::object()},
                               {"tensors", nlohmann::json::array()}};
    const std::string mtext = manifest.dump();
    std::ofstream out(dir.file("e.ckpt"), std::ios::binary);
    out.write(kCheckpointMagic, 8);
    detail::write_u64_le(out, mtext.size());
    out << mtext;
    out.close();
    CHECK_THROWS_WITH_AS(load_checkpoint(dir.file("e.ckpt")),
                         doctest::Contains("version"), DataError);
  }
  SUBCASE("restoring into a mismatched ParamSet names the tensor") {
    auto contents = load_checkpoint(dir.file("a.ckpt"));
    ParamSet wrong_shape;
    wrong_shape.add("w", TensorValue::zeros({4}, true));
    CHECK_THROWS_WITH_AS(load_params(contents, wrong_shape, "test"),
                         doctest::Contains("'w'"), DataError);
    ParamSet missing;
    missing.add("v", TensorValue::zeros({3}, true));
    CHECK_THROWS_WITH_AS(load_params(contents, missing, "test"),
                         doctest::Contains("'v'"), DataError);
  }
}

TEST_CASE("train log JSONL schema") {
  TempDir dir;
  std::vector<EpochLog> logs = {{1, 0.5, 0.25, 0}, {2, 0.25, 0.75, 1}};
  write_train_log(dir.file("log.jsonl"), logs);
  std::ifstream in(dir.file("log.jsonl"));
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    auto obj = nlohmann::json::parse(line);
    CHECK(obj["epoch"] == n + 1);
    CHECK(obj.contains("loss"));
    CHECK(obj.contains("train_acc"));
    CHECK(obj.contains("skipped"));
    ++n;
  }
  CHECK(n == 2);
}
