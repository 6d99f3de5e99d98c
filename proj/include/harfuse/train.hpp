#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iostream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "harfuse/checkpoint.hpp"
#include "harfuse/data.hpp"
#include "harfuse/errors.hpp"
#include "harfuse/losses.hpp"
#include "harfuse/metrics.hpp"
#include "harfuse/models.hpp"
#include "harfuse/tensor.hpp"

namespace harfuse {

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamConfig {
  float lr = 1e-3f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
};

struct OptimizerState {
  std::int64_t step = 0;
  std::map<std::string, std::vector<float>> m;
  std::map<std::string, std::vector<float>> v;
};

// One Adam update over every parameter. Gradients must be populated; they
// are zeroed after the step.
inline void adam_step(ParamSet& params, OptimizerState& state,
                      const AdamConfig& cfg) {
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (auto& [name, p] : params.entries) {
    if (p.grad.size() != p.data.size())
      throw ContractError("adam_step: parameter '" + name +
                          "' has no gradient");
    auto& m = state.m[name];
    auto& v = state.v[name];
    if (m.size() != p.data.size()) m.assign(p.data.size(), 0.0f);
    if (v.size() != p.data.size()) v.assign(p.data.size(), 0.0f);
    for (std::size_t i = 0; i < p.data.size(); ++i) {
      const float g = p.grad[i];
      m[i] = cfg.beta1 * m[i] + (1.0f - cfg.beta1) * g;
      v[i] = cfg.beta2 * v[i] + (1.0f - cfg.beta2) * g * g;
      const float mhat = m[i] / static_cast<float>(bc1);
      const float vhat = v[i] / static_cast<float>(bc2);
      p.data[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
  params.zero_grad();
}

// ---------------------------------------------------------------------------
// Training loops
// ---------------------------------------------------------------------------

enum class ModelKind { kPoGcn, kTransformer };

inline ModelKind parse_model_kind(const std::string& s) {
  if (s == "pogcn") return ModelKind::kPoGcn;
  if (s == "transformer") return ModelKind::kTransformer;
  throw ConfigError("unknown model kind '" + s +
                    "' (valid kinds: pogcn, transformer)");
}

struct TrainConfig {
  std::size_t epochs = 100;
  std::size_t batch_size = 4;
  std::uint64_t seed = 42;
  LossConfig loss;
  double target_hz = 0.0;  // sequences are resampled to this rate upstream
  AdamConfig adam;
  bool quiet = false;

  void validate() const {
    if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    loss.validate();
  }
};

struct EpochLog {
  std::size_t epoch = 0;  // 1-based
  double loss = 0.0;      // mean per-sequence total loss
  double train_acc = 0.0;
  std::size_t skipped = 0;
};

inline void write_train_log(const std::string& path,
                            const std::vector<EpochLog>& logs) {
  detail::AtomicFile file(path);
  for (const auto& e : logs)
    file.stream() << nlohmann::json{{"epoch", e.epoch},
                                    {"loss", e.loss},
                                    {"train_acc", e.train_acc},
                                    {"skipped", e.skipped}}
                  << '\n';
  file.commit();
}

// Returns false to stop training early.
using EpochObserver = std::function<bool(const EpochLog&)>;

namespace detail {

struct SequenceForward {
  // nullopt-style: returns a reason string when the sequence cannot be
  // processed, empty string otherwise.
  std::function<std::string(const SkeletonSequence&)> reject;
  // Builds the forward pass; returns per-stage logits (last = final).
  std::function<std::vector<Var>(Tape&, const SkeletonSequence&)> stage_logits;
};

inline std::vector<EpochLog> run_training(
    ParamSet& params, const std::vector<SkeletonSequence>& seqs,
    const TrainConfig& cfg, const SequenceForward& fwd,
    const EpochObserver& observer) {
  cfg.validate();
  if (seqs.empty()) throw DataError("training: empty train split");
  OptimizerState opt;
  std::vector<EpochLog> logs;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    EpochLog log;
    log.epoch = epoch;
    double loss_sum = 0.0;
    std::size_t n_seqs = 0, frames_correct = 0, frames_total = 0;
    const auto batches =
        make_batches(seqs.size(), cfg.batch_size, cfg.seed, epoch);
    for (const auto& batch : batches) {
      std::vector<std::size_t> usable;
      for (std::size_t idx : batch) {
        const std::string reason = fwd.reject(seqs[idx]);
        if (reason.empty()) {
          usable.push_back(idx);
        } else {
          ++log.skipped;
          if (!cfg.quiet)
            std::cerr << "warning: skipping sequence '" << seqs[idx].id
                      << "': " << reason << '\n';
        }
      }
      if (usable.empty()) continue;
      params.zero_grad();
      const float inv_batch = 1.0f / static_cast<float>(usable.size());
      for (std::size_t idx : usable) {
        const SkeletonSequence& seq = seqs[idx];
        Tape tp;
        std::vector<Var> stage_logits = fwd.stage_logits(tp, seq);
        Var loss = total_loss(tp, stage_logits, seq.labels, cfg.loss);
        loss_sum += tp.scalar(loss);
        ++n_seqs;
        const Var final_logits = stage_logits.back();
        const auto pred =
            argmax_rows(tp.shape(final_logits), tp.data(final_logits));
        for (std::size_t t = 0; t < pred.size(); ++t)
          if (pred[t] == seq.labels[t]) ++frames_correct;
        frames_total += pred.size();
        tp.backward(scale(tp, loss, inv_batch));
      }
      adam_step(params, opt, cfg.adam);
    }
    log.loss = n_seqs ? loss_sum / static_cast<double>(n_seqs) : 0.0;
    log.train_acc = frames_total ? static_cast<double>(frames_correct) /
                                       static_cast<double>(frames_total)
                                 : 0.0;
    logs.push_back(log);
    if (observer && !observer(log)) break;
  }
  return logs;
}

}  // namespace detail

inline std::vector<EpochLog> train_pogcn(PoGcnModel& model,
                                         const std::vector<SkeletonSequence>& seqs,
                                         const TrainConfig& cfg,
                                         const EpochObserver& observer = {}) {
  detail::SequenceForward fwd;
  const std::size_t kernel = model.cfg.temporal_kernel;
  fwd.reject = [kernel](const SkeletonSequence& s) -> std::string {
    if (s.length() < kernel)
      return "shorter than temporal kernel (" + std::to_string(s.length()) +
             " < " + std::to_string(kernel) + ")";
    return {};
  };
  fwd.stage_logits = [&model](Tape& tp, const SkeletonSequence& s) {
    return model.forward(tp, s).stage_logits;
  };
  return detail::run_training(model.params, seqs, cfg, fwd, observer);
}

inline std::vector<EpochLog> train_transformer(
    TransformerModel& model, const std::vector<SkeletonSequence>& seqs,
    const TrainConfig& cfg, const EpochObserver& observer = {}) {
  detail::SequenceForward fwd;
  const std::size_t max_t = model.cfg.transformer.max_t;
  fwd.reject = [max_t](const SkeletonSequence& s) -> std::string {
    if (s.length() > max_t)
      return "longer than max_t (" + std::to_string(s.length()) + " > " +
             std::to_string(max_t) + ")";
    return {};
  };
  fwd.stage_logits = [&model](Tape& tp, const SkeletonSequence& s) {
    return std::vector<Var>{model.forward(tp, s).logits};  // treated as S = 1
  };
  return detail::run_training(model.params, seqs, cfg, fwd, observer);
}

// ---------------------------------------------------------------------------
// Two-phase fusion training: phase 1 freezes both base models and extracts
// per-frame features once; phase 2 trains only the fusion head.
// ---------------------------------------------------------------------------

struct FusionTrainResult {
  FusionHead head;
  std::vector<EpochLog> logs;
};

inline FusionTrainResult train_fusion(const PoGcnModel& pogcn,
                                      const TransformerModel& transformer,
                                      const std::vector<SkeletonSequence>& seqs,
                                      const TrainConfig& cfg,
                                      std::size_t hidden,
                                      const EpochObserver& observer = {}) {
  cfg.validate();
  if (seqs.empty()) throw DataError("train_fusion: empty train split");
  std::vector<TensorValue> fused;
  std::vector<const std::vector<std::size_t>*> labels;
  fused.reserve(seqs.size());
  for (const auto& seq : seqs) {
    FusedFeature f = fuse(pogcn.extract(seq), transformer.extract(seq));
    fused.push_back(std::move(f.features));
    labels.push_back(&seq.labels);
  }
  const std::size_t in_dim = fused[0].shape[1];
  FusionTrainResult result{
      FusionHead::create(in_dim, hidden, pogcn.cfg.num_classes, cfg.seed), {}};
  FusionHead& head = result.head;
  OptimizerState opt;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    EpochLog log;
    log.epoch = epoch;
    double loss_sum = 0.0;
    std::size_t n_batches = 0, frames_correct = 0, frames_total = 0;
    const auto batches =
        make_batches(fused.size(), cfg.batch_size, cfg.seed, epoch);
    for (const auto& batch : batches) {
      head.params.zero_grad();
      Tape tp;
      // Frames of the whole batch form the batch-norm batch dimension.
      std::vector<Var> parts;
      std::vector<std::size_t> batch_labels;
      std::vector<std::size_t> lengths;
      for (std::size_t idx : batch) {
        parts.push_back(tp.leaf(fused[idx]));
        lengths.push_back(fused[idx].shape[0]);
        batch_labels.insert(batch_labels.end(), labels[idx]->begin(),
                            labels[idx]->end());
      }
      Var x = parts.size() == 1 ? parts[0] : concat(tp, parts, 0);
      Var logits = head.forward(tp, x, /*train=*/true);
      Var loss = ce_loss(tp, logits, batch_labels);
      if (cfg.loss.sigma > 0.0f) {
        // Smoothing is temporal; apply it per sequence and average.
        Var lp = log_softmax(tp, logits, 1);
        Var smooth;
        std::size_t row = 0;
        for (std::size_t len : lengths) {
          Var piece = (cfg.loss.mse_mode == MseMode::kSmoothing)
                          ? mse_smoothing(tp, row_slice(tp, lp, row, len),
                                          cfg.loss.tau)
                          : mse_literal(tp, row_slice(tp, softmax(tp, logits, 1),
                                                      row, len),
                                        std::vector<std::size_t>(
                                            batch_labels.begin() + row,
                                            batch_labels.begin() + row + len));
          smooth = smooth.valid() ? add(tp, smooth, piece) : piece;
          row += len;
        }
        smooth = scale(tp, smooth, 1.0f / static_cast<float>(lengths.size()));
        loss = add(tp, loss, scale(tp, smooth, cfg.loss.sigma));
      }
      loss_sum += tp.scalar(loss);
      ++n_batches;
      const auto pred = argmax_rows(tp.shape(logits), tp.data(logits));
      for (std::size_t t = 0; t < pred.size(); ++t)
        if (pred[t] == batch_labels[t]) ++frames_correct;
      frames_total += pred.size();
      tp.backward(loss);
      adam_step(head.params, opt, cfg.adam);
    }
    log.loss = n_batches ? loss_sum / static_cast<double>(n_batches) : 0.0;
    log.train_acc = frames_total ? static_cast<double>(frames_correct) /
                                       static_cast<double>(frames_total)
                                 : 0.0;
    result.logs.push_back(log);
    if (observer && !observer(log)) break;
  }
  return result;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

inline MetricsReport evaluate_pogcn(
    const PoGcnModel& model, const std::vector<SkeletonSequence>& seqs,
    const std::vector<double>& thresholds = default_f1_thresholds()) {
  if (seqs.empty()) throw DataError("evaluate: empty test split");
  std::vector<std::vector<std::size_t>> preds, truths;
  for (const auto& seq : seqs) {
    Tape tp;
    auto fv = model.forward(tp, seq);
    const Var logits = fv.stage_logits.back();
    preds.push_back(argmax_rows(tp.shape(logits), tp.data(logits)));
    truths.push_back(seq.labels);
  }
  return evaluate_streams(preds, truths, thresholds);
}

inline MetricsReport evaluate_transformer(
    const TransformerModel& model, const std::vector<SkeletonSequence>& seqs,
    const std::vector<double>& thresholds = default_f1_thresholds()) {
  if (seqs.empty()) throw DataError("evaluate: empty test split");
  std::vector<std::vector<std::size_t>> preds, truths;
  for (const auto& seq : seqs) {
    Tape tp;
    auto fv = model.forward(tp, seq);
    preds.push_back(argmax_rows(tp.shape(fv.logits), tp.data(fv.logits)));
    truths.push_back(seq.labels);
  }
  return evaluate_streams(preds, truths, thresholds);
}

inline MetricsReport evaluate_fusion(
    const PoGcnModel& pogcn, const TransformerModel& transformer,
    FusionHead& head, const std::vector<SkeletonSequence>& seqs,
    const std::vector<double>& thresholds = default_f1_thresholds()) {
  if (seqs.empty()) throw DataError("evaluate: empty test split");
  std::vector<std::vector<std::size_t>> preds, truths;
  for (const auto& seq : seqs) {
    FusedFeature f = fuse(pogcn.extract(seq), transformer.extract(seq));
    Tape tp;
    Var logits = head.forward(tp, tp.leaf(f.features), /*train=*/false);
    preds.push_back(argmax_rows(tp.shape(logits), tp.data(logits)));
    truths.push_back(seq.labels);
  }
  return evaluate_streams(preds, truths, thresholds);
}

// ---------------------------------------------------------------------------
// Hyperparameter grid search ("parameter-optimized"): trains every candidate
// for a reduced epoch count and ranks by validation frame accuracy, then
// F1@0.5, then candidate index. The validation split is the held-out test
// split of the synthetic generator; pass real validation data when working
// with real recordings.
// ---------------------------------------------------------------------------

struct GridCandidate {
  std::size_t index = 0;
  std::map<std::string, double> values;
  double val_accuracy = 0.0;
  double val_f1_50 = 0.0;
};

inline std::vector<GridCandidate> grid_search(
    const std::map<std::string, std::vector<double>>& space, ModelKind kind,
    const DatasetSplit& data, const SkeletonTopology& topo,
    const ModelConfig& mcfg, TrainConfig tcfg, std::size_t budget,
    std::size_t search_epochs) {
  if (space.empty()) throw ConfigError("grid_search: empty search space");
  if (budget < 1) throw ConfigError("grid_search: budget must be >= 1");
  for (const auto& [key, values] : space) {
    if (key != "lr" && key != "sigma" && key != "tau")
      throw ConfigError("grid_search: unknown hyperparameter '" + key + "'");
    if (values.empty())
      throw ConfigError("grid_search: no candidates for '" + key + "'");
  }
  if (data.test.empty())
    throw DataError("grid_search: empty validation split");

  // Cartesian product in sorted-key order.
  std::vector<std::string> keys;
  for (const auto& [key, values] : space) keys.push_back(key);
  std::vector<std::map<std::string, double>> points{{}};
  for (const auto& key : keys) {
    std::vector<std::map<std::string, double>> next;
    for (const auto& base : points)
      for (double v : space.at(key)) {
        auto p = base;
        p[key] = v;
        next.push_back(std::move(p));
      }
    points = std::move(next);
  }
  if (points.size() > budget) points.resize(budget);

  tcfg.epochs = search_epochs;
  std::vector<GridCandidate> results;
  for (std::size_t i = 0; i < points.size(); ++i) {
    TrainConfig cand = tcfg;
    for (const auto& [key, v] : points[i]) {
      if (key == "lr") cand.adam.lr = static_cast<float>(v);
      if (key == "sigma") cand.loss.sigma = static_cast<float>(v);
      if (key == "tau") cand.loss.tau = static_cast<float>(v);
    }
    MetricsReport report;
    if (kind == ModelKind::kPoGcn) {
      PoGcnModel model = PoGcnModel::create(
          mcfg, topo, data.train.at(0).channels, cand.seed);
      train_pogcn(model, data.train, cand);
      report = evaluate_pogcn(model, data.test);
    } else {
      TransformerModel model = TransformerModel::create(
          mcfg, data.train.at(0).joints, data.train.at(0).channels, cand.seed);
      train_transformer(model, data.train, cand);
      report = evaluate_transformer(model, data.test);
    }
    results.push_back(
        {i, points[i], report.accuracy, report.f1_at.at(0.50)});
  }
  std::stable_sort(results.begin(), results.end(),
                   [](const GridCandidate& a, const GridCandidate& b) {
                     if (a.val_accuracy != b.val_accuracy)
                       return a.val_accuracy > b.val_accuracy;
                     if (a.val_f1_50 != b.val_f1_50)
                       return a.val_f1_50 > b.val_f1_50;
                     return a.index < b.index;
                   });
  return results;
}

}  // namespace harfuse
