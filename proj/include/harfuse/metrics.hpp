#pragma once

#include <algorithm>
#include <cstddef>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "harfuse/errors.hpp"

namespace harfuse {

// Maximal run of one label, inclusive frame bounds.
struct Segment {
  std::size_t label;
  std::size_t start;
  std::size_t end;

  std::size_t length() const { return end - start + 1; }
  bool operator==(const Segment&) const = default;
};

struct ConfusionCounts {
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
};

struct MetricsReport {
  double accuracy = 0.0;
  std::size_t frames_correct = 0;
  std::size_t frames_total = 0;
  std::map<double, double> f1_at;             // threshold -> F1
  std::map<double, ConfusionCounts> counts;   // threshold -> counts
};

inline std::vector<Segment> labels_to_segments(
    const std::vector<std::size_t>& labels) {
  if (labels.empty()) throw ShapeError("labels_to_segments: empty stream");
  std::vector<Segment> segs;
  std::size_t start = 0;
  for (std::size_t t = 1; t <= labels.size(); ++t) {
    if (t == labels.size() || labels[t] != labels[start]) {
      segs.push_back({labels[start], start, t - 1});
      start = t;
    }
  }
  return segs;
}

inline double frame_accuracy(const std::vector<std::size_t>& pred,
                             const std::vector<std::size_t>& truth) {
  if (pred.size() != truth.size())
    throw ShapeError("frame_accuracy: length mismatch (" +
                     std::to_string(pred.size()) + " vs " +
                     std::to_string(truth.size()) + ")");
  if (pred.empty()) throw ShapeError("frame_accuracy: empty streams");
  std::size_t correct = 0;
  for (std::size_t t = 0; t < pred.size(); ++t)
    if (pred[t] == truth[t]) ++correct;
  return static_cast<double>(correct) / static_cast<double>(pred.size());
}

inline double segment_iou(const Segment& a, const Segment& b) {
  const std::size_t lo = std::max(a.start, b.start);
  const std::size_t hi = std::min(a.end, b.end);
  if (lo > hi) return 0.0;
  const std::size_t inter = hi - lo + 1;
  const std::size_t uni = a.length() + b.length() - inter;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

// Greedy segmental matching in prediction order: a predicted segment is a TP
// if some unmatched ground-truth segment of the same label reaches the IoU
// threshold; ties go to the highest IoU, then the earliest ground-truth
// start. Unmatched ground-truth segments are FNs.
inline ConfusionCounts match_segments(const std::vector<Segment>& pred,
                                      const std::vector<Segment>& truth,
                                      double threshold) {
  if (!(threshold > 0.0) || threshold > 1.0)
    throw ConfigError("segmental threshold must be in (0, 1]");
  ConfusionCounts c;
  std::vector<bool> used(truth.size(), false);
  for (const Segment& p : pred) {
    double best_iou = 0.0;
    std::size_t best = truth.size();
    for (std::size_t g = 0; g < truth.size(); ++g) {
      if (used[g] || truth[g].label != p.label) continue;
      const double iou = segment_iou(p, truth[g]);
      if (iou >= threshold && iou > best_iou) {
        best_iou = iou;
        best = g;  // earliest start wins ties via strict '>' in scan order
      }
    }
    if (best < truth.size()) {
      used[best] = true;
      ++c.tp;
    } else {
      ++c.fp;
    }
  }
  for (std::size_t g = 0; g < truth.size(); ++g)
    if (!used[g]) ++c.fn;
  return c;
}

// F1 = TP / (TP + 0.5 (FN + FP)); empty-vs-empty counts as a perfect match.
inline double f1_from_counts(const ConfusionCounts& c) {
  if (c.tp == 0 && c.fp == 0 && c.fn == 0) return 1.0;
  return static_cast<double>(c.tp) /
         (static_cast<double>(c.tp) +
          0.5 * static_cast<double>(c.fn + c.fp));
}

inline std::pair<ConfusionCounts, double> segmental_f1(
    const std::vector<std::size_t>& pred,
    const std::vector<std::size_t>& truth, double threshold) {
  if (pred.size() != truth.size())
    throw ShapeError("segmental_f1: length mismatch (" +
                     std::to_string(pred.size()) + " vs " +
                     std::to_string(truth.size()) + ")");
  const ConfusionCounts c = match_segments(
      labels_to_segments(pred), labels_to_segments(truth), threshold);
  return {c, f1_from_counts(c)};
}

inline const std::vector<double>& default_f1_thresholds() {
  static const std::vector<double> ts{0.10, 0.25, 0.50};
  return ts;
}

// Corpus-level report: confusion counts are summed across sequences and
// Eq-style F1 applied once to the totals (never averaged per sequence).
inline MetricsReport evaluate_streams(
    const std::vector<std::vector<std::size_t>>& preds,
    const std::vector<std::vector<std::size_t>>& truths,
    const std::vector<double>& thresholds = default_f1_thresholds()) {
  if (preds.size() != truths.size())
    throw ShapeError("evaluate_streams: corpus size mismatch");
  if (preds.empty()) throw DataError("evaluate_streams: empty corpus");
  MetricsReport report;
  for (double th : thresholds) report.counts[th] = ConfusionCounts{};
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (preds[i].size() != truths[i].size())
      throw ShapeError("evaluate_streams: length mismatch in sequence " +
                       std::to_string(i));
    for (std::size_t t = 0; t < preds[i].size(); ++t)
      if (preds[i][t] == truths[i][t]) ++report.frames_correct;
    report.frames_total += preds[i].size();
    const auto pred_segs = labels_to_segments(preds[i]);
    const auto true_segs = labels_to_segments(truths[i]);
    for (double th : thresholds) {
      const ConfusionCounts c = match_segments(pred_segs, true_segs, th);
      report.counts[th].tp += c.tp;
      report.counts[th].fp += c.fp;
      report.counts[th].fn += c.fn;
    }
  }
  report.accuracy = static_cast<double>(report.frames_correct) /
                    static_cast<double>(report.frames_total);
  for (double th : thresholds)
    report.f1_at[th] = f1_from_counts(report.counts[th]);
  return report;
}

inline std::string threshold_key(double th) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2) << th;
  return os.str();
}

inline nlohmann::json metrics_to_json(const MetricsReport& r) {
  nlohmann::json f1 = nlohmann::json::object();
  nlohmann::json counts = nlohmann::json::object();
  for (const auto& [th, v] : r.f1_at) f1[threshold_key(th)] = v;
  for (const auto& [th, c] : r.counts)
    counts[threshold_key(th)] = {{"tp", c.tp}, {"fp", c.fp}, {"fn", c.fn}};
  return {{"accuracy", r.accuracy},
          {"frames", {{"correct", r.frames_correct}, {"total", r.frames_total}}},
          {"f1", std::move(f1)},
          {"counts", std::move(counts)}};
}

}  // namespace harfuse
