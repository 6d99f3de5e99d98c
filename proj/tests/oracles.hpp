#pragma once

// Independent reference implementations used only by the test suite.

#include <cstddef>
#include <functional>
#include <vector>

#include "harfuse/metrics.hpp"

namespace oracle {

// Exhaustive-optimal segment matching: maximum-cardinality bipartite matching
// (Kuhn's augmenting paths) between predicted and ground-truth segments with
// equal labels and IoU >= threshold. Any maximum matching maximizes TP and
// hence F1, so this is the strongest matcher possible under the rules.
inline harfuse::ConfusionCounts optimal_counts(
    const std::vector<harfuse::Segment>& pred,
    const std::vector<harfuse::Segment>& truth, double threshold) {
  std::vector<std::vector<std::size_t>> cand(pred.size());
  for (std::size_t p = 0; p < pred.size(); ++p)
    for (std::size_t g = 0; g < truth.size(); ++g)
      if (pred[p].label == truth[g].label &&
          harfuse::segment_iou(pred[p], truth[g]) >= threshold)
        cand[p].push_back(g);

  std::vector<int> match_of_truth(truth.size(), -1);
  std::function<bool(std::size_t, std::vector<bool>&)> augment =
      [&](std::size_t p, std::vector<bool>& visited) -> bool {
    for (std::size_t g : cand[p]) {
      if (visited[g]) continue;
      visited[g] = true;
      if (match_of_truth[g] < 0 ||
          augment(static_cast<std::size_t>(match_of_truth[g]), visited)) {
        match_of_truth[g] = static_cast<int>(p);
        return true;
      }
    }
    return false;
  };

  std::size_t tp = 0;
  for (std::size_t p = 0; p < pred.size(); ++p) {
    std::vector<bool> visited(truth.size(), false);
    if (augment(p, visited)) ++tp;
  }
  harfuse::ConfusionCounts c;
  c.tp = tp;
  c.fp = pred.size() - tp;
  c.fn = truth.size() - tp;
  return c;
}

inline harfuse::ConfusionCounts optimal_counts_streams(
    const std::vector<std::size_t>& pred, const std::vector<std::size_t>& truth,
    double threshold) {
  return optimal_counts(harfuse::labels_to_segments(pred),
                        harfuse::labels_to_segments(truth), threshold);
}

}  // namespace oracle
