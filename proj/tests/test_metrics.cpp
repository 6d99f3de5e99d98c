#include <doctest.h>

#include <algorithm>
#include <vector>

#include "harfuse/metrics.hpp"
#include "harfuse/rng.hpp"
#include "oracles.hpp"

using namespace harfuse;

namespace {

std::vector<std::size_t> random_stream(std::size_t t_len, std::size_t k,
                                       SplitMix64& rng) {
  std::vector<std::size_t> s(t_len);
  for (auto& l : s) l = rng.next_below(k);
  return s;
}

}  // namespace

TEST_CASE("labels_to_segments examples") {
  CHECK(labels_to_segments({0, 0, 1}) ==
        std::vector<Segment>{{0, 0, 1}, {1, 2, 2}});
  CHECK(labels_to_segments({2, 2, 2, 2}) == std::vector<Segment>{{2, 0, 3}});
  CHECK(labels_to_segments({0, 1, 0}).size() == 3);
  CHECK_THROWS_AS(labels_to_segments({}), ShapeError);
}

TEST_CASE("frame_accuracy examples") {
  CHECK(frame_accuracy({0, 1, 2}, {0, 1, 2}) == 1.0);
  CHECK(frame_accuracy({0, 0, 0, 0, 0, 0, 0, 0, 1, 1},
                       {0, 0, 0, 0, 0, 0, 0, 0, 0, 0}) ==
        doctest::Approx(0.8));
  CHECK(frame_accuracy({0, 0}, {1, 1}) == 0.0);
  CHECK_THROWS_AS(frame_accuracy({0}, {0, 1}), ShapeError);
}

TEST_CASE("segmental F1 worked example") {
  // GT: A for 10 frames then B for 10; prediction cuts A short at frame 2.
  std::vector<std::size_t> truth(20, 0);
  std::fill(truth.begin() + 10, truth.end(), 1);
  std::vector<std::size_t> pred(20, 1);
  std::fill(pred.begin(), pred.begin() + 3, 0);

  auto [counts, f1] = segmental_f1(pred, truth, 0.5);
  CHECK(counts.tp == 1);  // B: IoU 10/17 >= 0.5
  CHECK(counts.fp == 1);  // A: IoU 3/10 < 0.5
  CHECK(counts.fn == 1);
  CHECK(f1 == doctest::Approx(0.5));

  const auto oc = oracle::optimal_counts_streams(pred, truth, 0.5);
  CHECK(oc.tp == counts.tp);
  CHECK(oc.fp == counts.fp);
  CHECK(oc.fn == counts.fn);
}

TEST_CASE("f1_from_counts direct evaluations") {
  CHECK(f1_from_counts({1, 1, 0, 0}) == doctest::Approx(2.0 / 3.0));
  CHECK(f1_from_counts({0, 0, 0, 0}) == 1.0);
  CHECK(f1_from_counts({3, 1, 2, 0}) == doctest::Approx(3.0 / 4.5));
}

TEST_CASE("identical streams are perfect at every threshold") {
  SplitMix64 rng(31);
  for (int trial = 0; trial < 20; ++trial) {
    auto s = random_stream(30, 4, rng);
    for (double th : {0.1, 0.25, 0.5, 1.0}) {
      auto [counts, f1] = segmental_f1(s, s, th);
      CHECK(f1 == 1.0);
      CHECK(counts.fp == 0);
      CHECK(counts.fn == 0);
    }
  }
}

TEST_CASE("threshold domain is (0, 1]") {
  CHECK_THROWS_AS(segmental_f1({0, 1}, {0, 1}, 0.0), ConfigError);
  CHECK_THROWS_AS(segmental_f1({0, 1}, {0, 1}, 1.5), ConfigError);
}

TEST_CASE("greedy matching equals the optimal oracle at IoU 0.5") {
  SplitMix64 rng(77);
  for (int trial = 0; trial < 500; ++trial) {
    const std::size_t t_len = 1 + rng.next_below(50);
    const std::size_t k = 2 + rng.next_below(4);
    auto pred = random_stream(t_len, k, rng);
    auto truth = random_stream(t_len, k, rng);
    const auto greedy = segmental_f1(pred, truth, 0.5).first;
    const auto best = oracle::optimal_counts_streams(pred, truth, 0.5);
    CHECK(greedy.tp == best.tp);
    CHECK(greedy.fp == best.fp);
    CHECK(greedy.fn == best.fn);
  }
}

TEST_CASE("greedy matching can be suboptimal below IoU 0.5 (characterization)") {
  // At thresholds below 0.5 one predicted segment may qualify against two
  // ground-truth segments, and prediction-order greediness can then burn the
  // partner a later prediction needed. This pins the known divergence so any
  // behavior change is caught.
  std::vector<std::size_t> truth = {0, 0, 1, 0, 0, 0, 0, 0};
  std::vector<std::size_t> pred = {0, 0, 0, 0, 0, 0, 2, 0};
  const auto greedy = segmental_f1(pred, truth, 0.1).first;
  const auto best = oracle::optimal_counts_streams(pred, truth, 0.1);
  CHECK(greedy.tp == 1);
  CHECK(best.tp == 2);
}

TEST_CASE("class permutation leaves accuracy and F1 unchanged") {
  SplitMix64 rng(41);
  const std::vector<std::size_t> perm = {2, 0, 3, 1};
  for (int trial = 0; trial < 50; ++trial) {
    auto pred = random_stream(25, 4, rng);
    auto truth = random_stream(25, 4, rng);
    auto pp = pred, pt = truth;
    for (auto& l : pp) l = perm[l];
    for (auto& l : pt) l = perm[l];
    CHECK(frame_accuracy(pred, truth) == frame_accuracy(pp, pt));
    for (double th : {0.1, 0.5}) {
      CHECK(segmental_f1(pred, truth, th).second ==
            segmental_f1(pp, pt, th).second);
    }
  }
}

TEST_CASE("F1 is non-increasing in the threshold") {
  SplitMix64 rng(53);
  for (int trial = 0; trial < 100; ++trial) {
    auto pred = random_stream(40, 3, rng);
    auto truth = random_stream(40, 3, rng);
    double prev = 2.0;
    for (double th : {0.1, 0.25, 0.5, 0.75, 1.0}) {
      const double f1 = segmental_f1(pred, truth, th).second;
      CHECK(f1 <= prev + 1e-12);
      prev = f1;
    }
  }
}

TEST_CASE("corpus-level report sums counts before applying F1") {
  std::vector<std::vector<std::size_t>> preds = {{0, 0, 1, 1}, {1, 1, 0, 0}};
  std::vector<std::vector<std::size_t>> truths = {{0, 0, 1, 1}, {0, 0, 0, 0}};
  auto report = evaluate_streams(preds, truths, {0.5});
  ConfusionCounts manual;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const auto c = segmental_f1(preds[i], truths[i], 0.5).first;
    manual.tp += c.tp;
    manual.fp += c.fp;
    manual.fn += c.fn;
  }
  CHECK(report.counts.at(0.5).tp == manual.tp);
  CHECK(report.counts.at(0.5).fp == manual.fp);
  CHECK(report.counts.at(0.5).fn == manual.fn);
  CHECK(report.f1_at.at(0.5) == f1_from_counts(manual));
  CHECK(report.frames_total == 8);
  CHECK(report.accuracy == doctest::Approx(6.0 / 8.0));
}

TEST_CASE("metrics JSON schema and internal consistency") {
  auto report = evaluate_streams({{0, 0, 1}}, {{0, 1, 1}});
  auto j = metrics_to_json(report);
  REQUIRE(j.contains("accuracy"));
  REQUIRE(j.contains("f1"));
  REQUIRE(j.contains("counts"));
  REQUIRE(j.contains("frames"));
  for (const char* th : {"0.10", "0.25", "0.50"}) {
    REQUIRE(j["f1"].contains(th));
    const auto& c = j["counts"][th];
    ConfusionCounts counts{c["tp"].get<std::size_t>(),
                           c["fp"].get<std::size_t>(),
                           c["fn"].get<std::size_t>(), 0};
    CHECK(j["f1"][th].get<double>() ==
          doctest::Approx(f1_from_counts(counts)).epsilon(1e-12));
  }
  CHECK(j["accuracy"].get<double>() ==
        doctest::Approx(static_cast<double>(j["frames"]["correct"].get<std::size_t>()) /
                        j["frames"]["total"].get<std::size_t>()));
}

TEST_CASE("evaluate_streams validates the corpus") {
  CHECK_THROWS_AS(evaluate_streams({}, {}), DataError);
  CHECK_THROWS_AS(evaluate_streams({{0}}, {{0}, {1}}), ShapeError);
  CHECK_THROWS_AS(evaluate_streams({{0, 1}}, {{0}}), ShapeError);
}
