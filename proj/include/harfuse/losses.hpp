#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "harfuse/errors.hpp"
#include "harfuse/ops.hpp"
#include "harfuse/tensor.hpp"

namespace harfuse {

enum class MseMode { kLiteral, kSmoothing };

struct LossConfig {
  float sigma = 0.15f;  // weight of the MSE term in the combined loss
  float tau = 4.0f;     // clamp for the smoothing variant
  MseMode mse_mode = MseMode::kSmoothing;

  void validate() const {
    if (sigma < 0.0f) throw ConfigError("loss: sigma must be >= 0");
    if (!(tau > 0.0f)) throw ConfigError("loss: tau must be > 0");
  }
};

inline void check_labels(const std::vector<std::size_t>& labels,
                         std::size_t t_len, std::size_t k) {
  if (labels.size() != t_len)
    throw ShapeError("labels length " + std::to_string(labels.size()) +
                     " does not match " + std::to_string(t_len) + " frames");
  for (std::size_t t = 0; t < t_len; ++t)
    if (labels[t] >= k)
      throw DataError("label " + std::to_string(labels[t]) + " at frame " +
                      std::to_string(t) + " out of range for " +
                      std::to_string(k) + " classes");
}

// Mean per-frame cross entropy from logits [T x K]. The per-frame log
// probability is floored at -100.
inline Var ce_loss(Tape& tp, Var logits,
                   const std::vector<std::size_t>& labels) {
  const Shape ls = tp.shape(logits);
  if (ls.size() != 2) throw ShapeError("ce_loss: expected [T x K], got " +
                                       shape_str(ls));
  const std::size_t t_len = ls[0], k = ls[1];
  check_labels(labels, t_len, k);
  const auto& xd = tp.data(logits);
  std::vector<float> probs(t_len * k);
  std::vector<bool> clamped(t_len, false);
  double loss = 0.0;
  for (std::size_t t = 0; t < t_len; ++t) {
    float mx = -std::numeric_limits<float>::infinity();
    for (std::size_t c = 0; c < k; ++c) mx = std::max(mx, xd[t * k + c]);
    double z = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      probs[t * k + c] = std::exp(xd[t * k + c] - mx);
      z += probs[t * k + c];
    }
    for (std::size_t c = 0; c < k; ++c)
      probs[t * k + c] = static_cast<float>(probs[t * k + c] / z);
    double logp = static_cast<double>(xd[t * k + labels[t]] - mx) - std::log(z);
    if (logp < -100.0) {
      logp = -100.0;
      clamped[t] = true;  // floored frames contribute a constant
    }
    loss -= logp;
  }
  loss /= static_cast<double>(t_len);
  Var out = detail::next_var(tp);
  std::vector<std::size_t> labs = labels;
  return tp.push({1}, {static_cast<float>(loss)},
                 [logits, t_len, k, probs = std::move(probs),
                  clamped = std::move(clamped), labs = std::move(labs),
                  out](Tape& t) {
                   const float g = t.grad(out)[0] / static_cast<float>(t_len);
                   auto& gx = t.grad(logits);
                   for (std::size_t tt = 0; tt < t_len; ++tt) {
                     if (clamped[tt]) continue;
                     for (std::size_t c = 0; c < k; ++c) {
                       float d = probs[tt * k + c];
                       if (c == labs[tt]) d -= 1.0f;
                       gx[tt * k + c] += g * d;
                     }
                   }
                 });
}

// Mean squared error between probability rows [T x K] and one-hot labels.
inline Var mse_literal(Tape& tp, Var probs,
                       const std::vector<std::size_t>& labels) {
  const Shape ps = tp.shape(probs);
  if (ps.size() != 2) throw ShapeError("mse_literal: expected [T x K], got " +
                                       shape_str(ps));
  const std::size_t t_len = ps[0], k = ps[1];
  check_labels(labels, t_len, k);
  const auto& pd = tp.data(probs);
  double loss = 0.0;
  for (std::size_t t = 0; t < t_len; ++t)
    for (std::size_t c = 0; c < k; ++c) {
      const double y = (c == labels[t]) ? 1.0 : 0.0;
      const double d = y - pd[t * k + c];
      loss += d * d;
    }
  loss /= static_cast<double>(t_len * k);
  Var out = detail::next_var(tp);
  std::vector<std::size_t> labs = labels;
  return tp.push({1}, {static_cast<float>(loss)},
                 [probs, t_len, k, labs = std::move(labs), out](Tape& t) {
                   const float g =
                       t.grad(out)[0] * 2.0f / static_cast<float>(t_len * k);
                   const auto& pd = t.data(probs);
                   auto& gp = t.grad(probs);
                   for (std::size_t tt = 0; tt < t_len; ++tt)
                     for (std::size_t c = 0; c < k; ++c) {
                       const float y = (c == labs[tt]) ? 1.0f : 0.0f;
                       gp[tt * k + c] += g * (pd[tt * k + c] - y);
                     }
                 });
}

// Truncated squared difference of consecutive-frame log probabilities
// [T x K]: mean over t >= 1 and classes of min(|lp_t - lp_{t-1}|, tau)^2.
// T < 2 yields 0; `degenerate` reports that case.
inline Var mse_smoothing(Tape& tp, Var log_probs, float tau,
                         bool* degenerate = nullptr) {
  if (!(tau > 0.0f)) throw ConfigError("mse_smoothing: tau must be > 0");
  const Shape ls = tp.shape(log_probs);
  if (ls.size() != 2)
    throw ShapeError("mse_smoothing: expected [T x K], got " + shape_str(ls));
  const std::size_t t_len = ls[0], k = ls[1];
  if (degenerate) *degenerate = (t_len < 2);
  if (t_len < 2) return tp.leaf({1}, {0.0f});
  const auto& xd = tp.data(log_probs);
  double loss = 0.0;
  for (std::size_t t = 1; t < t_len; ++t)
    for (std::size_t c = 0; c < k; ++c) {
      const double raw = std::abs(static_cast<double>(xd[t * k + c]) -
                                  xd[(t - 1) * k + c]);
      tp.fold_kink(raw < static_cast<double>(tau));
      const double d = std::min(raw, static_cast<double>(tau));
      loss += d * d;
    }
  const std::size_t n = (t_len - 1) * k;
  loss /= static_cast<double>(n);
  Var out = detail::next_var(tp);
  return tp.push({1}, {static_cast<float>(loss)},
                 [log_probs, t_len, k, n, tau, out](Tape& t) {
                   const float g = t.grad(out)[0] / static_cast<float>(n);
                   const auto& xd = t.data(log_probs);
                   auto& gx = t.grad(log_probs);
                   for (std::size_t tt = 1; tt < t_len; ++tt)
                     for (std::size_t c = 0; c < k; ++c) {
                       const float d = xd[tt * k + c] - xd[(tt - 1) * k + c];
                       if (std::abs(d) >= tau) continue;  // clamped: constant
                       const float dd = g * 2.0f * d;
                       gx[tt * k + c] += dd;
                       gx[(tt - 1) * k + c] -= dd;
                     }
                 });
}

// Combined objective over stage logits: sum_s [ CE_s + sigma * MSE_s ].
// With sigma = 0 this is exactly the stage-summed cross entropy.
inline Var total_loss(Tape& tp, const std::vector<Var>& stage_logits,
                      const std::vector<std::size_t>& labels,
                      const LossConfig& cfg) {
  cfg.validate();
  if (stage_logits.empty())
    throw ShapeError("total_loss: need at least one stage");
  Var acc;
  for (Var logits : stage_logits) {
    Var term = ce_loss(tp, logits, labels);
    if (cfg.sigma > 0.0f) {
      Var mse = (cfg.mse_mode == MseMode::kLiteral)
                    ? mse_literal(tp, softmax(tp, logits, 1), labels)
                    : mse_smoothing(tp, log_softmax(tp, logits, 1), cfg.tau);
      term = add(tp, term, scale(tp, mse, cfg.sigma));
    }
    acc = acc.valid() ? add(tp, acc, term) : term;
  }
  return acc;
}

// Value-level conveniences (build a throwaway tape).
inline float ce_loss_value(const TensorValue& logits,
                           const std::vector<std::size_t>& labels) {
  Tape tp;
  return tp.scalar(ce_loss(tp, tp.leaf(logits), labels));
}

inline float mse_literal_value(const TensorValue& probs,
                               const std::vector<std::size_t>& labels) {
  Tape tp;
  return tp.scalar(mse_literal(tp, tp.leaf(probs), labels));
}

inline float mse_smoothing_value(const TensorValue& log_probs, float tau,
                                 bool* degenerate = nullptr) {
  Tape tp;
  return tp.scalar(mse_smoothing(tp, tp.leaf(log_probs), tau, degenerate));
}

inline float total_loss_value(const std::vector<TensorValue>& stage_logits,
                              const std::vector<std::size_t>& labels,
                              const LossConfig& cfg) {
  Tape tp;
  std::vector<Var> vars;
  vars.reserve(stage_logits.size());
  for (const auto& t : stage_logits) vars.push_back(tp.leaf(t));
  return tp.scalar(total_loss(tp, vars, labels, cfg));
}

}  // namespace harfuse
