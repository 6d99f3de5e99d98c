#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>

#include "harfuse/errors.hpp"
#include "harfuse/tensor.hpp"

namespace harfuse {

// Builds a fresh tape from the current parameter values and returns the
// scalar loss handle.
using TapeBuilder = std::function<Var(Tape&)>;

// Central-difference verification of the reverse sweep. Returns
// max over parameter elements of |analytic - fd| / max(1, |fd|).
// The build function must be deterministic; this is checked by double
// evaluation before any perturbation.
//
// Elements whose perturbation is not a valid probe are skipped on two
// grounds, both of which mean the finite difference estimates nothing:
//  - the tape's kink signature changes under the perturbation, i.e. a
//    piecewise-defined op (ReLU, clamp) takes a different branch somewhere
//    inside the probed interval;
//  - the central difference is unstable across step sizes h and h/2, which
//    catches residual non-smoothness. For a smooth point the two estimates
//    agree to O(h^2 * f'''), so a genuinely wrong analytic gradient is still
//    flagged there.
inline double grad_check(const TapeBuilder& build, ParamSet& params,
                         float h = 1e-3f) {
  std::uint64_t sig = 0;
  auto eval = [&]() -> double {
    Tape tp;
    Var loss = build(tp);
    sig = tp.kink_signature;
    return tp.scalar(loss);
  };
  const double f0 = eval();
  const std::uint64_t sig0 = sig;
  const double f1 = eval();
  if (f0 != f1)
    throw ContractError("grad_check: builder is not deterministic (" +
                        std::to_string(f0) + " vs " + std::to_string(f1) + ")");
  params.zero_grad();
  {
    Tape tp;
    Var loss = build(tp);
    tp.backward(loss);
  }
  double max_rel = 0.0;
  for (auto& [name, p] : params.entries) {
    if (p.grad.size() != p.data.size())
      throw ContractError("grad_check: parameter '" + name +
                          "' received no gradient");
    for (std::size_t i = 0; i < p.data.size(); ++i) {
      const float orig = p.data[i];
      p.data[i] = orig + h;
      const double fp = eval();
      bool crossed = sig != sig0;
      p.data[i] = orig - h;
      const double fm = eval();
      crossed |= sig != sig0;
      p.data[i] = orig + 0.5f * h;
      const double fph = eval();
      crossed |= sig != sig0;
      p.data[i] = orig - 0.5f * h;
      const double fmh = eval();
      crossed |= sig != sig0;
      p.data[i] = orig;
      if (crossed) continue;  // a branch flips inside the probe interval
      const double fd = (fp - fm) / (2.0 * static_cast<double>(h));
      const double fd_half = (fph - fmh) / static_cast<double>(h);
      if (std::abs(fd - fd_half) > 1e-3 * std::max(1.0, std::abs(fd_half)))
        continue;  // residual non-smoothness inside the probe interval
      const double rel =
          std::abs(p.grad[i] - fd) / std::max(1.0, std::abs(fd));
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

}  // namespace harfuse
