#pragma once

// Shared test oracles: central-difference gradient checking and error-kind
// matching. Gradient checks run in 64-bit mode; 32-bit finite differences
// are too noisy to trust.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include <catch2/catch_amalgamated.hpp>

#include "fxmm/error.hpp"
#include "fxmm/rng.hpp"
#include "fxmm/tensor.hpp"

namespace testutil {

inline void fill_uniform(fxmm::Tensor<double>& t, fxmm::Rng& rng, double lo = -1.0,
                         double hi = 1.0) {
  for (auto& v : t.data()) v = lo + (hi - lo) * rng.next_unit();
}

// Checks d(loss)/d(leaf) for every element of every leaf against central
// finite differences. build() must reconstruct the graph from the leaves'
// current values. The tape stays in train mode throughout so mode-dependent
// behavior (gate noise) is identical in the recorded and probed passes;
// probe recordings are discarded unreplayed.
template <typename BuildFn>
double max_grad_rel_err(fxmm::Tape<double>& tape,
                        std::vector<fxmm::Tensor<double>> leaves, BuildFn&& build,
                        double h = 1e-5) {
  tape.set_mode(fxmm::TapeMode::train);
  tape.clear();
  for (auto& l : leaves) l.zero_grad();
  fxmm::backward(build());

  std::vector<std::vector<double>> analytic;
  for (auto& l : leaves) {
    if (l.has_grad())
      analytic.emplace_back(l.grad().begin(), l.grad().end());
    else
      analytic.emplace_back(l.numel(), 0.0);
  }

  double worst = 0.0;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    auto& l = leaves[li];
    for (std::size_t i = 0; i < l.numel(); ++i) {
      const double orig = l.data()[i];
      tape.clear();
      l.data()[i] = orig + h;
      const double up = build().item();
      tape.clear();
      l.data()[i] = orig - h;
      const double dn = build().item();
      tape.clear();
      l.data()[i] = orig;
      const double fd = (up - dn) / (2.0 * h);
      const double a = analytic[li][i];
      const double rel =
          std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), 1e-3});
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

template <typename S>
fxmm::Tensor<S> find_param(const std::vector<fxmm::Tensor<S>>& params,
                           const std::string& name) {
  for (const auto& p : params)
    if (p.name() == name) return p;
  FAIL("parameter not found: " << name);
  return {};
}

template <typename Fn>
void require_error(Fn&& fn, fxmm::ErrorKind kind) {
  try {
    fn();
    FAIL("expected an error, none thrown");
  } catch (const fxmm::Error& e) {
    REQUIRE(e.kind() == kind);
  }
}

}  // namespace testutil
