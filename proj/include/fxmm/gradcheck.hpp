#pragma once

// Self-contained gradient verification: rebuilds each trainable subsystem at a
// small width and compares every reverse-mode gradient against central finite
// differences. 64-bit only; float differences are too noisy to judge.

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "fxmm/batch.hpp"
#include "fxmm/fuxi_block.hpp"
#include "fxmm/model.hpp"
#include "fxmm/moe.hpp"
#include "fxmm/rng.hpp"
#include "fxmm/tensor.hpp"

namespace fxmm {

inline constexpr double kGradCheckTol = 1e-4;

struct GradCheckResult {
  std::string name;
  double max_rel_err = 0.0;
  bool passed = false;
};

namespace detail {

inline void gc_fill(Tensor<double>& t, Rng& rng, double lo = -1.0, double hi = 1.0) {
  for (auto& v : t.data()) v = lo + (hi - lo) * rng.next_unit();
}

// Fixed random readout so every output coordinate feeds the scalar objective.
inline Tensor<double> gc_readout(std::vector<int> dims, Rng& rng) {
  auto w = Tensor<double>::zeros(dims);
  gc_fill(w, rng);
  return w;
}

// Max relative error of d(objective)/d(leaf) over all leaf coordinates.
// build() must reconstruct the graph from the leaves' current values; probe
// recordings are discarded unreplayed.
template <typename BuildFn>
double gc_max_rel_err(Tape<double>& tape, std::vector<Tensor<double>>& leaves,
                      BuildFn&& build, double h = 1e-5) {
  tape.set_mode(TapeMode::train);
  tape.clear();
  for (auto& l : leaves) l.zero_grad();
  backward(build());

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
      const double rel = std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), 1e-3});
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

}  // namespace detail

// Runs every subsystem check at the given stream width (even, in [2, 64]).
// Each entry reports the worst relative error against kGradCheckTol.
inline std::vector<GradCheckResult> run_gradchecks(int width = 16) {
  if (width < 2 || width > 64 || width % 2 != 0)
    throw config_error("gradcheck width must be even and within [2, 64]");

  std::vector<GradCheckResult> results;
  auto record = [&](const std::string& name, double err) {
    results.push_back({name, err, err < kGradCheckTol});
  };

  {  // attention stage: three channels, gate projection, pair masking
    Tape<double> tape;
    BlockConfig cfg;
    cfg.width = width;
    cfg.head_dim = width;
    cfg.ffn_dim = 2 * width;
    cfg.time_buckets = 12;
    cfg.max_len = 4;
    cfg.moe.placement.clear();
    FuxiBlock<double> blk(tape, cfg, "blk", 79);
    auto ctx = build_attn_context<double>({1, 2, 3, 4}, {10, 12, 100, 5000}, 1, 4, 12);
    Rng rng(83);
    auto x = Tensor<double>::leaf(tape, {1, 4, width});
    detail::gc_fill(x, rng);
    auto wsum = detail::gc_readout({1, 4, 3 * width}, rng);
    std::vector<Tensor<double>> leaves{x};
    blk.collect_params(leaves);
    record("attention", detail::gc_max_rel_err(tape, leaves, [&] {
             return sum(mul(blk.ams_forward(x, ctx), wsum));
           }));
  }

  {  // feed-forward stage: output projection, residuals, gated FFN
    Tape<double> tape;
    BlockConfig cfg;
    cfg.width = width;
    cfg.head_dim = width;
    cfg.ffn_dim = 2 * width;
    cfg.time_buckets = 12;
    cfg.max_len = 6;
    cfg.moe.placement.clear();
    FuxiBlock<double> blk(tape, cfg, "blk", 89);
    Rng rng(97);
    auto x = Tensor<double>::leaf(tape, {1, 3, width});
    auto h = Tensor<double>::leaf(tape, {1, 3, 3 * width});
    detail::gc_fill(x, rng);
    detail::gc_fill(h, rng);
    auto wsum = detail::gc_readout({1, 3, width}, rng);
    std::vector<Tensor<double>> leaves{x, h};
    blk.collect_params(leaves);
    record("feed-forward", detail::gc_max_rel_err(tape, leaves, [&] {
             return sum(mul(blk.mffn_forward(h, x), wsum));
           }));
  }

  {  // expert mixture, linear experts: noisy top-k routing with frozen draws
    Tape<double> tape;
    MoeSpec spec;
    spec.num_experts = 3;
    spec.top_k = 2;
    spec.noise_enabled = true;
    MoeLinear<double> moe(tape, width, 3, spec, "site", 79);
    Rng rng(83);
    auto x = Tensor<double>::leaf(tape, {5, width});
    detail::gc_fill(x, rng);
    auto wsum = detail::gc_readout({5, 3}, rng);
    std::vector<Tensor<double>> leaves{x};
    moe.collect_params(leaves);
    record("expert-mixture-linear", detail::gc_max_rel_err(tape, leaves, [&] {
             Rng noise(91);  // same draws every evaluation
             return sum(mul(moe.forward(x, &noise, nullptr), wsum));
           }));
  }

  {  // expert mixture, gated-FFN experts
    Tape<double> tape;
    MoeSpec spec;
    spec.num_experts = 2;
    spec.top_k = 1;
    spec.noise_enabled = true;
    MoeFfn<double> moe(tape, width, width + 2, spec, "ffn", 97);
    Rng rng(101);
    auto x = Tensor<double>::leaf(tape, {4, width});
    detail::gc_fill(x, rng);
    auto wsum = detail::gc_readout({4, width}, rng);
    std::vector<Tensor<double>> leaves{x};
    moe.collect_params(leaves);
    record("expert-mixture-ffn", detail::gc_max_rel_err(tape, leaves, [&] {
             Rng noise(103);
             return sum(mul(moe.forward(x, &noise, nullptr), wsum));
           }));
  }

  SequenceBatch batch;
  batch.batch = 2;
  batch.length = 4;
  batch.item_ids = {1, 2, 3, 4, 0, 5, 6, 7};
  batch.timestamps = {10, 20, 40, 80, 10, 11, 30, 70};
  batch.target_ids = {2, 3, 4, 0, 0, 6, 7, 0};
  // negatives for the five supervised positions, three each, target excluded
  const std::vector<int> negatives = {1, 3, 4, 1, 2, 5, 2, 5, 6, 1, 2, 7, 1, 5, 6};

  ModelConfig base;
  base.num_items = 8;
  base.total_dim = width;
  base.num_streams = 2;
  base.num_layers = 1;
  base.max_len = 4;
  base.time_buckets = 4;
  base.n_neg = 3;

  {  // sampled-softmax objective through the dense model
    Tape<double> tape;
    auto cfg = base;
    cfg.moe.placement.clear();
    Model<double> model(tape, cfg, 47);
    std::vector<Tensor<double>> leaves;
    model.collect_params(leaves);
    record("sampled-softmax-loss", detail::gc_max_rel_err(tape, leaves, [&] {
             return model.loss(batch, negatives);
           }));
  }

  {  // same objective with expert routing and gate noise in the path
    Tape<double> tape;
    auto cfg = base;
    cfg.moe.placement = {MoeSite::ffn, MoeSite::u};
    cfg.moe.num_experts = 2;
    cfg.moe.top_k = 1;
    cfg.moe.noise_enabled = true;
    Model<double> model(tape, cfg, 53);
    std::vector<Tensor<double>> leaves;
    model.collect_params(leaves);
    record("sampled-softmax-loss-routed", detail::gc_max_rel_err(tape, leaves, [&] {
             Rng noise(59);
             return model.loss(batch, negatives, &noise);
           }));
  }

  return results;
}

}  // namespace fxmm
