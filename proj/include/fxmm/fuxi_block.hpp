#pragma once

// One decoder layer: adaptive multi-channel self-attention (semantic,
// temporal and positional channels over shared values) followed by a gated
// feed-forward stage, both with residual-style wiring. Any of the q/k/v/u
// projections and the FFN can be swapped for a sparse expert mixture.
//
// Masking contract: a pair (query i, key j) contributes only when both
// positions hold real items and j <= i. Masked pairs are zeroed in every
// channel. Because the attention is silu-activated rather than
// softmax-normalized, zeroing is exact, and PAD rows propagate as exact
// zeros through the whole stack (no expert has a bias term).

#include <bit>
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "fxmm/error.hpp"
#include "fxmm/moe.hpp"
#include "fxmm/rng.hpp"
#include "fxmm/tensor.hpp"

namespace fxmm {

// Log2 bucketing of a time delta in seconds: bucket b covers [2^b, 2^(b+1))
// with deltas <= 0 in bucket 0 and the top bucket open-ended.
inline int time_bucket(std::int64_t delta, int num_buckets) {
  const std::uint64_t d = delta < 1 ? 1u : static_cast<std::uint64_t>(delta);
  const int b = std::bit_width(d) - 1;
  return b < num_buckets ? b : num_buckets - 1;
}

// Precomputed per-batch attention inputs, shared by all layers and streams.
template <typename S>
struct AttnContext {
  int batch = 0;
  int length = 0;
  Tensor<S> pair_mask;          // [B,n,n]: 1 where the causal pair is valid
  std::vector<int> bucket_ids;  // B*n*n time-delta buckets (0 when masked)
  std::vector<int> pos_ids;     // B*n*n query-key distances (0 when masked)
};

template <typename S>
AttnContext<S> build_attn_context(const std::vector<int>& item_ids,
                                  const std::vector<std::int64_t>& timestamps,
                                  int batch, int length, int num_buckets) {
  const std::size_t total = static_cast<std::size_t>(batch) * length;
  if (item_ids.size() != total || timestamps.size() != total)
    throw shape_error("attention context: expected " + std::to_string(total) +
                      " ids and timestamps");
  AttnContext<S> ctx;
  ctx.batch = batch;
  ctx.length = length;
  std::vector<S> mask(total * length, S(0));
  ctx.bucket_ids.assign(total * length, 0);
  ctx.pos_ids.assign(total * length, 0);
  for (int b = 0; b < batch; ++b)
    for (int i = 0; i < length; ++i) {
      if (item_ids[static_cast<std::size_t>(b) * length + i] == 0) continue;
      const std::int64_t ti = timestamps[static_cast<std::size_t>(b) * length + i];
      for (int j = 0; j <= i; ++j) {
        if (item_ids[static_cast<std::size_t>(b) * length + j] == 0) continue;
        const std::size_t at =
            (static_cast<std::size_t>(b) * length + i) * length + j;
        mask[at] = S(1);
        ctx.bucket_ids[at] = time_bucket(
            ti - timestamps[static_cast<std::size_t>(b) * length + j], num_buckets);
        ctx.pos_ids[at] = i - j;
      }
    }
  ctx.pair_mask = Tensor<S>::constant({batch, length, length}, std::move(mask));
  return ctx;
}

struct BlockConfig {
  int width = 0;         // stream width w
  int head_dim = 0;      // attention channel width d_h
  int ffn_dim = 0;       // FFN hidden width
  int time_buckets = 32;
  int max_len = 0;       // positional table length (max sequence length)
  MoeSpec moe;
};

namespace detail {

template <typename S>
Tensor<S> init_gain(Tape<S>& tape, int d, const std::string& name) {
  auto t = Tensor<S>::leaf(tape, {d}, name);
  t.fill(S(1));
  return t;
}

template <typename S>
Tensor<S> init_zero_table(Tape<S>& tape, int d, const std::string& name) {
  return Tensor<S>::leaf(tape, {d}, name);
}

}  // namespace detail

// A projection that is either one dense matrix or a routed expert mixture.
template <typename S>
class ProjSite {
 public:
  ProjSite(Tape<S>& tape, int in_dim, int out_dim, bool routed, const MoeSpec& spec,
           std::string site_name, const std::string& prefix, std::uint64_t seed)
      : in_(in_dim), out_(out_dim), site_name_(std::move(site_name)) {
    if (routed)
      moe_.emplace(tape, in_dim, out_dim, spec, prefix, seed);
    else
      dense_ = init_weight(tape, {in_dim, out_dim}, prefix, seed);
  }

  // x: [B,n,in] -> [B,n,out]
  Tensor<S> forward(const Tensor<S>& x, Rng* noise_rng, MoeUtil* util) const {
    if (!moe_) return matmul(x, dense_);
    const int B = x.dim(0), n = x.dim(1);
    auto y = moe_->forward(reshape(x, {B * n, in_}), noise_rng,
                           util ? &(*util)[site_name_] : nullptr);
    return reshape(y, {B, n, out_});
  }

  bool routed() const noexcept { return moe_.has_value(); }
  const MoeLinear<S>& moe() const { return *moe_; }
  const Tensor<S>& dense() const { return dense_; }

  void collect_params(std::vector<Tensor<S>>& out) const {
    if (moe_)
      moe_->collect_params(out);
    else
      out.push_back(dense_);
  }

 private:
  int in_, out_;
  std::string site_name_;
  Tensor<S> dense_;
  std::optional<MoeLinear<S>> moe_;
};

// The feed-forward stage, dense or routed.
template <typename S>
class FfnSite {
 public:
  FfnSite(Tape<S>& tape, int width, int hidden, bool routed, const MoeSpec& spec,
          const std::string& prefix, std::uint64_t seed)
      : width_(width) {
    if (routed)
      moe_.emplace(tape, width, hidden, spec, prefix, seed);
    else
      dense_.emplace(tape, width, hidden, prefix, seed);
  }

  Tensor<S> forward(const Tensor<S>& x, Rng* noise_rng, MoeUtil* util) const {
    if (!moe_) return dense_->apply(x);
    const int B = x.dim(0), n = x.dim(1);
    auto y = moe_->forward(reshape(x, {B * n, width_}), noise_rng,
                           util ? &(*util)["ffn"] : nullptr);
    return reshape(y, {B, n, width_});
  }

  bool routed() const noexcept { return moe_.has_value(); }
  const MoeFfn<S>& moe() const { return *moe_; }
  const FfnWeights<S>& dense() const { return *dense_; }

  void collect_params(std::vector<Tensor<S>>& out) const {
    if (moe_)
      moe_->collect_params(out);
    else
      dense_->collect_params(out);
  }

 private:
  int width_;
  std::optional<FfnWeights<S>> dense_;
  std::optional<MoeFfn<S>> moe_;
};

template <typename S>
struct SemanticAttention {
  Tensor<S> a_h;  // [B,n,n] masked channel scores
  Tensor<S> v;    // [B,n,d_h]
};

template <typename S>
class FuxiBlock {
 public:
  static const BlockConfig& validated(const BlockConfig& cfg) {
    if (cfg.width < 1 || cfg.head_dim < 1 || cfg.ffn_dim < 1 || cfg.time_buckets < 1 ||
        cfg.max_len < 1)
      throw config_error("block: all widths and table sizes must be positive");
    return cfg;
  }

  FuxiBlock(Tape<S>& tape, const BlockConfig& cfg, const std::string& prefix,
            std::uint64_t seed)
      : cfg_(validated(cfg)),
        gain_in_(detail::init_gain(tape, cfg.width, prefix + ".gain_in")),
        q_(tape, cfg.width, cfg.head_dim, cfg.moe.placement.count(MoeSite::q) > 0,
           cfg.moe, "q", prefix + ".w_q", seed),
        k_(tape, cfg.width, cfg.head_dim, cfg.moe.placement.count(MoeSite::k) > 0,
           cfg.moe, "k", prefix + ".w_k", seed),
        v_(tape, cfg.width, cfg.head_dim, cfg.moe.placement.count(MoeSite::v) > 0,
           cfg.moe, "v", prefix + ".w_v", seed),
        alpha_(detail::init_zero_table(tape, cfg.time_buckets, prefix + ".alpha")),
        beta_(detail::init_zero_table(tape, cfg.max_len, prefix + ".beta")),
        u_(tape, cfg.width, 3 * cfg.head_dim, cfg.moe.placement.count(MoeSite::u) > 0,
           cfg.moe, "u", prefix + ".w_u", seed),
        gain_gate_(detail::init_gain(tape, 3 * cfg.head_dim, prefix + ".gain_gate")),
        w_o_(init_weight(tape, {3 * cfg.head_dim, cfg.width}, prefix + ".w_o", seed)),
        gain_ffn_(detail::init_gain(tape, cfg.width, prefix + ".gain_ffn")),
        ffn_(tape, cfg.width, cfg.ffn_dim, cfg.moe.placement.count(MoeSite::ffn) > 0,
             cfg.moe, prefix + ".ffn", seed) {}

  // Semantic channel: silu projections of the normalized input, silu-activated
  // scaled scores, masked. The 1/sqrt(d_h) scale sits outside the activation.
  SemanticAttention<S> semantic_attention(const Tensor<S>& x_prev,
                                          const AttnContext<S>& ctx,
                                          Rng* noise_rng = nullptr,
                                          MoeUtil* util = nullptr) const {
    auto xh = rms_norm(x_prev, gain_in_);
    auto q = silu(q_.forward(xh, noise_rng, util));
    auto k = silu(k_.forward(xh, noise_rng, util));
    auto v = silu(v_.forward(xh, noise_rng, util));
    const S inv_sqrt = S(1) / std::sqrt(static_cast<S>(cfg_.head_dim));
    auto a_h = mul(scale(silu(bmm_nt(q, k)), inv_sqrt), ctx.pair_mask);
    return {a_h, v};
  }

  // (a_t)_{i,j} = alpha[bucket(t_i - t_j)] on valid causal pairs, else 0.
  Tensor<S> temporal_bias(const AttnContext<S>& ctx) const {
    check_ctx(ctx);
    return mul(gather1d(alpha_, ctx.bucket_ids, {ctx.batch, ctx.length, ctx.length}),
               ctx.pair_mask);
  }

  // (a_p)_{i,j} = beta[i-j] for j <= i, else 0; unbatched lower-triangular view.
  Tensor<S> positional_bias(int n) const {
    if (n < 1 || n > cfg_.max_len)
      throw shape_error("positional bias: length " + std::to_string(n) +
                        " exceeds table size " + std::to_string(cfg_.max_len));
    std::vector<int> ids(static_cast<std::size_t>(n) * n, 0);
    std::vector<S> tri(static_cast<std::size_t>(n) * n, S(0));
    for (int i = 0; i < n; ++i)
      for (int j = 0; j <= i; ++j) {
        ids[static_cast<std::size_t>(i) * n + j] = i - j;
        tri[static_cast<std::size_t>(i) * n + j] = S(1);
      }
    return mul(gather1d(beta_, ids, {n, n}), Tensor<S>::constant({n, n}, std::move(tri)));
  }

  Tensor<S> positional_bias_batched(const AttnContext<S>& ctx) const {
    check_ctx(ctx);
    return mul(gather1d(beta_, ctx.pos_ids, {ctx.batch, ctx.length, ctx.length}),
               ctx.pair_mask);
  }

  // h = RMSNorm(concat(a_h v, a_t v, a_p v) * silu(U(x_prev))); the gate
  // projection sees the raw (unnormalized) block input.
  Tensor<S> ams_forward(const Tensor<S>& x_prev, const AttnContext<S>& ctx,
                        Rng* noise_rng = nullptr, MoeUtil* util = nullptr) const {
    auto sem = semantic_attention(x_prev, ctx, noise_rng, util);
    auto a_t = temporal_bias(ctx);
    auto a_p = positional_bias_batched(ctx);
    auto cat = concat_last<S>(
        {bmm(sem.a_h, sem.v), bmm(a_t, sem.v), bmm(a_p, sem.v)});
    auto gate = silu(u_.forward(x_prev, noise_rng, util));
    return rms_norm(mul(cat, gate), gain_gate_);
  }

  // o = h W_o + x_prev; out = FFN(RMSNorm(o)) + o.
  Tensor<S> mffn_forward(const Tensor<S>& h, const Tensor<S>& x_prev,
                         Rng* noise_rng = nullptr, MoeUtil* util = nullptr) const {
    auto o = add(matmul(h, w_o_), x_prev);
    auto f = ffn_.forward(rms_norm(o, gain_ffn_), noise_rng, util);
    return add(f, o);
  }

  Tensor<S> forward(const Tensor<S>& x_prev, const AttnContext<S>& ctx,
                    Rng* noise_rng = nullptr, MoeUtil* util = nullptr) const {
    return mffn_forward(ams_forward(x_prev, ctx, noise_rng, util), x_prev, noise_rng,
                        util);
  }

  const BlockConfig& config() const noexcept { return cfg_; }
  Tensor<S>& alpha() { return alpha_; }
  Tensor<S>& beta() { return beta_; }
  const ProjSite<S>& u_site() const { return u_; }
  const ProjSite<S>& q_site() const { return q_; }
  const FfnSite<S>& ffn_site() const { return ffn_; }

  void collect_params(std::vector<Tensor<S>>& out) const {
    out.push_back(gain_in_);
    q_.collect_params(out);
    k_.collect_params(out);
    v_.collect_params(out);
    out.push_back(alpha_);
    out.push_back(beta_);
    u_.collect_params(out);
    out.push_back(gain_gate_);
    out.push_back(w_o_);
    out.push_back(gain_ffn_);
    ffn_.collect_params(out);
  }

 private:
  void check_ctx(const AttnContext<S>& ctx) const {
    if (ctx.length > cfg_.max_len)
      throw shape_error("block: sequence length " + std::to_string(ctx.length) +
                        " exceeds configured maximum " + std::to_string(cfg_.max_len));
  }

  BlockConfig cfg_;
  Tensor<S> gain_in_;
  ProjSite<S> q_, k_, v_;
  Tensor<S> alpha_, beta_;
  ProjSite<S> u_;
  Tensor<S> gain_gate_;
  Tensor<S> w_o_;
  Tensor<S> gain_ffn_;
  FfnSite<S> ffn_;
};

}  // namespace fxmm
