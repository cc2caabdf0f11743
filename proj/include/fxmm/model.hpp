#pragma once

// The full sequential recommender: M embedding streams feed one shared
// stack of L decoder blocks (or M unshared stacks in ensemble mode), item
// scores are mean cosine similarity between stream outputs and the tied
// item tables, and training minimizes a sampled-softmax loss over those
// scores. Streams never exchange features; only the final scores mix.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "fxmm/batch.hpp"
#include "fxmm/embedding.hpp"
#include "fxmm/error.hpp"
#include "fxmm/fuxi_block.hpp"
#include "fxmm/moe.hpp"
#include "fxmm/rng.hpp"
#include "fxmm/tensor.hpp"

namespace fxmm {

struct ModelConfig {
  int num_items = 0;    // catalog size including PAD
  int total_dim = 128;  // d
  int num_streams = 4;  // M
  int num_layers = 2;   // L (0 allowed for tests: encode is then the identity)
  int head_dim = 0;     // 0 = stream width
  int ffn_dim = 0;      // 0 = 4x stream width
  int max_len = 50;     // n
  int time_buckets = 32;
  int n_neg = 128;      // negatives per supervised position
  double temperature = 1.0;
  bool sum_reduction = false;  // default is mean over supervised positions
  bool ensemble = false;       // M unshared decoder stacks, scores averaged
  MoeSpec moe;

  int stream_width() const { return total_dim / num_streams; }
  int resolved_head_dim() const { return head_dim > 0 ? head_dim : stream_width(); }
  int resolved_ffn_dim() const { return ffn_dim > 0 ? ffn_dim : 4 * stream_width(); }
};

template <typename S>
class Model {
 public:
  Model(Tape<S>& tape, const ModelConfig& cfg, std::uint64_t seed)
      : cfg_(validated(cfg)), bank_(tape, cfg.num_items, cfg.total_dim,
                                    cfg.num_streams, seed) {
    BlockConfig bc;
    bc.width = cfg_.stream_width();
    bc.head_dim = cfg_.resolved_head_dim();
    bc.ffn_dim = cfg_.resolved_ffn_dim();
    bc.time_buckets = cfg_.time_buckets;
    bc.max_len = cfg_.max_len;
    bc.moe = cfg_.moe;
    const int stacks = cfg_.ensemble ? cfg_.num_streams : 1;
    stacks_.resize(static_cast<std::size_t>(stacks));
    for (int s = 0; s < stacks; ++s)
      for (int l = 0; l < cfg_.num_layers; ++l) {
        const std::string prefix =
            cfg_.ensemble ? "decoder." + std::to_string(s) + ".block." + std::to_string(l)
                          : "block." + std::to_string(l);
        stacks_[static_cast<std::size_t>(s)].emplace_back(tape, bc, prefix, seed);
      }
  }

  const ModelConfig& config() const noexcept { return cfg_; }
  EmbeddingBank<S>& bank() { return bank_; }
  const EmbeddingBank<S>& bank() const { return bank_; }

  std::int64_t param_count() const {
    std::vector<Tensor<S>> ps;
    collect_params(ps);
    std::int64_t n = 0;
    for (const auto& p : ps) n += static_cast<std::int64_t>(p.numel());
    return n;
  }

  void collect_params(std::vector<Tensor<S>>& out) const {
    for (int k = 0; k < cfg_.num_streams; ++k) out.push_back(bank_.table(k));
    for (const auto& stack : stacks_)
      for (const auto& blk : stack) blk.collect_params(out);
  }

  // One tensor per stream, each [B,n,w]: the final decoder states X_k^L.
  std::vector<Tensor<S>> encode(const SequenceBatch& b, Rng* noise_rng = nullptr,
                                MoeUtil* util = nullptr) const {
    auto ctx = build_attn_context<S>(b.item_ids, b.timestamps, b.batch, b.length,
                                     cfg_.time_buckets);
    std::vector<Tensor<S>> outs;
    outs.reserve(static_cast<std::size_t>(cfg_.num_streams));
    for (int k = 0; k < cfg_.num_streams; ++k) {
      auto x = bank_.lookup_stream(k, b.item_ids, {b.batch, b.length});
      const auto& stack = stacks_[cfg_.ensemble ? static_cast<std::size_t>(k) : 0];
      for (const auto& blk : stack) x = blk.forward(x, ctx, noise_rng, util);
      outs.push_back(std::move(x));
    }
    return outs;
  }

  // r(t, i): mean over streams of cos(x_{t,k}, e_{i,k}), computed on values.
  S score(const std::vector<Tensor<S>>& stream_outputs, int b, int pos, int item) const {
    if (item < 1 || item >= cfg_.num_items)
      throw index_error("score: item " + std::to_string(item) + " out of range [1," +
                        std::to_string(cfg_.num_items) + ")");
    const int w = cfg_.stream_width();
    S acc = 0;
    for (int k = 0; k < cfg_.num_streams; ++k) {
      const auto& out = stream_outputs[static_cast<std::size_t>(k)];
      const S* x = out.data().data() +
                   (static_cast<std::size_t>(b) * out.dim(1) + pos) * w;
      const S* e = bank_.table(k).data().data() + static_cast<std::size_t>(item) * w;
      acc += detail::cos_parts(x, e, w).cos;
    }
    return acc / static_cast<S>(cfg_.num_streams);
  }

  // Sampled-softmax objective. negatives is laid out [V x n_neg] over the
  // supervised positions of the batch in row-major (b, pos) order; callers
  // guarantee negatives exclude each position's target.
  Tensor<S> loss(const SequenceBatch& b, const std::vector<int>& negatives,
                 Rng* noise_rng = nullptr, MoeUtil* util = nullptr) const {
    if (cfg_.n_neg < 1)
      throw config_error("loss: negative sample count must be positive");
    std::vector<int> valid_pos;
    std::vector<int> pos_ids;
    for (int i = 0; i < b.batch * b.length; ++i)
      if (b.item_ids[static_cast<std::size_t>(i)] != 0 &&
          b.target_ids[static_cast<std::size_t>(i)] != 0) {
        valid_pos.push_back(i);
        pos_ids.push_back(b.target_ids[static_cast<std::size_t>(i)]);
      }
    const int V = static_cast<int>(valid_pos.size());
    if (V == 0) throw state_error("loss: batch has no supervised positions");
    if (negatives.size() != static_cast<std::size_t>(V) * cfg_.n_neg)
      throw shape_error("loss: expected " + std::to_string(V * cfg_.n_neg) +
                        " negatives, got " + std::to_string(negatives.size()));

    auto outs = encode(b, noise_rng, util);
    const int w = cfg_.stream_width();
    Tensor<S> pos_sum, neg_sum;
    for (int k = 0; k < cfg_.num_streams; ++k) {
      auto flat = reshape(outs[static_cast<std::size_t>(k)], {b.batch * b.length, w});
      auto x = take_rows(flat, valid_pos);
      auto p = cosine_scores(x, bank_.table(k), pos_ids, 1);
      auto n = cosine_scores(x, bank_.table(k), negatives, cfg_.n_neg);
      pos_sum = pos_sum.defined() ? add(pos_sum, p) : p;
      neg_sum = neg_sum.defined() ? add(neg_sum, n) : n;
    }
    const S logit_scale =
        S(1) / (static_cast<S>(cfg_.num_streams) * static_cast<S>(cfg_.temperature));
    auto pos_logits = reshape(scale(pos_sum, logit_scale), {V});
    auto neg_logits = scale(neg_sum, logit_scale);
    auto nll = sum(sampled_softmax_nll(pos_logits, neg_logits));
    return cfg_.sum_reduction ? nll : scale(nll, S(1) / static_cast<S>(V));
  }

  // Scores for the whole catalog (index 0 stays -inf) at one position.
  std::vector<S> score_catalog(const std::vector<Tensor<S>>& stream_outputs, int b,
                               int pos) const {
    const int w = cfg_.stream_width();
    const int items = cfg_.num_items;
    std::vector<S> scores(static_cast<std::size_t>(items),
                          -std::numeric_limits<S>::infinity());
    std::vector<S> xhat(static_cast<std::size_t>(w));
    std::fill(scores.begin() + 1, scores.end(), S(0));
    for (int k = 0; k < cfg_.num_streams; ++k) {
      const auto& out = stream_outputs[static_cast<std::size_t>(k)];
      const S* x = out.data().data() +
                   (static_cast<std::size_t>(b) * out.dim(1) + pos) * w;
      S nx = 0;
      for (int j = 0; j < w; ++j) nx += x[j] * x[j];
      nx = std::max(std::sqrt(nx), S(1e-12));
      for (int j = 0; j < w; ++j) xhat[static_cast<std::size_t>(j)] = x[j] / nx;
      const S* table = bank_.table(k).data().data();
      for (int i = 1; i < items; ++i) {
        const S* e = table + static_cast<std::size_t>(i) * w;
        S ne = 0, dot = 0;
        for (int j = 0; j < w; ++j) {
          ne += e[j] * e[j];
          dot += xhat[static_cast<std::size_t>(j)] * e[j];
        }
        scores[static_cast<std::size_t>(i)] += dot / std::max(std::sqrt(ne), S(1e-12));
      }
    }
    const S inv_m = S(1) / static_cast<S>(cfg_.num_streams);
    for (int i = 1; i < items; ++i) scores[static_cast<std::size_t>(i)] *= inv_m;
    return scores;
  }

  // Ranks every real item at the last position of the given history;
  // descending score, ties broken by ascending id. History items stay in
  // the pool.
  std::vector<int> predict_topk(const std::vector<int>& items,
                                const std::vector<std::int64_t>& timestamps,
                                int K) const {
    if (K < 1 || K > cfg_.num_items - 1)
      throw config_error("predict: K=" + std::to_string(K) + " outside [1," +
                         std::to_string(cfg_.num_items - 1) + "]");
    SequenceBatch b = pack_one(items, timestamps);
    auto outs = encode(b);
    auto scores = score_catalog(outs, 0, b.length - 1);
    std::vector<int> order(static_cast<std::size_t>(cfg_.num_items - 1));
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i) + 1;
    std::partial_sort(order.begin(),
                      order.begin() + std::min<std::size_t>(K, order.size()), order.end(),
                      [&scores](int a, int c) {
                        return scores[a] > scores[c] || (scores[a] == scores[c] && a < c);
                      });
    order.resize(static_cast<std::size_t>(K));
    return order;
  }

  // Left-pads or truncates one history to the configured window.
  SequenceBatch pack_one(const std::vector<int>& items,
                         const std::vector<std::int64_t>& timestamps) const {
    if (items.empty() || items.size() != timestamps.size())
      throw state_error("predict: history is empty or misaligned");
    const int keep = static_cast<int>(std::min<std::size_t>(items.size(), cfg_.max_len));
    SequenceBatch b;
    b.batch = 1;
    b.length = keep;
    b.item_ids.assign(static_cast<std::size_t>(keep), 0);
    b.timestamps.assign(static_cast<std::size_t>(keep), 0);
    b.target_ids.assign(static_cast<std::size_t>(keep), 0);
    const std::size_t start = items.size() - static_cast<std::size_t>(keep);
    for (int i = 0; i < keep; ++i) {
      b.item_ids[static_cast<std::size_t>(i)] = items[start + i];
      b.timestamps[static_cast<std::size_t>(i)] = timestamps[start + i];
    }
    return b;
  }

 private:
  static const ModelConfig& validated(const ModelConfig& cfg) {
    if (cfg.num_items < 2)
      throw config_error("model: catalog needs PAD plus at least one item");
    if (cfg.num_streams < 1 || cfg.total_dim % cfg.num_streams != 0)
      throw config_error("model: dim " + std::to_string(cfg.total_dim) +
                         " not divisible by " + std::to_string(cfg.num_streams) +
                         " streams");
    if (cfg.num_layers < 0) throw config_error("model: negative layer count");
    if (cfg.max_len < 2) throw config_error("model: sequence window must be >= 2");
    return cfg;
  }

  ModelConfig cfg_;
  EmbeddingBank<S> bank_;
  std::vector<std::vector<FuxiBlock<S>>> stacks_;
};

}  // namespace fxmm
