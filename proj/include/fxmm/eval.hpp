#pragma once

#include <algorithm>
#include <cstdlib>
#include <limits>
#include <string>
#include <thread>
#include <vector>

#include "fxmm/data.hpp"
#include "fxmm/metrics.hpp"
#include "fxmm/model.hpp"

namespace fxmm {

// Worker cap: FXMM_THREADS wins, else hardware concurrency.
inline int resolved_thread_count() {
  if (const char* env = std::getenv("FXMM_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || v < 1)
      throw config_error(std::string("FXMM_THREADS must be a positive integer, got '") + env +
                         "'");
    return static_cast<int>(std::min(v, 256L));
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw > 0 ? static_cast<int>(hw) : 1;
}

template <class S>
class InferGuard {
 public:
  explicit InferGuard(Tape<S>& tape) : tape_(tape), prev_(tape.mode()) {
    tape_.set_mode(TapeMode::infer);
  }
  ~InferGuard() { tape_.set_mode(prev_); }
  InferGuard(const InferGuard&) = delete;
  InferGuard& operator=(const InferGuard&) = delete;

 private:
  Tape<S>& tape_;
  TapeMode prev_;
};

struct EvalOptions {
  SplitPart part = SplitPart::test;
  std::vector<int> ks = {10, 50};
  bool filter_seen = false;  // drop already-consumed items from the pool (target exempt)
  int batch_size = 64;
  int threads = 0;           // 0: resolved_thread_count()
};

// Full-catalog leave-one-out evaluation. Every user is ranked independently;
// ranks land in a per-user slot, so the metric reduction runs in user order
// and the result is identical for any worker count. The tape is switched to
// inference for the duration, which also silences gate noise.
template <class S>
MetricsReport evaluate_model(const Model<S>& model, Tape<S>& tape, const InteractionStore& store,
                             const EvalOptions& opt = {}) {
  if (store.users.empty()) throw state_error("store has no users to evaluate");
  if (opt.batch_size < 1)
    throw config_error("batch_size must be positive, got " + std::to_string(opt.batch_size));
  if (store.num_items != model.config().num_items)
    throw shape_error("store has " + std::to_string(store.num_items) + " ids but the model was "
                      "built for " + std::to_string(model.config().num_items));

  InferGuard<S> guard(tape);
  const int num_users = static_cast<int>(store.users.size());
  const int num_batches = (num_users + opt.batch_size - 1) / opt.batch_size;
  std::vector<int> ranks(static_cast<std::size_t>(num_users), 0);

  auto run_batch = [&](int batch_idx) {
    const int begin = batch_idx * opt.batch_size;
    const int end = std::min(begin + opt.batch_size, num_users);
    std::vector<int> chunk(static_cast<std::size_t>(end - begin));
    for (int u = begin; u < end; ++u) chunk[u - begin] = u;
    EvalBatch eb = make_eval_batch(store, chunk, opt.part, model.config().max_len);
    auto outs = model.encode(eb.batch);
    for (int r = 0; r < eb.batch.batch; ++r) {
      auto scores = model.score_catalog(outs, r, eb.batch.length - 1);
      if (opt.filter_seen) {
        const int user = chunk[r];
        const int input_len = static_cast<int>(store.users[user].size()) -
                              (opt.part == SplitPart::valid ? 2 : 1);
        for (int i = 0; i < input_len; ++i) {
          const int item = store.users[user][i].item;
          if (item != eb.targets[r])
            scores[item] = -std::numeric_limits<S>::infinity();
        }
      }
      ranks[chunk[r]] = rank_of_target(scores, eb.targets[r]);
    }
  };

  const int threads = std::min(opt.threads > 0 ? opt.threads : resolved_thread_count(),
                               num_batches);
  if (threads <= 1) {
    for (int b = 0; b < num_batches; ++b) run_batch(b);
  } else {
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(threads));
    for (int t = 0; t < threads; ++t)
      pool.emplace_back([&, t] {
        for (int b = t; b < num_batches; b += threads) run_batch(b);
      });
    for (auto& th : pool) th.join();
  }

  MetricsAccumulator acc(opt.ks);
  for (int rank : ranks) acc.add_rank(rank);
  return acc.report();
}

}  // namespace fxmm
