#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include <json.hpp>

#include "fxmm/error.hpp"

namespace fxmm {

// 1-based rank of the target under pessimistic tie handling: every tied
// competitor counts as ranked ahead. scores is indexed by item id; slot 0 is
// PAD and never participates.
template <class S>
int rank_of_target(const std::vector<S>& scores, int target) {
  const int n = static_cast<int>(scores.size());
  if (n < 2) throw state_error("score vector has no real items");
  if (target < 1 || target >= n)
    throw index_error("target id " + std::to_string(target) + " not in score vector [1, " +
                      std::to_string(n) + ")");
  const S st = scores[target];
  if (std::isnan(static_cast<double>(st)))
    throw state_error("target score is NaN for id " + std::to_string(target));
  int rank = 1;
  for (int i = 1; i < n; ++i) {
    if (i == target) continue;
    if (scores[i] >= st) ++rank;
  }
  return rank;
}

namespace detail {
inline void check_rank(int rank) {
  if (rank < 1) throw index_error("rank must be >= 1, got " + std::to_string(rank));
}
inline void check_k(int k) {
  if (k < 1) throw config_error("cutoff K must be >= 1, got " + std::to_string(k));
}
}  // namespace detail

inline double hr_at_k(int rank, int k) {
  detail::check_rank(rank);
  detail::check_k(k);
  return rank <= k ? 1.0 : 0.0;
}

// Single relevant item: ideal DCG is 1, so NDCG reduces to the discount.
inline double ndcg_at_k(int rank, int k) {
  detail::check_rank(rank);
  detail::check_k(k);
  return rank <= k ? 1.0 / std::log2(rank + 1.0) : 0.0;
}

inline double mrr(int rank) {
  detail::check_rank(rank);
  return 1.0 / rank;
}

struct MetricsReport {
  std::vector<int> ks;       // ascending cutoffs
  std::vector<double> hr;    // parallel to ks
  std::vector<double> ndcg;  // parallel to ks
  double mean_mrr = 0.0;
  std::int64_t users = 0;

  std::string json() const {
    nlohmann::json j;
    for (std::size_t i = 0; i < ks.size(); ++i) {
      j["hr@" + std::to_string(ks[i])] = hr[i];
      j["ndcg@" + std::to_string(ks[i])] = ndcg[i];
    }
    j["mrr"] = mean_mrr;
    j["users"] = users;
    return j.dump();
  }

  std::string table() const {
    std::string out;
    char line[64];
    auto row = [&](const std::string& name, double v) {
      std::snprintf(line, sizeof line, "%-10s %10.6f\n", name.c_str(), v);
      out += line;
    };
    for (std::size_t i = 0; i < ks.size(); ++i) row("hr@" + std::to_string(ks[i]), hr[i]);
    for (std::size_t i = 0; i < ks.size(); ++i) row("ndcg@" + std::to_string(ks[i]), ndcg[i]);
    row("mrr", mean_mrr);
    std::snprintf(line, sizeof line, "%-10s %10lld\n", "users",
                  static_cast<long long>(users));
    out += line;
    return out;
  }
};

// Streams per-user ranks into averaged metrics. Hit counts are integral so
// HR is exact; NDCG/MRR accumulate in fixed insertion order.
class MetricsAccumulator {
 public:
  explicit MetricsAccumulator(std::vector<int> ks) : ks_(std::move(ks)) {
    if (ks_.empty()) throw config_error("at least one cutoff K is required");
    std::sort(ks_.begin(), ks_.end());
    ks_.erase(std::unique(ks_.begin(), ks_.end()), ks_.end());
    for (int k : ks_) detail::check_k(k);
    hits_.assign(ks_.size(), 0);
    ndcg_sum_.assign(ks_.size(), 0.0);
  }

  void add_rank(int rank) {
    detail::check_rank(rank);
    for (std::size_t i = 0; i < ks_.size(); ++i) {
      if (rank <= ks_[i]) {
        ++hits_[i];
        ndcg_sum_[i] += 1.0 / std::log2(rank + 1.0);
      }
    }
    mrr_sum_ += 1.0 / rank;
    ++users_;
  }

  std::int64_t users() const { return users_; }

  MetricsReport report() const {
    if (users_ == 0) throw state_error("no users evaluated");
    MetricsReport r;
    r.ks = ks_;
    const auto n = static_cast<double>(users_);
    for (std::size_t i = 0; i < ks_.size(); ++i) {
      r.hr.push_back(hits_[i] / n);
      r.ndcg.push_back(ndcg_sum_[i] / n);
    }
    r.mean_mrr = mrr_sum_ / n;
    r.users = users_;
    return r;
  }

 private:
  std::vector<int> ks_;
  std::vector<std::int64_t> hits_;
  std::vector<double> ndcg_sum_;
  double mrr_sum_ = 0.0;
  std::int64_t users_ = 0;
};

}  // namespace fxmm
