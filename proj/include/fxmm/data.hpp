#pragma once

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "fxmm/batch.hpp"
#include "fxmm/binio.hpp"
#include "fxmm/error.hpp"
#include "fxmm/rng.hpp"

namespace fxmm {

struct Interaction {
  int item = 0;        // dense id in 1..num_items-1
  std::int64_t ts = 0; // unix seconds

  friend bool operator==(const Interaction&, const Interaction&) = default;
};

// Immutable after construction. Events are chronological per user (stable on
// timestamp ties). Dense ids are assigned in ascending original-label order,
// id 0 is reserved for PAD.
struct InteractionStore {
  int num_items = 1;                            // table size: real ids are 1..num_items-1
  std::vector<std::vector<Interaction>> users;
  std::vector<std::int64_t> user_labels;        // original user id per slot
  std::vector<std::int64_t> item_labels;        // original item id per dense id; [0] unused

  friend bool operator==(const InteractionStore&, const InteractionStore&) = default;
};

namespace detail {

inline bool parse_i64_field(std::string_view field, std::int64_t& value) {
  if (field.empty()) return false;
  const char* begin = field.data();
  const char* end = begin + field.size();
  auto res = std::from_chars(begin, end, value);
  return res.ec == std::errc{} && res.ptr == end;
}

inline std::vector<std::string_view> split_tabs(std::string_view line) {
  std::vector<std::string_view> fields;
  std::size_t start = 0;
  while (true) {
    std::size_t tab = line.find('\t', start);
    if (tab == std::string_view::npos) {
      fields.push_back(line.substr(start));
      return fields;
    }
    fields.push_back(line.substr(start, tab - start));
    start = tab + 1;
  }
}

}  // namespace detail

// Reads `user<TAB>item<TAB>unix_timestamp` lines. A header line is detected by
// a non-numeric first field and skipped. Items occurring fewer than
// min_item_count times are dropped first, then users shorter than
// min_user_len; ids are re-indexed densely over what survives.
inline InteractionStore ingest(const std::string& path, int min_user_len = 3,
                               int min_item_count = 1) {
  if (min_user_len < 3)
    throw config_error("min_user_len must be at least 3, got " + std::to_string(min_user_len));
  if (min_item_count < 1)
    throw config_error("min_item_count must be at least 1, got " + std::to_string(min_item_count));
  std::ifstream in(path);
  if (!in) throw io_error("cannot open: " + path);

  struct RawRow {
    std::int64_t user, item, ts;
  };
  std::vector<RawRow> rows;
  std::string line;
  int lineno = 0;
  bool saw_content = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    auto fields = detail::split_tabs(line);
    std::int64_t probe = 0;
    if (!saw_content) {
      saw_content = true;
      if (!detail::parse_i64_field(fields[0], probe)) continue;  // header row
    }
    if (fields.size() != 3)
      throw parse_error("line " + std::to_string(lineno) + ": expected 3 tab-separated fields, got " +
                        std::to_string(fields.size()));
    RawRow r{};
    const char* names[3] = {"user", "item", "timestamp"};
    std::int64_t* slots[3] = {&r.user, &r.item, &r.ts};
    for (int f = 0; f < 3; ++f) {
      if (!detail::parse_i64_field(fields[f], *slots[f]))
        throw parse_error("line " + std::to_string(lineno) + ": " + names[f] +
                          " is not an integer: '" + std::string(fields[f]) + "'");
    }
    rows.push_back(r);
  }
  if (rows.empty()) throw parse_error("no interactions in " + path);

  if (min_item_count > 1) {
    std::unordered_map<std::int64_t, int> counts;
    for (const auto& r : rows) ++counts[r.item];
    std::erase_if(rows, [&](const RawRow& r) { return counts[r.item] < min_item_count; });
  }

  struct Event {
    std::int64_t item, ts;
  };
  std::map<std::int64_t, std::vector<Event>> by_user;
  for (const auto& r : rows) by_user[r.user].push_back({r.item, r.ts});
  for (auto& [label, events] : by_user)
    std::stable_sort(events.begin(), events.end(),
                     [](const Event& a, const Event& b) { return a.ts < b.ts; });
  std::erase_if(by_user, [&](const auto& kv) {
    return kv.second.size() < static_cast<std::size_t>(min_user_len);
  });
  if (by_user.empty())
    throw state_error("no users with at least " + std::to_string(min_user_len) +
                      " interactions after filtering");

  std::map<std::int64_t, int> dense;  // ascending-label id assignment
  for (const auto& [label, events] : by_user)
    for (const auto& e : events) dense.emplace(e.item, 0);
  InteractionStore store;
  store.item_labels.push_back(0);
  for (auto& [label, id] : dense) {
    id = static_cast<int>(store.item_labels.size());
    store.item_labels.push_back(label);
  }
  store.num_items = static_cast<int>(store.item_labels.size());
  for (const auto& [label, events] : by_user) {
    store.user_labels.push_back(label);
    auto& seq = store.users.emplace_back();
    seq.reserve(events.size());
    for (const auto& e : events) seq.push_back({dense.at(e.item), e.ts});
  }
  return store;
}

// ---- fixed-length packing ------------------------------------------------

struct SeqView {
  const Interaction* events = nullptr;
  int len = 0;
};

// Left-pads each view into an n-column row, keeping the most recent n events.
// PAD positions borrow the first kept timestamp so time gaps stay well formed
// (they are masked from attention regardless).
inline SequenceBatch pack_sequences(const std::vector<SeqView>& views, int n) {
  if (n < 1) throw config_error("sequence length must be positive, got " + std::to_string(n));
  if (views.empty()) throw state_error("cannot pack an empty batch");
  SequenceBatch b;
  b.batch = static_cast<int>(views.size());
  b.length = n;
  b.item_ids.assign(static_cast<std::size_t>(b.batch) * n, 0);
  b.timestamps.assign(static_cast<std::size_t>(b.batch) * n, 0);
  b.target_ids.assign(static_cast<std::size_t>(b.batch) * n, 0);
  for (int r = 0; r < b.batch; ++r) {
    const auto& v = views[r];
    if (v.len < 1) throw state_error("cannot pack an empty sequence (row " + std::to_string(r) + ")");
    const int take = std::min(n, v.len);
    const int start = v.len - take;
    const int pad = n - take;
    const std::int64_t first_ts = v.events[start].ts;
    for (int pos = 0; pos < n; ++pos) {
      const std::size_t at = static_cast<std::size_t>(r) * n + pos;
      if (pos < pad) {
        b.timestamps[at] = first_ts;
      } else {
        const auto& e = v.events[start + pos - pad];
        b.item_ids[at] = e.item;
        b.timestamps[at] = e.ts;
      }
    }
  }
  return b;
}

// Leave-one-out split: the last event is the test target, the second-to-last
// validates, everything earlier is the training sequence.
inline int train_len(const InteractionStore& s, int user) {
  return static_cast<int>(s.users[user].size()) - 2;
}

enum class SplitPart { valid, test };

// Training batch over the train views. target[pos] is the next item inside
// the train view; the last view position has target 0 so the held-out
// validation item never appears as supervision.
inline SequenceBatch make_train_batch(const InteractionStore& s, const std::vector<int>& users,
                                      int n_cap) {
  if (n_cap < 2) throw config_error("sequence cap must be at least 2, got " + std::to_string(n_cap));
  std::vector<SeqView> views;
  views.reserve(users.size());
  int n = 1;
  for (int u : users) {
    if (u < 0 || u >= static_cast<int>(s.users.size()))
      throw index_error("user index " + std::to_string(u) + " out of range");
    const int tl = train_len(s, u);
    if (tl < 1) throw state_error("user " + std::to_string(u) + " has an empty train view");
    views.push_back({s.users[u].data(), tl});
    n = std::max(n, std::min(tl, n_cap));
  }
  SequenceBatch b = pack_sequences(views, n);
  for (int r = 0; r < b.batch; ++r) {
    const int tl = views[r].len;
    const int take = std::min(n, tl);
    const int start = tl - take;
    const int pad = n - take;
    for (int pos = pad; pos < n; ++pos) {
      const int j = start + pos - pad;
      if (j + 1 < tl)
        b.target_ids[static_cast<std::size_t>(r) * n + pos] = views[r].events[j + 1].item;
    }
  }
  return b;
}

struct EvalBatch {
  SequenceBatch batch;
  std::vector<int> targets;  // held-out item per row
};

// Evaluation inputs: everything before the held-out target (train view for
// `valid`, train view + validation item for `test`).
inline EvalBatch make_eval_batch(const InteractionStore& s, const std::vector<int>& users,
                                 SplitPart part, int n_cap) {
  if (n_cap < 1) throw config_error("sequence cap must be positive, got " + std::to_string(n_cap));
  std::vector<SeqView> views;
  std::vector<int> targets;
  views.reserve(users.size());
  targets.reserve(users.size());
  int n = 1;
  for (int u : users) {
    if (u < 0 || u >= static_cast<int>(s.users.size()))
      throw index_error("user index " + std::to_string(u) + " out of range");
    const auto& events = s.users[u];
    const int input_len = static_cast<int>(events.size()) - (part == SplitPart::valid ? 2 : 1);
    if (input_len < 1) throw state_error("user " + std::to_string(u) + " is too short to evaluate");
    views.push_back({events.data(), input_len});
    targets.push_back(events[input_len].item);
    n = std::max(n, std::min(input_len, n_cap));
  }
  return {pack_sequences(views, n), std::move(targets)};
}

// ---- negative sampling ---------------------------------------------------

// Appends n_neg distinct ids drawn uniformly from {1..num_items-1} \
// {positive}. History items may appear. With n_neg == num_items-2 the result
// is exactly the complement of the positive, in shuffled order.
inline void sample_negatives(Rng& rng, int n_neg, int positive, int num_items,
                             std::vector<int>& out) {
  const int real = num_items - 1;
  if (positive < 1 || positive >= num_items)
    throw index_error("positive id " + std::to_string(positive) + " not in [1, " +
                      std::to_string(num_items) + ")");
  if (n_neg < 1 || n_neg > real - 1)
    throw config_error("negative count " + std::to_string(n_neg) + " not in [1, " +
                       std::to_string(real - 1) + "] for " + std::to_string(num_items) + " ids");
  if (2 * n_neg >= real - 1) {
    // dense draw: partial Fisher-Yates over the explicit complement
    std::vector<int> pool;
    pool.reserve(real - 1);
    for (int id = 1; id < num_items; ++id)
      if (id != positive) pool.push_back(id);
    for (int i = 0; i < n_neg; ++i) {
      const auto j = i + static_cast<int>(rng.next_below(pool.size() - i));
      std::swap(pool[i], pool[j]);
      out.push_back(pool[i]);
    }
  } else {
    std::unordered_set<int> seen;
    seen.reserve(static_cast<std::size_t>(n_neg) * 2);
    while (static_cast<int>(seen.size()) < n_neg) {
      const int id = 1 + static_cast<int>(rng.next_below(static_cast<std::uint64_t>(real)));
      if (id == positive || !seen.insert(id).second) continue;
      out.push_back(id);
    }
  }
}

// ---- synthetic data ------------------------------------------------------

// Planted-pattern generators with closed-form predictability. `markov`
// follows the successor cycle i -> i % num_items + 1 with probability
// p_follow, else jumps uniformly; a perfect next-item model therefore hits
// top-1 with probability p_follow + (1-p_follow)/num_items. `two_facet`
// factors each id as a (facet_a, facet_b) cell of a facets_a x facets_b grid
// and evolves the facets independently: each is kept with its persistence
// probability, else resampled uniformly among the other values.
struct SynthSpec {
  std::string kind = "markov";  // markov | two_facet
  int num_items = 500;          // real catalog size; PAD id 0 is extra
  int num_users = 2000;
  int min_len = 10;
  int max_len = 30;
  double p_follow = 0.8;        // markov successor probability
  int facets_a = 0;             // two_facet grid; product must equal num_items
  int facets_b = 0;
  double p_a = 0.9;             // facet persistence probabilities
  double p_b = 0.9;
  std::uint64_t seed = 1;
};

inline InteractionStore generate_synthetic(const SynthSpec& sp) {
  if (sp.kind != "markov" && sp.kind != "two_facet")
    throw config_error("unknown synthetic kind: " + sp.kind);
  if (sp.num_items < 2)
    throw config_error("synthetic num_items must be at least 2, got " + std::to_string(sp.num_items));
  if (sp.num_users < 1)
    throw config_error("synthetic num_users must be positive, got " + std::to_string(sp.num_users));
  if (sp.min_len < 3 || sp.max_len < sp.min_len)
    throw config_error("synthetic lengths need 3 <= min_len <= max_len, got [" +
                       std::to_string(sp.min_len) + ", " + std::to_string(sp.max_len) + "]");
  for (double p : {sp.p_follow, sp.p_a, sp.p_b})
    if (p < 0.0 || p > 1.0) throw config_error("synthetic probabilities must lie in [0, 1]");
  if (sp.kind == "two_facet" &&
      (sp.facets_a < 1 || sp.facets_b < 1 || sp.facets_a * sp.facets_b != sp.num_items))
    throw config_error("two_facet needs facets_a * facets_b == num_items, got " +
                       std::to_string(sp.facets_a) + " * " + std::to_string(sp.facets_b) +
                       " != " + std::to_string(sp.num_items));

  Rng rng = Rng::stream(sp.seed, RngPurpose::synthetic, 0);
  InteractionStore store;
  store.num_items = sp.num_items + 1;
  store.item_labels.resize(store.num_items);
  for (int id = 0; id < store.num_items; ++id) store.item_labels[id] = id;
  const auto real = static_cast<std::uint64_t>(sp.num_items);

  auto uniform_other = [&rng](int current, int count) {
    // uniform over {0..count-1} \ {current}
    const auto r = static_cast<int>(rng.next_below(static_cast<std::uint64_t>(count - 1)));
    return r >= current ? r + 1 : r;
  };

  for (int u = 0; u < sp.num_users; ++u) {
    store.user_labels.push_back(u);
    auto& seq = store.users.emplace_back();
    const int len = sp.min_len + static_cast<int>(rng.next_below(
                                     static_cast<std::uint64_t>(sp.max_len - sp.min_len + 1)));
    std::int64_t ts = 1'600'000'000 + u;
    if (sp.kind == "markov") {
      int cur = 1 + static_cast<int>(rng.next_below(real));
      seq.push_back({cur, ts});
      for (int step = 1; step < len; ++step) {
        ts += 60 + static_cast<std::int64_t>(rng.next_below(604741));  // gap in [1 min, 1 week]
        if (rng.next_unit() <= sp.p_follow)
          cur = cur % sp.num_items + 1;
        else
          cur = 1 + static_cast<int>(rng.next_below(real));
        seq.push_back({cur, ts});
      }
    } else {
      int a = static_cast<int>(rng.next_below(static_cast<std::uint64_t>(sp.facets_a)));
      int b = static_cast<int>(rng.next_below(static_cast<std::uint64_t>(sp.facets_b)));
      seq.push_back({1 + a * sp.facets_b + b, ts});
      for (int step = 1; step < len; ++step) {
        ts += 60 + static_cast<std::int64_t>(rng.next_below(604741));
        if (rng.next_unit() > sp.p_a && sp.facets_a > 1) a = uniform_other(a, sp.facets_a);
        if (rng.next_unit() > sp.p_b && sp.facets_b > 1) b = uniform_other(b, sp.facets_b);
        seq.push_back({1 + a * sp.facets_b + b, ts});
      }
    }
  }
  return store;
}

// ---- binary store cache --------------------------------------------------

inline constexpr std::uint32_t kStoreFormatVersion = 1;

inline void save_store(const InteractionStore& s, const std::string& path) {
  auto out = binio::open_write(path);
  out.write("FXST", 4);
  binio::write_pod<std::uint32_t>(out, kStoreFormatVersion);
  binio::write_pod<std::int32_t>(out, s.num_items);
  binio::write_pod<std::uint64_t>(out, s.users.size());
  for (std::size_t u = 0; u < s.users.size(); ++u) {
    binio::write_pod<std::int64_t>(out, s.user_labels[u]);
    binio::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(s.users[u].size()));
    for (const auto& e : s.users[u]) {
      binio::write_pod<std::int32_t>(out, e.item);
      binio::write_pod<std::int64_t>(out, e.ts);
    }
  }
  binio::write_pod<std::uint64_t>(out, s.item_labels.size());
  binio::write_array(out, s.item_labels.data(), s.item_labels.size());
  if (!out) throw io_error("write failed: " + path);
}

inline InteractionStore load_store(const std::string& path) {
  auto in = binio::open_read(path);
  char magic[4] = {};
  in.read(magic, 4);
  if (!in || std::string_view(magic, 4) != "FXST")
    throw parse_error("not a store file: " + path);
  const auto version = binio::read_pod<std::uint32_t>(in, "store version");
  if (version != kStoreFormatVersion)
    throw parse_error("unsupported store version " + std::to_string(version) + " in " + path);
  InteractionStore s;
  s.num_items = binio::read_pod<std::int32_t>(in, "item count");
  const auto num_users = binio::read_pod<std::uint64_t>(in, "user count");
  s.users.reserve(num_users);
  s.user_labels.reserve(num_users);
  for (std::uint64_t u = 0; u < num_users; ++u) {
    s.user_labels.push_back(binio::read_pod<std::int64_t>(in, "user label"));
    const auto len = binio::read_pod<std::uint32_t>(in, "sequence length");
    auto& seq = s.users.emplace_back();
    seq.reserve(len);
    for (std::uint32_t i = 0; i < len; ++i) {
      Interaction e;
      e.item = binio::read_pod<std::int32_t>(in, "event item");
      e.ts = binio::read_pod<std::int64_t>(in, "event timestamp");
      seq.push_back(e);
    }
  }
  const auto num_labels = binio::read_pod<std::uint64_t>(in, "label count");
  s.item_labels.resize(num_labels);
  binio::read_array(in, s.item_labels.data(), num_labels, "item labels");
  return s;
}

// Ingest with a content-addressed cache: the cache key hashes the raw input
// bytes plus the filter settings, so a changed file or flag re-ingests.
inline InteractionStore ingest_cached(const std::string& path, const std::string& cache_dir,
                                      int min_user_len = 3, int min_item_count = 1) {
  std::ifstream raw(path, std::ios::binary);
  if (!raw) throw io_error("cannot open: " + path);
  std::string bytes((std::istreambuf_iterator<char>(raw)), std::istreambuf_iterator<char>());
  std::uint64_t h = binio::fnv1a(bytes.data(), bytes.size());
  h = mix64(h ^ mix64(static_cast<std::uint64_t>(min_user_len) * 0x9e3779b9u +
                      static_cast<std::uint64_t>(min_item_count) + kStoreFormatVersion));
  char name[64];
  std::snprintf(name, sizeof name, "store-%016llx.bin", static_cast<unsigned long long>(h));
  const auto cache_path = std::filesystem::path(cache_dir) / name;
  if (std::filesystem::exists(cache_path)) {
    try {
      return load_store(cache_path.string());
    } catch (const Error&) {
      // stale or corrupt cache entry: fall through and rebuild it
    }
  }
  InteractionStore store = ingest(path, min_user_len, min_item_count);
  std::filesystem::create_directories(cache_dir);
  save_store(store, cache_path.string());
  return store;
}

}  // namespace fxmm
