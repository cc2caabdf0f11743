#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <memory>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fxmm/adam.hpp"
#include "fxmm/checkpoint.hpp"
#include "fxmm/config.hpp"
#include "fxmm/data.hpp"
#include "fxmm/eval.hpp"
#include "fxmm/metrics.hpp"
#include "fxmm/model.hpp"
#include "fxmm/rng.hpp"
#include "fxmm/tensor.hpp"

namespace fxmm {

struct TrainerOptions {
  double lr = 1e-3;
  int batch_size = 256;
  int epochs = 100;          // hard cap
  int patience = 10;         // epochs without a validation improvement
  std::uint64_t seed = 1;
  bool deterministic = false;  // also pins evaluation to one worker
  int eval_batch = 64;
  std::string out_dir;       // receives train.log, best.ckpt, last.ckpt
};

// Architecture/run variants. Placement tags follow the projection they swap
// for an expert mixture; the FFN mixture stays on for all of them.
inline void apply_variant(ModelConfig& cfg, const std::string& tag) {
  if (tag == "full") return;
  if (tag == "no-multi-embedding") {
    cfg.num_streams = 1;
  } else if (tag == "ensemble") {
    cfg.ensemble = true;
  } else if (tag == "no-moe") {
    cfg.moe.placement.clear();
  } else if (tag == "no-attention-moe") {
    cfg.moe.placement = {MoeSite::ffn};
  } else if (tag == "qmoe") {
    cfg.moe.placement = {MoeSite::ffn, MoeSite::q};
  } else if (tag == "kmoe") {
    cfg.moe.placement = {MoeSite::ffn, MoeSite::k};
  } else if (tag == "vmoe") {
    cfg.moe.placement = {MoeSite::ffn, MoeSite::v};
  } else if (tag == "umoe") {
    cfg.moe.placement = {MoeSite::ffn, MoeSite::u};
  } else {
    throw config_error("unknown variant '" + tag +
                       "' (expected full, no-multi-embedding, ensemble, no-moe, "
                       "no-attention-moe, qmoe, kmoe, vmoe, or umoe)");
  }
}

struct TrainResult {
  int epochs_run = 0;            // completed epochs, counting resumed ones
  double best_val_ndcg10 = 0.0;
  std::string best_path;
  std::string last_path;
};

// Epoch loop: shuffled mini-batches, Adam, per-epoch validation NDCG@10 with
// early stopping, and a tab-separated log line per epoch. All randomness
// comes from per-purpose streams keyed by (seed, epoch), so epoch e replays
// identically whether reached fresh or via resume.
template <class S = float>
class Trainer {
 public:
  Trainer(const InteractionStore& store, ModelConfig model_cfg, const TrainerOptions& opt,
          std::ostream* echo = nullptr)
      : store_(store), opt_(validated(opt)), echo_(echo) {
    model_cfg.num_items = store.num_items;
    model_ = std::make_unique<Model<S>>(tape_, model_cfg, opt_.seed);
    init_common(/*resumed=*/false);
  }

  // Continues from a last.ckpt written by an earlier run with the same data,
  // seed, and options; the log file is appended to.
  Trainer(const InteractionStore& store, const std::string& checkpoint_path,
          const TrainerOptions& opt, std::ostream* echo = nullptr)
      : store_(store), opt_(validated(opt)), echo_(echo) {
    auto loaded = load_checkpoint<S>(checkpoint_path, tape_);
    if (loaded.model->config().num_items != store.num_items)
      throw shape_error("checkpoint catalog has " +
                        std::to_string(loaded.model->config().num_items) + " ids, store has " +
                        std::to_string(store.num_items));
    if (!loaded.has_optimizer)
      throw state_error("cannot resume: " + checkpoint_path + " has no optimizer state");
    opt_state_ = std::make_unique<Adam<S>>(loaded.make_optimizer());
    model_ = std::move(loaded.model);
    progress_ = loaded.progress;
    init_common(/*resumed=*/true);
  }

  Model<S>& model() { return *model_; }
  Tape<S>& tape() { return tape_; }
  const TrainProgress& progress() const { return progress_; }

  TrainResult run() {
    TrainResult result;
    result.best_path = (out_dir() / "best.ckpt").string();
    result.last_path = (out_dir() / "last.ckpt").string();
    for (std::int64_t epoch = progress_.epoch; epoch < opt_.epochs; ++epoch) {
      const double epoch_loss = run_epoch(epoch);
      const double val = validation_ndcg10();
      log_line(epoch + 1, epoch_loss, val);

      const bool improved = val > progress_.best_metric || progress_.epoch == 0;
      progress_.epoch = epoch + 1;
      if (improved) {
        progress_.best_metric = val;
        progress_.stale_epochs = 0;
        save_checkpoint(result.best_path, *model_, opt_state_.get(), progress_);
      } else {
        ++progress_.stale_epochs;
      }
      save_checkpoint(result.last_path, *model_, opt_state_.get(), progress_);
      if (progress_.stale_epochs >= opt_.patience) break;
    }
    result.epochs_run = static_cast<int>(progress_.epoch);
    result.best_val_ndcg10 = progress_.best_metric;
    return result;
  }

 private:
  static TrainerOptions validated(const TrainerOptions& opt) {
    if (opt.batch_size < 1) throw config_error("batch_size must be >= 1");
    if (opt.patience < 1) throw config_error("patience must be >= 1");
    if (opt.epochs < 1) throw config_error("epochs must be >= 1");
    if (opt.eval_batch < 1) throw config_error("eval_batch must be >= 1");
    if (opt.out_dir.empty()) throw config_error("out_dir must be set");
    return opt;
  }

  std::filesystem::path out_dir() const { return std::filesystem::path(opt_.out_dir); }

  void init_common(bool resumed) {
    for (int u = 0; u < static_cast<int>(store_.users.size()); ++u)
      if (train_len(store_, u) >= 2) trainable_.push_back(u);
    if (trainable_.empty())
      throw state_error("no users with supervised training positions (all histories have "
                        "fewer than 4 events)");
    std::vector<Tensor<S>> params;
    model_->collect_params(params);
    if (!opt_state_) opt_state_ = std::make_unique<Adam<S>>(params, AdamConfig{.lr = opt_.lr});
    params_ = std::move(params);
    std::filesystem::create_directories(out_dir());
    log_.open(out_dir() / "train.log", resumed ? std::ios::app : std::ios::trunc);
    if (!log_) throw io_error("cannot open log in " + opt_.out_dir);
  }

  double run_epoch(std::int64_t epoch) {
    Rng shuffle_rng = Rng::stream(opt_.seed, RngPurpose::shuffle, static_cast<std::uint64_t>(epoch));
    Rng neg_rng = Rng::stream(opt_.seed, RngPurpose::negatives, static_cast<std::uint64_t>(epoch));
    Rng noise_rng = Rng::stream(opt_.seed, RngPurpose::moe_noise, static_cast<std::uint64_t>(epoch));
    std::vector<int> order = trainable_;
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[shuffle_rng.next_below(i)]);

    util_.clear();
    double loss_sum = 0.0;
    std::int64_t positions = 0;
    const int n_neg = model_->config().n_neg;
    std::vector<int> chunk, negatives;
    for (std::size_t begin = 0; begin < order.size(); begin += opt_.batch_size) {
      const auto end = std::min(begin + opt_.batch_size, order.size());
      chunk.assign(order.begin() + begin, order.begin() + end);
      SequenceBatch batch = make_train_batch(store_, chunk, model_->config().max_len);

      negatives.clear();
      std::int64_t batch_positions = 0;
      for (int i = 0; i < batch.batch * batch.length; ++i)
        if (batch.item_ids[static_cast<std::size_t>(i)] != 0 &&
            batch.target_ids[static_cast<std::size_t>(i)] != 0) {
          sample_negatives(neg_rng, n_neg, batch.target_ids[static_cast<std::size_t>(i)],
                           store_.num_items, negatives);
          ++batch_positions;
        }
      if (batch_positions == 0) continue;

      tape_.clear();
      double value = 0.0;
      try {
        auto loss = model_->loss(batch, negatives, &noise_rng, &util_);
        value = static_cast<double>(loss.item());
        if (std::isfinite(value)) backward(loss);
      } catch (const Error& e) {
        // a NaN weight can surface as a shape/state error mid-forward; if one
        // exists, report it instead of the downstream symptom
        abort_if_nan_params(epoch, e.what());
        throw;
      }
      if (!std::isfinite(value)) {
        abort_if_nan_params(epoch, "loss is " + std::to_string(value));
        throw state_error("training aborted at epoch " + std::to_string(epoch + 1) +
                          ": loss is " + std::to_string(value) +
                          " but all parameters are NaN-free");
      }
      opt_state_->step();
      zero_pad_rows();
      for (auto& p : params_) p.zero_grad();
      tape_.clear();

      loss_sum += value * static_cast<double>(batch_positions);
      positions += batch_positions;
    }
    if (positions == 0) throw state_error("epoch saw no supervised positions");
    return loss_sum / static_cast<double>(positions);
  }

  // The PAD embedding never receives gradient, but re-zeroing keeps the
  // invariant explicit even if an optimizer change introduces drift.
  void zero_pad_rows() {
    const auto& bank = model_->bank();
    for (int k = 0; k < bank.num_streams(); ++k) {
      Tensor<S> table = bank.table(k);
      auto row = table.data().subspan(0, static_cast<std::size_t>(bank.stream_dim()));
      std::fill(row.begin(), row.end(), S(0));
    }
  }

  double validation_ndcg10() {
    EvalOptions eo;
    eo.part = SplitPart::valid;
    eo.ks = {10, 50};
    eo.batch_size = opt_.eval_batch;
    eo.threads = opt_.deterministic ? 1 : 0;
    return evaluate_model(*model_, tape_, store_, eo).ndcg[0];
  }

  void log_line(std::int64_t epoch, double loss, double val_ndcg10) {
    char head[96];
    std::snprintf(head, sizeof head, "%lld\t%.6f\t%.6f\t", static_cast<long long>(epoch), loss,
                  val_ndcg10);
    const std::string line = head + nlohmann::json(util_).dump() + "\n";
    log_ << line;
    log_.flush();
    if (echo_ != nullptr) (*echo_) << line;
  }

  // Throws only when some parameter holds a NaN; otherwise returns so the
  // caller can surface its own diagnosis.
  void abort_if_nan_params(std::int64_t epoch, const std::string& reason) {
    for (const auto& p : params_)
      for (S v : p.data())
        if (std::isnan(static_cast<double>(v)))
          throw state_error("training aborted at epoch " + std::to_string(epoch + 1) + ": " +
                            reason + "; first NaN parameter: " + p.name());
  }

  const InteractionStore& store_;
  TrainerOptions opt_;
  std::ostream* echo_;
  Tape<S> tape_;
  std::unique_ptr<Model<S>> model_;
  std::unique_ptr<Adam<S>> opt_state_;
  std::vector<Tensor<S>> params_;
  std::vector<int> trainable_;
  MoeUtil util_;
  TrainProgress progress_;
  std::ofstream log_;
};

// ---- config-file mapping -------------------------------------------------

// One run description: dataset, model shape, and loop controls, all from one
// flat key=value file. num_items is always taken from the ingested data.
struct RunSpec {
  std::string data;          // TSV log or binary store
  std::string cache_dir;     // empty: no store cache
  int min_user_len = 3;
  int min_item_count = 1;
  std::string variant = "full";
  ModelConfig model;
  TrainerOptions trainer;
};

inline std::set<MoeSite> parse_placement(const std::string& text) {
  std::set<MoeSite> out;
  for (const auto& token : KeyValueConfig::split_list(text)) {
    if (token == "ffn") out.insert(MoeSite::ffn);
    else if (token == "u") out.insert(MoeSite::u);
    else if (token == "q") out.insert(MoeSite::q);
    else if (token == "k") out.insert(MoeSite::k);
    else if (token == "v") out.insert(MoeSite::v);
    else throw config_error("unknown moe site '" + token + "' (expected ffn, u, q, k, or v)");
  }
  return out;
}

inline ModelConfig parse_model_config(const KeyValueConfig& kv) {
  ModelConfig m;
  m.total_dim = static_cast<int>(kv.get_int("total_dim", m.total_dim));
  m.num_streams = static_cast<int>(kv.get_int("num_streams", m.num_streams));
  m.num_layers = static_cast<int>(kv.get_int("num_layers", m.num_layers));
  m.head_dim = static_cast<int>(kv.get_int("head_dim", m.head_dim));
  m.ffn_dim = static_cast<int>(kv.get_int("ffn_dim", m.ffn_dim));
  m.max_len = static_cast<int>(kv.get_int("max_len", m.max_len));
  m.time_buckets = static_cast<int>(kv.get_int("time_buckets", m.time_buckets));
  m.n_neg = static_cast<int>(kv.get_int("n_neg", m.n_neg));
  m.temperature = kv.get_double("temperature", m.temperature);
  m.sum_reduction = kv.get_bool("sum_reduction", m.sum_reduction);
  m.ensemble = kv.get_bool("ensemble", m.ensemble);
  m.moe.num_experts = static_cast<int>(kv.get_int("moe_experts", m.moe.num_experts));
  m.moe.top_k = static_cast<int>(kv.get_int("moe_top_k", m.moe.top_k));
  m.moe.noise_enabled = kv.get_bool("moe_noise", m.moe.noise_enabled);
  m.moe.placement = parse_placement(kv.get_string("moe_placement", "ffn,u"));
  return m;
}

inline RunSpec parse_run_spec(const KeyValueConfig& kv,
                              const std::string* variant_override = nullptr) {
  RunSpec rs;
  rs.data = kv.require_string("data");
  rs.cache_dir = kv.get_string("cache_dir", "");
  rs.min_user_len = static_cast<int>(kv.get_int("min_user_len", rs.min_user_len));
  rs.min_item_count = static_cast<int>(kv.get_int("min_item_count", rs.min_item_count));
  rs.variant = kv.get_string("variant", rs.variant);
  if (variant_override != nullptr) rs.variant = *variant_override;
  rs.model = parse_model_config(kv);
  rs.trainer.lr = kv.get_double("lr", rs.trainer.lr);
  rs.trainer.batch_size = static_cast<int>(kv.get_int("batch_size", rs.trainer.batch_size));
  rs.trainer.epochs = static_cast<int>(kv.get_int("epochs", rs.trainer.epochs));
  rs.trainer.patience = static_cast<int>(kv.get_int("patience", rs.trainer.patience));
  const std::int64_t seed = kv.get_int("seed", 1);
  if (seed < 0) throw config_error("seed must be non-negative");
  rs.trainer.seed = static_cast<std::uint64_t>(seed);
  rs.trainer.deterministic = kv.get_bool("deterministic", false);
  rs.trainer.eval_batch = static_cast<int>(kv.get_int("eval_batch", rs.trainer.eval_batch));
  rs.trainer.out_dir = kv.get_string("out_dir", "run-out");
  kv.finish();
  apply_variant(rs.model, rs.variant);
  return rs;
}

inline SynthSpec parse_synth_spec(const KeyValueConfig& kv) {
  SynthSpec sp;
  sp.kind = kv.get_string("kind", sp.kind);
  sp.num_items = static_cast<int>(kv.get_int("num_items", sp.num_items));
  sp.num_users = static_cast<int>(kv.get_int("num_users", sp.num_users));
  sp.min_len = static_cast<int>(kv.get_int("min_len", sp.min_len));
  sp.max_len = static_cast<int>(kv.get_int("max_len", sp.max_len));
  sp.p_follow = kv.get_double("p_follow", sp.p_follow);
  sp.facets_a = static_cast<int>(kv.get_int("facets_a", sp.facets_a));
  sp.facets_b = static_cast<int>(kv.get_int("facets_b", sp.facets_b));
  sp.p_a = kv.get_double("p_a", sp.p_a);
  sp.p_b = kv.get_double("p_b", sp.p_b);
  const std::int64_t seed = kv.get_int("seed", 1);
  if (seed < 0) throw config_error("seed must be non-negative");
  sp.seed = static_cast<std::uint64_t>(seed);
  kv.finish();
  return sp;
}

// Loads either format by sniffing the store magic.
inline InteractionStore load_dataset(const std::string& path, const std::string& cache_dir,
                                     int min_user_len, int min_item_count) {
  {
    std::ifstream probe(path, std::ios::binary);
    if (!probe) throw io_error("cannot open: " + path);
    char magic[4] = {};
    probe.read(magic, 4);
    if (probe.gcount() == 4 && std::string_view(magic, 4) == "FXST") return load_store(path);
  }
  if (cache_dir.empty()) return ingest(path, min_user_len, min_item_count);
  return ingest_cached(path, cache_dir, min_user_len, min_item_count);
}

}  // namespace fxmm
