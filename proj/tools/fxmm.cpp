// fxmm: command-line front end for the sequential recommender. Subcommands
// cover training, checkpoint evaluation, ablation variants, gradient
// verification, and synthetic dataset generation. Every failure exits nonzero
// with a single machine-parsable line on stderr: `fxmm: <kind>: <message>`.

#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "fxmm/checkpoint.hpp"
#include "fxmm/data.hpp"
#include "fxmm/error.hpp"
#include "fxmm/eval.hpp"
#include "fxmm/gradcheck.hpp"
#include "fxmm/trainer.hpp"

namespace {

const char* kind_name(fxmm::ErrorKind k) {
  switch (k) {
    case fxmm::ErrorKind::shape: return "shape";
    case fxmm::ErrorKind::config: return "config";
    case fxmm::ErrorKind::index: return "index";
    case fxmm::ErrorKind::parse: return "parse";
    case fxmm::ErrorKind::io: return "io";
    case fxmm::ErrorKind::state: return "state";
  }
  return "unknown";
}

struct TrainArgs {
  std::string config;
  std::int64_t seed = -1;
  bool seed_set = false;
  bool deterministic = false;
};

struct EvaluateArgs {
  std::string checkpoint;
  std::string data;
  std::vector<int> ks = {10, 50};
  bool filter_seen = false;
};

struct AblateArgs {
  std::string variant;
  std::string config;
};

struct GradcheckArgs {
  int width = 16;
};

struct SynthArgs {
  std::string spec;
  std::string out;
};

fxmm::RunSpec load_run_spec(const std::string& path, const std::string* variant) {
  auto kv = fxmm::KeyValueConfig::parse_file(path);
  return fxmm::parse_run_spec(kv, variant);
}

int cmd_train(const TrainArgs& a) {
  auto spec = load_run_spec(a.config, nullptr);
  if (a.seed_set) {
    if (a.seed < 0) throw fxmm::config_error("seed must be non-negative");
    spec.trainer.seed = static_cast<std::uint64_t>(a.seed);
  }
  if (a.deterministic) spec.trainer.deterministic = true;

  auto store = fxmm::load_dataset(spec.data, spec.cache_dir, spec.min_user_len,
                                  spec.min_item_count);
  fxmm::Trainer<float> trainer(store, spec.model, spec.trainer, &std::cout);
  auto result = trainer.run();

  nlohmann::json summary = {{"epochs_run", result.epochs_run},
                            {"best_val_ndcg@10", result.best_val_ndcg10},
                            {"best_checkpoint", result.best_path},
                            {"last_checkpoint", result.last_path}};
  std::cout << summary.dump() << "\n";
  return 0;
}

void print_report(const fxmm::MetricsReport& report) {
  std::cout << report.json() << "\n";
  std::cerr << report.table();
}

int cmd_evaluate(const EvaluateArgs& a) {
  fxmm::Tape<float> tape;
  auto loaded = fxmm::load_checkpoint<float>(a.checkpoint, tape);
  auto store = fxmm::load_dataset(a.data, "", 3, 1);

  fxmm::EvalOptions opt;
  opt.part = fxmm::SplitPart::test;
  opt.ks = a.ks;
  opt.filter_seen = a.filter_seen;
  print_report(fxmm::evaluate_model(*loaded.model, tape, store, opt));
  return 0;
}

int cmd_ablate(const AblateArgs& a) {
  auto spec = load_run_spec(a.config, &a.variant);
  spec.trainer.out_dir += "/" + a.variant;  // variants of one run file coexist

  auto store = fxmm::load_dataset(spec.data, spec.cache_dir, spec.min_user_len,
                                  spec.min_item_count);
  fxmm::Trainer<float> trainer(store, spec.model, spec.trainer, &std::cout);
  auto result = trainer.run();

  fxmm::Tape<float> tape;
  auto best = fxmm::load_checkpoint<float>(result.best_path, tape);
  fxmm::EvalOptions opt;
  opt.part = fxmm::SplitPart::test;
  opt.batch_size = spec.trainer.eval_batch;
  if (spec.trainer.deterministic) opt.threads = 1;
  print_report(fxmm::evaluate_model(*best.model, tape, store, opt));
  return 0;
}

int cmd_gradcheck(const GradcheckArgs& a) {
  bool all_passed = true;
  for (const auto& r : fxmm::run_gradchecks(a.width)) {
    std::printf("%-28s max_rel_err=%.3e  %s\n", r.name.c_str(), r.max_rel_err,
                r.passed ? "PASS" : "FAIL");
    all_passed = all_passed && r.passed;
  }
  return all_passed ? 0 : 1;
}

int cmd_synth(const SynthArgs& a) {
  auto kv = fxmm::KeyValueConfig::parse_file(a.spec);
  auto spec = fxmm::parse_synth_spec(kv);
  auto store = fxmm::generate_synthetic(spec);
  fxmm::save_store(store, a.out);

  std::size_t interactions = 0;
  for (const auto& u : store.users) interactions += u.size();
  nlohmann::json summary = {{"items", store.num_items - 1},
                            {"users", store.users.size()},
                            {"interactions", interactions},
                            {"out", a.out}};
  std::cout << summary.dump() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"sequential recommender: multi-embedding decoder with expert routing"};
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);

  TrainArgs train_args;
  auto* train = app.add_subcommand("train", "fit a model described by a run file");
  train->add_option("--config", train_args.config, "key = value run file")->required();
  auto* seed_opt = train->add_option("--seed", train_args.seed, "override the run file seed");
  train->add_flag("--deterministic", train_args.deterministic,
                  "bit-stable logs and checkpoints (single-threaded evaluation)");

  EvaluateArgs eval_args;
  auto* evaluate = app.add_subcommand("evaluate", "rank the held-out item for every user");
  evaluate->add_option("--checkpoint", eval_args.checkpoint, "trained checkpoint")->required();
  evaluate->add_option("--data", eval_args.data, "interaction log (TSV) or binary store")
      ->required();
  evaluate->add_option("--ks", eval_args.ks, "cutoff list, e.g. 10,50")->delimiter(',');
  evaluate->add_flag("--filter-seen", eval_args.filter_seen,
                     "drop already-seen items from the candidate pool");

  AblateArgs ablate_args;
  auto* ablate = app.add_subcommand("ablate", "train one variant and report test metrics");
  ablate->add_option("--variant", ablate_args.variant, "variant tag")->required();
  ablate->add_option("--config", ablate_args.config, "key = value run file")->required();

  GradcheckArgs grad_args;
  auto* gradcheck = app.add_subcommand("gradcheck", "verify gradients by finite differences");
  gradcheck->add_option("--width", grad_args.width, "stream width (even, 2..64)");

  SynthArgs synth_args;
  auto* synth = app.add_subcommand("synth", "generate a synthetic interaction store");
  synth->add_option("--spec", synth_args.spec, "key = value generator spec")->required();
  synth->add_option("--out", synth_args.out, "output store path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }
  train_args.seed_set = seed_opt->count() > 0;

  try {
    if (train->parsed()) return cmd_train(train_args);
    if (evaluate->parsed()) return cmd_evaluate(eval_args);
    if (ablate->parsed()) return cmd_ablate(ablate_args);
    if (gradcheck->parsed()) return cmd_gradcheck(grad_args);
    if (synth->parsed()) return cmd_synth(synth_args);
  } catch (const fxmm::Error& e) {
    std::fprintf(stderr, "fxmm: %s: %s\n", kind_name(e.kind()), e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "fxmm: internal: %s\n", e.what());
    return 1;
  }
  return 0;
}
