#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "fxmm/adam.hpp"
#include "fxmm/binio.hpp"
#include "fxmm/error.hpp"
#include "fxmm/model.hpp"

// Little-endian checkpoint container: `FXMM` magic, format version, the full
// model configuration, length-prefixed named tensor records, optional Adam
// state aligned with the parameter order, and the training progress record.
// Every field writes through a fixed-width path, so save -> load -> save is
// byte-identical.
namespace fxmm {

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void write_model_config(std::ostream& out, const ModelConfig& c) {
  for (int v : {c.num_items, c.total_dim, c.num_streams, c.num_layers, c.head_dim, c.ffn_dim,
                c.max_len, c.time_buckets, c.n_neg})
    binio::write_pod<std::int32_t>(out, v);
  binio::write_pod<double>(out, c.temperature);
  binio::write_pod<std::uint8_t>(out, c.sum_reduction ? 1 : 0);
  binio::write_pod<std::uint8_t>(out, c.ensemble ? 1 : 0);
  binio::write_pod<std::int32_t>(out, c.moe.num_experts);
  binio::write_pod<std::int32_t>(out, c.moe.top_k);
  binio::write_pod<std::uint8_t>(out, c.moe.noise_enabled ? 1 : 0);
  binio::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(c.moe.placement.size()));
  for (MoeSite site : c.moe.placement)  // std::set iterates in a fixed order
    binio::write_pod<std::uint8_t>(out, static_cast<std::uint8_t>(site));
}

inline ModelConfig read_model_config(std::istream& in) {
  ModelConfig c;
  for (int* v : {&c.num_items, &c.total_dim, &c.num_streams, &c.num_layers, &c.head_dim,
                 &c.ffn_dim, &c.max_len, &c.time_buckets, &c.n_neg})
    *v = binio::read_pod<std::int32_t>(in, "model config");
  c.temperature = binio::read_pod<double>(in, "model config");
  c.sum_reduction = binio::read_pod<std::uint8_t>(in, "model config") != 0;
  c.ensemble = binio::read_pod<std::uint8_t>(in, "model config") != 0;
  c.moe.num_experts = binio::read_pod<std::int32_t>(in, "model config");
  c.moe.top_k = binio::read_pod<std::int32_t>(in, "model config");
  c.moe.noise_enabled = binio::read_pod<std::uint8_t>(in, "model config") != 0;
  const auto sites = binio::read_pod<std::uint32_t>(in, "model config");
  c.moe.placement.clear();
  for (std::uint32_t i = 0; i < sites; ++i) {
    const auto raw = binio::read_pod<std::uint8_t>(in, "moe placement");
    if (raw > static_cast<std::uint8_t>(MoeSite::v))
      throw parse_error("unknown moe site code " + std::to_string(raw));
    c.moe.placement.insert(static_cast<MoeSite>(raw));
  }
  return c;
}

}  // namespace detail

struct TrainProgress {
  std::int64_t epoch = 0;        // epochs completed
  double best_metric = 0.0;      // best validation NDCG@10 so far
  int stale_epochs = 0;          // epochs since the best improved
};

template <class S>
void save_checkpoint(const std::string& path, const Model<S>& model, const Adam<S>* opt,
                     const TrainProgress& progress) {
  auto out = binio::open_write(path);
  out.write("FXMM", 4);
  binio::write_pod<std::uint32_t>(out, kCheckpointVersion);
  detail::write_model_config(out, model.config());

  std::vector<Tensor<S>> params;
  model.collect_params(params);
  binio::write_pod<std::uint8_t>(out, static_cast<std::uint8_t>(sizeof(S)));
  binio::write_pod<std::uint64_t>(out, params.size());
  for (const auto& p : params) {
    binio::write_str(out, p.name());
    const auto& shape = p.shape();
    binio::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(shape.size()));
    for (int d : shape) binio::write_pod<std::int32_t>(out, d);
    binio::write_array(out, p.data().data(), p.numel());
  }

  binio::write_pod<std::uint8_t>(out, opt != nullptr ? 1 : 0);
  if (opt != nullptr) {
    if (opt->params().size() != params.size())
      throw state_error("optimizer tracks " + std::to_string(opt->params().size()) +
                        " tensors but the model has " + std::to_string(params.size()));
    binio::write_pod<std::int64_t>(out, opt->step_count());
    binio::write_pod<double>(out, opt->config().lr);
    binio::write_pod<double>(out, opt->config().beta1);
    binio::write_pod<double>(out, opt->config().beta2);
    binio::write_pod<double>(out, opt->config().eps);
    for (std::size_t i = 0; i < params.size(); ++i) {
      binio::write_array(out, opt->first_moments()[i].data(), opt->first_moments()[i].size());
      binio::write_array(out, opt->second_moments()[i].data(), opt->second_moments()[i].size());
    }
  }

  binio::write_pod<std::int64_t>(out, progress.epoch);
  binio::write_pod<double>(out, progress.best_metric);
  binio::write_pod<std::int32_t>(out, progress.stale_epochs);
  if (!out) throw io_error("write failed: " + path);
}

template <class S>
struct LoadedCheckpoint {
  std::unique_ptr<Model<S>> model;
  TrainProgress progress;
  bool has_optimizer = false;
  std::int64_t opt_steps = 0;
  AdamConfig opt_config;
  std::vector<std::vector<S>> m, v;  // aligned with the model parameter order

  // Builds an optimizer over the model's parameters with the restored state.
  Adam<S> make_optimizer() {
    if (!has_optimizer) throw state_error("checkpoint carries no optimizer state");
    std::vector<Tensor<S>> params;
    model->collect_params(params);
    Adam<S> opt(std::move(params), opt_config);
    opt.restore(opt_steps, std::move(m), std::move(v));
    has_optimizer = false;  // moments were consumed
    return opt;
  }
};

// Rebuilds the model from the stored config on the given tape and installs
// every stored tensor by name. Name or shape disagreement is an error in
// either direction.
template <class S>
LoadedCheckpoint<S> load_checkpoint(const std::string& path, Tape<S>& tape) {
  auto in = binio::open_read(path);
  char magic[4] = {};
  in.read(magic, 4);
  if (!in || std::string_view(magic, 4) != "FXMM")
    throw parse_error("not a checkpoint file: " + path);
  const auto version = binio::read_pod<std::uint32_t>(in, "checkpoint version");
  if (version != kCheckpointVersion)
    throw parse_error("unsupported checkpoint version " + std::to_string(version) + " in " +
                      path);
  const ModelConfig config = detail::read_model_config(in);

  LoadedCheckpoint<S> loaded;
  loaded.model = std::make_unique<Model<S>>(tape, config, 0);
  std::vector<Tensor<S>> params;
  loaded.model->collect_params(params);

  const auto scalar = binio::read_pod<std::uint8_t>(in, "scalar width");
  if (scalar != sizeof(S))
    throw parse_error("checkpoint holds " + std::to_string(scalar) +
                      "-byte scalars, this build expects " + std::to_string(sizeof(S)));
  const auto count = binio::read_pod<std::uint64_t>(in, "tensor count");
  if (count != params.size())
    throw parse_error("checkpoint has " + std::to_string(count) + " tensors, the model needs " +
                      std::to_string(params.size()));
  std::map<std::string, std::pair<Shape, std::vector<S>>> records;
  for (std::uint64_t i = 0; i < count; ++i) {
    auto name = binio::read_str(in, "tensor name");
    const auto rank = binio::read_pod<std::uint32_t>(in, "tensor rank");
    Shape shape;
    std::size_t numel = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      shape.push_back(binio::read_pod<std::int32_t>(in, "tensor shape"));
      numel *= static_cast<std::size_t>(shape.back());
    }
    std::vector<S> data(numel);
    binio::read_array(in, data.data(), numel, "tensor data");
    if (!records.emplace(std::move(name), std::make_pair(std::move(shape), std::move(data)))
             .second)
      throw parse_error("duplicate tensor record in " + path);
  }
  for (auto& p : params) {
    auto it = records.find(p.name());
    if (it == records.end()) throw parse_error("checkpoint is missing tensor " + p.name());
    if (it->second.first != p.shape())
      throw parse_error("shape mismatch for " + p.name() + ": checkpoint has " +
                        shape_str(it->second.first) + ", model has " + shape_str(p.shape()));
    std::copy(it->second.second.begin(), it->second.second.end(), p.data().begin());
  }

  loaded.has_optimizer = binio::read_pod<std::uint8_t>(in, "optimizer flag") != 0;
  if (loaded.has_optimizer) {
    loaded.opt_steps = binio::read_pod<std::int64_t>(in, "optimizer steps");
    loaded.opt_config.lr = binio::read_pod<double>(in, "optimizer config");
    loaded.opt_config.beta1 = binio::read_pod<double>(in, "optimizer config");
    loaded.opt_config.beta2 = binio::read_pod<double>(in, "optimizer config");
    loaded.opt_config.eps = binio::read_pod<double>(in, "optimizer config");
    for (const auto& p : params) {
      std::vector<S> m(p.numel()), v(p.numel());
      binio::read_array(in, m.data(), m.size(), "first moments");
      binio::read_array(in, v.data(), v.size(), "second moments");
      loaded.m.push_back(std::move(m));
      loaded.v.push_back(std::move(v));
    }
  }

  loaded.progress.epoch = binio::read_pod<std::int64_t>(in, "epoch");
  loaded.progress.best_metric = binio::read_pod<double>(in, "best metric");
  loaded.progress.stale_epochs = binio::read_pod<std::int32_t>(in, "stale epochs");
  return loaded;
}

}  // namespace fxmm
