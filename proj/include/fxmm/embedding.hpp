#pragma once

// Item embeddings decomposed into M independent streams of width d/M each.
// The decomposition preserves the total parameter count |I|*d, so stream
// count trades representational diversity, not capacity. Index 0 is the PAD
// item: its row is zero in every table and never receives gradient, which
// keeps it zero across optimizer steps.

#include <cstdint>
#include <string>
#include <vector>

#include "fxmm/error.hpp"
#include "fxmm/rng.hpp"
#include "fxmm/tensor.hpp"

namespace fxmm {

template <typename S>
class EmbeddingBank {
 public:
  EmbeddingBank(Tape<S>& tape, int num_items, int total_dim, int num_streams,
                std::uint64_t seed)
      : num_items_(num_items), total_dim_(total_dim), num_streams_(num_streams) {
    if (num_streams < 1 || total_dim % num_streams != 0)
      throw config_error("embedding: dim " + std::to_string(total_dim) +
                         " not divisible by stream count " + std::to_string(num_streams));
    if (num_items < 2)
      throw config_error("embedding: need at least PAD plus one real item, got " +
                         std::to_string(num_items) + " ids");
    const int sub = total_dim / num_streams;
    tables_.reserve(static_cast<std::size_t>(num_streams));
    for (int k = 0; k < num_streams; ++k) {
      auto t = Tensor<S>::leaf(tape, {num_items, sub},
                               "item_table." + std::to_string(k));
      Rng rng(mix64(seed ^ mix64(0xe0bedd160ULL + static_cast<std::uint64_t>(k))));
      auto data = t.data();
      for (std::size_t i = static_cast<std::size_t>(sub); i < data.size(); ++i)
        data[i] = static_cast<S>(rng.next_trunc_normal(0.02));
      tables_.push_back(std::move(t));
    }
  }

  int num_items() const noexcept { return num_items_; }
  int total_dim() const noexcept { return total_dim_; }
  int num_streams() const noexcept { return num_streams_; }
  int stream_dim() const noexcept { return total_dim_ / num_streams_; }

  std::int64_t param_count() const noexcept {
    return static_cast<std::int64_t>(num_items_) * total_dim_;
  }

  Tensor<S>& table(int k) { return tables_.at(static_cast<std::size_t>(k)); }
  const Tensor<S>& table(int k) const { return tables_.at(static_cast<std::size_t>(k)); }

  // Row-gather from stream k; ids keep their shape with a trailing d/M axis.
  // Gradient scatters back into the gathered rows only, skipping PAD.
  Tensor<S> lookup_stream(int k, const std::vector<int>& item_ids, Shape id_shape) const {
    if (k < 0 || k >= num_streams_)
      throw index_error("embedding: stream " + std::to_string(k) + " out of range [0," +
                        std::to_string(num_streams_) + ")");
    return lookup(tables_[static_cast<std::size_t>(k)], item_ids, std::move(id_shape),
                  /*zero_grad_row0=*/true);
  }

 private:
  int num_items_;
  int total_dim_;
  int num_streams_;
  std::vector<Tensor<S>> tables_;
};

}  // namespace fxmm
