#pragma once

// Noisy top-k sparse mixture-of-experts routing. Experts at projection
// sites are plain linear maps (any activation stays outside the mixture);
// the ffn site routes whole gated feed-forward sub-networks. Unselected
// experts are never evaluated, so compute and gradient flow are sparse.

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "fxmm/error.hpp"
#include "fxmm/rng.hpp"
#include "fxmm/tensor.hpp"

namespace fxmm {

enum class MoeSite { ffn, u, q, k, v };

inline const char* moe_site_name(MoeSite s) {
  switch (s) {
    case MoeSite::ffn: return "ffn";
    case MoeSite::u: return "u";
    case MoeSite::q: return "q";
    case MoeSite::k: return "k";
    case MoeSite::v: return "v";
  }
  return "?";
}

struct MoeSpec {
  int num_experts = 4;
  int top_k = 2;
  std::set<MoeSite> placement = {MoeSite::ffn, MoeSite::u};
  bool noise_enabled = true;
};

// Per-epoch expert-selection counts, keyed by site name, summed over layers.
using MoeUtil = std::map<std::string, std::vector<std::int64_t>>;

// FNV-1a; stable across platforms, used to derive per-parameter init seeds.
inline std::uint64_t name_hash(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

template <typename S>
Tensor<S> init_weight(Tape<S>& tape, Shape shape, const std::string& name,
                      std::uint64_t seed, double stddev = 0.02) {
  auto t = Tensor<S>::leaf(tape, std::move(shape), name);
  Rng rng(mix64(seed ^ name_hash(name)));
  for (auto& v : t.data()) v = static_cast<S>(rng.next_trunc_normal(stddev));
  return t;
}

// The gated feed-forward unit: (silu(x W1) * (x W2)) W3. Used both as the
// dense block FFN and as one expert of the ffn mixture.
template <typename S>
struct FfnWeights {
  Tensor<S> w1, w2, w3;

  FfnWeights(Tape<S>& tape, int width, int hidden, const std::string& prefix,
             std::uint64_t seed)
      : w1(init_weight(tape, {width, hidden}, prefix + ".w1", seed)),
        w2(init_weight(tape, {width, hidden}, prefix + ".w2", seed)),
        w3(init_weight(tape, {hidden, width}, prefix + ".w3", seed)) {}

  Tensor<S> apply(const Tensor<S>& x) const {
    return matmul(mul(silu(matmul(x, w1)), matmul(x, w2)), w3);
  }

  void collect_params(std::vector<Tensor<S>>& out) const {
    out.push_back(w1);
    out.push_back(w2);
    out.push_back(w3);
  }
};

// Noisy top-k gate. Train mode adds eps * softplus(x W_noise) to the
// logits (eps drawn per token in index order); inference uses x W_g
// exactly. Output is a dense [tokens x N] weight matrix whose rows have
// exactly top_k positive entries summing to 1.
template <typename S>
class MoeGate {
 public:
  static const MoeSpec& validated(const MoeSpec& spec) {
    if (spec.num_experts < 1)
      throw config_error("moe: expert count must be positive, got " +
                         std::to_string(spec.num_experts));
    if (spec.top_k < 1 || spec.top_k > spec.num_experts)
      throw config_error("moe: top_k=" + std::to_string(spec.top_k) + " outside [1," +
                         std::to_string(spec.num_experts) + "]");
    return spec;
  }

  MoeGate(Tape<S>& tape, int in_dim, const MoeSpec& spec, const std::string& prefix,
          std::uint64_t seed)
      : num_experts_(validated(spec).num_experts),
        top_k_(spec.top_k),
        noise_enabled_(spec.noise_enabled),
        w_g_(init_weight(tape, {in_dim, spec.num_experts}, prefix + ".w_g", seed)),
        w_noise_(init_weight(tape, {in_dim, spec.num_experts}, prefix + ".w_noise", seed)) {}

  Tensor<S> weights(const Tensor<S>& x, Rng* noise_rng) const {
    Tensor<S> h = matmul(x, w_g_);
    if (noise_enabled_ && noise_rng != nullptr && w_g_.tape()->recording()) {
      const int T = x.dim(0);
      std::vector<S> eps(static_cast<std::size_t>(T) * num_experts_);
      for (auto& e : eps) e = static_cast<S>(noise_rng->next_gaussian());
      h = add(h, mul(Tensor<S>::constant({T, num_experts_}, std::move(eps)),
                     softplus(matmul(x, w_noise_))));
    }
    return softmax(keep_top_k(h, top_k_), 1);
  }

  int num_experts() const noexcept { return num_experts_; }
  int top_k() const noexcept { return top_k_; }

  void collect_params(std::vector<Tensor<S>>& out) const {
    out.push_back(w_g_);
    out.push_back(w_noise_);
  }

 private:
  int num_experts_;
  int top_k_;
  bool noise_enabled_;
  Tensor<S> w_g_, w_noise_;
};

// Evaluates only the experts each token selected: tokens are grouped per
// expert, run through it in one batch, rescaled by their gate weight and
// scattered back. Equivalent to the dense weighted sum because zero-weight
// terms contribute nothing.
template <typename S, typename ExpertFn>
Tensor<S> route_tokens(const Tensor<S>& x, const Tensor<S>& gate_weights,
                       ExpertFn&& expert, std::vector<std::int64_t>* util) {
  const int T = x.dim(0);
  const int N = gate_weights.dim(1);
  if (util && util->size() < static_cast<std::size_t>(N)) util->resize(N, 0);
  Tensor<S> acc;
  for (int e = 0; e < N; ++e) {
    std::vector<int> tokens;
    std::vector<std::size_t> offsets;
    for (int t = 0; t < T; ++t)
      if (gate_weights(t, e) > S(0)) {
        tokens.push_back(t);
        offsets.push_back(static_cast<std::size_t>(t) * N + e);
      }
    if (util) (*util)[e] += static_cast<std::int64_t>(tokens.size());
    if (tokens.empty()) continue;
    auto scaled = mul_rows(expert(e, take_rows(x, tokens)),
                           take_scalars(gate_weights, offsets));
    auto placed = scatter_rows(scaled, tokens, T);
    acc = acc.defined() ? add(acc, placed) : placed;
  }
  return acc;
}

// Mixture over linear maps [in x out]; replaces one dense projection.
template <typename S>
class MoeLinear {
 public:
  MoeLinear(Tape<S>& tape, int in_dim, int out_dim, const MoeSpec& spec,
            const std::string& prefix, std::uint64_t seed)
      : gate_(tape, in_dim, spec, prefix + ".gate", seed) {
    experts_.reserve(static_cast<std::size_t>(spec.num_experts));
    for (int e = 0; e < spec.num_experts; ++e)
      experts_.push_back(init_weight(tape, {in_dim, out_dim},
                                     prefix + ".expert." + std::to_string(e), seed));
  }

  Tensor<S> forward(const Tensor<S>& x, Rng* noise_rng,
                    std::vector<std::int64_t>* util) const {
    auto w = gate_.weights(x, noise_rng);
    return route_tokens(x, w, [this](int e, const Tensor<S>& sub) {
      return matmul(sub, experts_[static_cast<std::size_t>(e)]);
    }, util);
  }

  const MoeGate<S>& gate() const { return gate_; }
  const Tensor<S>& expert(int e) const { return experts_.at(static_cast<std::size_t>(e)); }

  void collect_params(std::vector<Tensor<S>>& out) const {
    for (const auto& e : experts_) out.push_back(e);
    gate_.collect_params(out);
  }

 private:
  std::vector<Tensor<S>> experts_;
  MoeGate<S> gate_;
};

// Mixture over whole feed-forward sub-networks.
template <typename S>
class MoeFfn {
 public:
  MoeFfn(Tape<S>& tape, int width, int hidden, const MoeSpec& spec,
         const std::string& prefix, std::uint64_t seed)
      : gate_(tape, width, spec, prefix + ".gate", seed) {
    experts_.reserve(static_cast<std::size_t>(spec.num_experts));
    for (int e = 0; e < spec.num_experts; ++e)
      experts_.emplace_back(tape, width, hidden,
                            prefix + ".expert." + std::to_string(e), seed);
  }

  Tensor<S> forward(const Tensor<S>& x, Rng* noise_rng,
                    std::vector<std::int64_t>* util) const {
    auto w = gate_.weights(x, noise_rng);
    return route_tokens(x, w, [this](int e, const Tensor<S>& sub) {
      return experts_[static_cast<std::size_t>(e)].apply(sub);
    }, util);
  }

  const MoeGate<S>& gate() const { return gate_; }
  const FfnWeights<S>& expert(int e) const {
    return experts_.at(static_cast<std::size_t>(e));
  }

  void collect_params(std::vector<Tensor<S>>& out) const {
    for (const auto& e : experts_) e.collect_params(out);
    gate_.collect_params(out);
  }

 private:
  std::vector<FfnWeights<S>> experts_;
  MoeGate<S> gate_;
};

}  // namespace fxmm
