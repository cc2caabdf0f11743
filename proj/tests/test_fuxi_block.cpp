#include <algorithm>
#include <cmath>
#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include <catch2/catch_amalgamated.hpp>

#include "fxmm/fuxi_block.hpp"
#include "test_util.hpp"

using fxmm::AttnContext;
using fxmm::BlockConfig;
using fxmm::build_attn_context;
using fxmm::ErrorKind;
using fxmm::FuxiBlock;
using fxmm::MoeSite;
using fxmm::Tape;
using fxmm::time_bucket;
using D = fxmm::Tensor<double>;
using testutil::fill_uniform;
using testutil::find_param;
using testutil::max_grad_rel_err;
using testutil::require_error;

namespace {

BlockConfig tiny_config() {
  BlockConfig cfg;
  cfg.width = 8;
  cfg.head_dim = 8;
  cfg.ffn_dim = 16;
  cfg.time_buckets = 12;
  cfg.max_len = 6;
  cfg.moe.placement.clear();  // dense unless a test opts in
  return cfg;
}

std::vector<D> params_of(const FuxiBlock<double>& blk) {
  std::vector<D> ps;
  blk.collect_params(ps);
  return ps;
}

}  // namespace

TEST_CASE("time deltas bucket by binary magnitude with clamping") {
  REQUIRE(time_bucket(0, 32) == 0);
  REQUIRE(time_bucket(1, 32) == 0);
  REQUIRE(time_bucket(2, 32) == 1);
  REQUIRE(time_bucket(1023, 32) == 9);
  REQUIRE(time_bucket(1024, 32) == 10);
  REQUIRE(time_bucket(-5, 32) == 0);
  REQUIRE(time_bucket(std::int64_t(1) << 40, 8) == 7);
}

TEST_CASE("block configuration is validated before any allocation") {
  Tape<double> tape;
  auto cfg = tiny_config();
  cfg.width = 0;
  require_error([&] { FuxiBlock<double>(tape, cfg, "blk", 1); }, ErrorKind::config);
  cfg = tiny_config();
  cfg.max_len = -3;
  require_error([&] { FuxiBlock<double>(tape, cfg, "blk", 1); }, ErrorKind::config);
}

TEST_CASE("parameter names are unique and prefixed") {
  Tape<double> tape;
  auto cfg = tiny_config();
  cfg.moe.placement = {MoeSite::ffn, MoeSite::u};
  FuxiBlock<double> blk(tape, cfg, "blk", 5);
  auto ps = params_of(blk);
  std::set<std::string> names;
  for (const auto& p : ps) {
    REQUIRE(p.name().rfind("blk.", 0) == 0);
    REQUIRE(names.insert(p.name()).second);
  }
  REQUIRE(names.count("blk.ffn.expert.0.w1") == 1);
  REQUIRE(names.count("blk.w_u.gate.w_noise") == 1);
}

TEST_CASE("positional bias reads the distance table on the causal triangle") {
  Tape<double> tape;
  FuxiBlock<double> blk(tape, tiny_config(), "blk", 7);
  auto beta = blk.beta();
  for (int i = 0; i < 6; ++i) beta.data()[i] = 0.25 + 0.5 * i;

  auto pb = blk.positional_bias(6);
  for (int i = 0; i < 6; ++i) REQUIRE(pb(i, i) == beta.data()[0]);
  REQUIRE(pb(5, 2) == beta.data()[3]);
  REQUIRE(pb(2, 5) == 0.0);

  std::fill(beta.data().begin(), beta.data().end(), 0.0);
  beta.data()[0] = 1.0;
  auto eye = blk.positional_bias(4);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) REQUIRE(eye(i, j) == (i == j ? 1.0 : 0.0));

  require_error([&] { blk.positional_bias(7); }, ErrorKind::shape);
  require_error([&] { blk.positional_bias(0); }, ErrorKind::shape);
}

TEST_CASE("temporal bias looks up log-delta buckets under the causal mask") {
  Tape<double> tape;
  FuxiBlock<double> blk(tape, tiny_config(), "blk", 9);
  auto ctx = build_attn_context<double>({1, 2, 3}, {0, 1023, 2047}, 1, 3, 12);

  auto zero_bias = blk.temporal_bias(ctx);  // alpha starts all-zero
  for (std::size_t i = 0; i < zero_bias.numel(); ++i) REQUIRE(zero_bias.data()[i] == 0.0);

  auto alpha = blk.alpha();
  for (int b = 0; b < 12; ++b) alpha.data()[b] = 10.0 + b;
  auto at = blk.temporal_bias(ctx);
  REQUIRE(at(0, 0, 0) == 10.0);  // delta 0 -> bucket 0
  REQUIRE(at(0, 1, 0) == 19.0);  // delta 1023 -> bucket 9
  REQUIRE(at(0, 2, 1) == 20.0);  // delta 1024 -> bucket 10
  REQUIRE(at(0, 2, 0) == 20.0);  // delta 2047 -> bucket 10
  REQUIRE(at(0, 0, 1) == 0.0);   // non-causal
  REQUIRE(at(0, 0, 2) == 0.0);
}

TEST_CASE("semantic attention vanishes on all-zero input") {
  Tape<double> tape;
  FuxiBlock<double> blk(tape, tiny_config(), "blk", 11);
  auto ctx = build_attn_context<double>({1, 2, 3, 4}, {10, 20, 30, 40}, 1, 4, 12);
  auto sem = blk.semantic_attention(D::zeros({1, 4, 8}), ctx);
  for (std::size_t i = 0; i < sem.a_h.numel(); ++i) REQUIRE(sem.a_h.data()[i] == 0.0);
  for (std::size_t i = 0; i < sem.v.numel(); ++i) REQUIRE(sem.v.data()[i] == 0.0);
}

TEST_CASE("length-one semantic attention equals the scalar closed form") {
  Tape<double> tape;
  FuxiBlock<double> blk(tape, tiny_config(), "blk", 13);
  auto ctx = build_attn_context<double>({5}, {1000}, 1, 1, 12);
  fxmm::Rng rng(17);
  auto x = D::zeros({1, 1, 8});
  fill_uniform(x, rng, -1.0, 1.0);

  auto sem = blk.semantic_attention(x, ctx);
  REQUIRE(sem.a_h.shape() == fxmm::Shape{1, 1, 1});

  auto ps = params_of(blk);
  auto gain = find_param(ps, "blk.gain_in");
  auto wq = find_param(ps, "blk.w_q");
  auto wk = find_param(ps, "blk.w_k");
  auto sig = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
  double ms = 0.0;
  for (int j = 0; j < 8; ++j) ms += x.data()[j] * x.data()[j];
  const double r = 1.0 / std::sqrt(ms / 8.0 + 1e-6);
  double qk = 0.0;
  for (int c = 0; c < 8; ++c) {
    double qc = 0.0, kc = 0.0;
    for (int j = 0; j < 8; ++j) {
      const double xh = x.data()[j] * r * gain.data()[j];
      qc += xh * wq(j, c);
      kc += xh * wk(j, c);
    }
    qc *= sig(qc);
    kc *= sig(kc);
    qk += qc * kc;
  }
  const double expected = (qk * sig(qk)) / std::sqrt(8.0);
  REQUIRE(sem.a_h(0, 0, 0) == Catch::Approx(expected).epsilon(1e-10));
}

TEST_CASE("pad positions blank their attention row and column") {
  Tape<double> tape;
  FuxiBlock<double> blk(tape, tiny_config(), "blk", 19);
  auto ctx = build_attn_context<double>({1, 2, 0, 3}, {10, 20, 0, 40}, 1, 4, 12);
  fxmm::Rng rng(23);
  auto x = D::zeros({1, 4, 8});
  fill_uniform(x, rng, -1.0, 1.0);
  auto sem = blk.semantic_attention(x, ctx);
  for (int i = 0; i < 4; ++i) {
    REQUIRE(sem.a_h(0, i, 2) == 0.0);
    REQUIRE(sem.a_h(0, 2, i) == 0.0);
  }
  for (int i = 0; i < 4; ++i)
    for (int j = i + 1; j < 4; ++j) REQUIRE(sem.a_h(0, i, j) == 0.0);
}

TEST_CASE("a zero gate projection silences the attention stage") {
  Tape<double> tape;
  FuxiBlock<double> blk(tape, tiny_config(), "blk", 29);
  auto ps = params_of(blk);
  auto wu = find_param(ps, "blk.w_u");
  std::fill(wu.data().begin(), wu.data().end(), 0.0);

  auto ctx = build_attn_context<double>({1, 2, 3}, {5, 6, 7}, 1, 3, 12);
  fxmm::Rng rng(31);
  auto x = D::zeros({1, 3, 8});
  fill_uniform(x, rng, -1.0, 1.0);
  auto h = blk.ams_forward(x, ctx);
  for (std::size_t i = 0; i < h.numel(); ++i) REQUIRE(h.data()[i] == 0.0);
}

TEST_CASE("an all-pad row yields an all-zero attention output") {
  Tape<double> tape;
  FuxiBlock<double> blk(tape, tiny_config(), "blk", 37);
  auto ctx = build_attn_context<double>({0, 0, 0, 1, 2, 3}, {0, 0, 0, 1, 2, 3}, 2, 3, 12);
  fxmm::Rng rng(41);
  auto x = D::zeros({2, 3, 8});
  // batch row 0 is all PAD and carries zero embeddings; row 1 is real
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 8; ++j)
      x.data()[(3 + i) * 8 + j] = rng.next_unit() - 0.5;
  auto h = blk.ams_forward(x, ctx);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 24; ++j) REQUIRE(h(0, i, j) == 0.0);
}

TEST_CASE("the feed-forward stage reduces to the residual when silenced") {
  Tape<double> tape;
  FuxiBlock<double> blk(tape, tiny_config(), "blk", 43);
  auto ps = params_of(blk);
  auto w3 = find_param(ps, "blk.ffn.w3");
  std::fill(w3.data().begin(), w3.data().end(), 0.0);

  fxmm::Rng rng(47);
  auto x = D::zeros({1, 3, 8});
  auto h = D::zeros({1, 3, 24});
  fill_uniform(x, rng, -1.0, 1.0);
  fill_uniform(h, rng, -1.0, 1.0);

  // W3 = 0: the output is exactly o = h W_o + x.
  auto out = blk.mffn_forward(h, x);
  auto wo = find_param(ps, "blk.w_o");
  auto o = fxmm::add(fxmm::matmul(h, wo), x);
  for (std::size_t i = 0; i < out.numel(); ++i)
    REQUIRE(out.data()[i] == Catch::Approx(o.data()[i]).epsilon(1e-12));

  // h = 0 on top of W3 = 0: pure pass-through.
  auto identity = blk.mffn_forward(D::zeros({1, 3, 24}), x);
  for (std::size_t i = 0; i < x.numel(); ++i) REQUIRE(identity.data()[i] == x.data()[i]);

  // the gated FFN itself maps zero to zero
  auto fz = blk.ffn_site().dense().apply(D::zeros({4, 8}));
  for (std::size_t i = 0; i < fz.numel(); ++i) REQUIRE(fz.data()[i] == 0.0);
}

TEST_CASE("perturbing a position never changes earlier outputs") {
  Tape<double> tape;
  FuxiBlock<double> blk(tape, tiny_config(), "blk", 53);
  auto ctx = build_attn_context<double>({1, 2, 3, 4, 5, 1, 2, 3, 4, 5},
                                        {10, 30, 70, 150, 310, 5, 6, 9, 14, 27}, 2, 5, 12);
  fxmm::Rng rng(59);
  auto x = D::zeros({2, 5, 8});
  fill_uniform(x, rng, -1.0, 1.0);
  auto base = blk.forward(x, ctx);

  const int t = 3;
  for (int b = 0; b < 2; ++b)
    for (int j = 0; j < 8; ++j) x.data()[(b * 5 + t) * 8 + j] += 0.37;
  auto bumped = blk.forward(x, ctx);

  for (int b = 0; b < 2; ++b)
    for (int i = 0; i < t; ++i)
      for (int j = 0; j < 8; ++j) REQUIRE(bumped(b, i, j) == base(b, i, j));
  bool later_changed = false;
  for (int j = 0; j < 8; ++j)
    later_changed = later_changed || bumped(0, t, j) != base(0, t, j);
  REQUIRE(later_changed);
}

TEST_CASE("appended pad positions leave real outputs bit-identical") {
  Tape<double> tape;
  FuxiBlock<double> blk(tape, tiny_config(), "blk", 61);
  fxmm::Rng rng(67);
  std::vector<double> rows(3 * 8);
  for (auto& v : rows) v = rng.next_unit() - 0.5;

  std::vector<double> padded(5 * 8, 0.0);
  std::copy(rows.begin(), rows.end(), padded.begin());
  auto x_short = D::constant({1, 3, 8}, rows);
  auto x_long = D::constant({1, 5, 8}, padded);
  auto ctx_short = build_attn_context<double>({1, 2, 3}, {100, 200, 400}, 1, 3, 12);
  auto ctx_long =
      build_attn_context<double>({1, 2, 3, 0, 0}, {100, 200, 400, 0, 0}, 1, 5, 12);

  auto out_short = blk.forward(x_short, ctx_short);
  auto out_long = blk.forward(x_long, ctx_long);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 8; ++j) REQUIRE(out_long(0, i, j) == out_short(0, i, j));
  for (int i = 3; i < 5; ++i)
    for (int j = 0; j < 8; ++j) REQUIRE(out_long(0, i, j) == 0.0);
}

TEST_CASE("outputs stay finite across one thousand random blocks") {
  Tape<float> tape;
  tape.set_mode(fxmm::TapeMode::infer);
  BlockConfig cfg;
  cfg.width = 8;
  cfg.head_dim = 8;
  cfg.ffn_dim = 16;
  cfg.time_buckets = 8;
  cfg.max_len = 4;
  cfg.moe.placement.clear();
  auto ctx = fxmm::build_attn_context<float>({1, 2, 3, 4}, {3, 9, 400, 100000}, 1, 4, 8);
  fxmm::Rng rng(71);
  for (int trial = 0; trial < 1000; ++trial) {
    FuxiBlock<float> blk(tape, cfg, "b", 100000 + static_cast<std::uint64_t>(trial));
    auto x = fxmm::Tensor<float>::zeros({1, 4, 8});
    for (auto& v : x.data()) v = static_cast<float>(rng.next_unit() * 6.0 - 3.0);
    auto y = blk.forward(x, ctx);
    for (float v : y.data()) REQUIRE(std::isfinite(v));
  }
}

TEST_CASE("sequences longer than the configured maximum are rejected") {
  Tape<double> tape;
  FuxiBlock<double> blk(tape, tiny_config(), "blk", 73);
  auto ctx = build_attn_context<double>(std::vector<int>(7, 1), std::vector<std::int64_t>(7, 5),
                                        1, 7, 12);
  require_error([&] { blk.forward(D::zeros({1, 7, 8}), ctx); }, ErrorKind::shape);
}

TEST_CASE("attention-stage gradients match finite differences") {
  Tape<double> tape;
  auto cfg = tiny_config();
  cfg.max_len = 4;
  FuxiBlock<double> blk(tape, cfg, "blk", 79);
  auto ctx = build_attn_context<double>({1, 2, 3, 4}, {10, 12, 100, 5000}, 1, 4, 12);
  fxmm::Rng rng(83);
  auto x = D::leaf(tape, {1, 4, 8});
  fill_uniform(x, rng, -1.0, 1.0);
  auto wsum = D::zeros({1, 4, 24});
  fill_uniform(wsum, rng);

  std::vector<D> leaves{x};
  blk.collect_params(leaves);
  auto err = max_grad_rel_err(tape, leaves, [&] {
    return fxmm::sum(fxmm::mul(blk.ams_forward(x, ctx), wsum));
  });
  REQUIRE(err < 1e-4);
}

TEST_CASE("feed-forward-stage gradients match finite differences") {
  Tape<double> tape;
  FuxiBlock<double> blk(tape, tiny_config(), "blk", 89);
  fxmm::Rng rng(97);
  auto x = D::leaf(tape, {1, 3, 8});
  auto h = D::leaf(tape, {1, 3, 24});
  fill_uniform(x, rng, -1.0, 1.0);
  fill_uniform(h, rng, -1.0, 1.0);
  auto wsum = D::zeros({1, 3, 8});
  fill_uniform(wsum, rng);

  std::vector<D> leaves{x, h};
  blk.collect_params(leaves);
  auto err = max_grad_rel_err(tape, leaves, [&] {
    return fxmm::sum(fxmm::mul(blk.mffn_forward(h, x), wsum));
  });
  REQUIRE(err < 1e-4);
}

TEST_CASE("whole-block gradients match finite differences with routing") {
  Tape<double> tape;
  auto cfg = tiny_config();
  cfg.max_len = 4;
  cfg.moe.placement = {MoeSite::ffn, MoeSite::u};
  cfg.moe.num_experts = 2;
  cfg.moe.top_k = 1;
  cfg.moe.noise_enabled = true;
  FuxiBlock<double> blk(tape, cfg, "blk", 101);
  auto ctx = build_attn_context<double>({1, 2, 3, 4}, {7, 8, 20, 900}, 1, 4, 12);
  fxmm::Rng rng(103);
  auto x = D::leaf(tape, {1, 4, 8});
  fill_uniform(x, rng, -1.0, 1.0);
  auto wsum = D::zeros({1, 4, 8});
  fill_uniform(wsum, rng);

  std::vector<D> leaves{x};
  blk.collect_params(leaves);
  auto err = max_grad_rel_err(tape, leaves, [&] {
    fxmm::Rng noise(107);
    return fxmm::sum(fxmm::mul(blk.forward(x, ctx, &noise), wsum));
  });
  REQUIRE(err < 1e-4);
}
