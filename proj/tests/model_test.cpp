/* ctxmt - a desk-scale laboratory for context-aware neural machine translation.
 * Copyright (C) 2026 The ctxmt authors. All rights reserved.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *   http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include <doctest.h>

#include <cmath>

#include "ctxmt/model.hpp"
#include "oracles.hpp"

using namespace ctxmt;
using testing::random_tensor;

namespace {

ModelConfig tiny_config(IntegrationMode mode = IntegrationMode::kNone) {
  ModelConfig mc = ModelConfig::toy(24, 24);
  mc.d_model = 8;
  mc.num_heads = 2;
  mc.d_ff = 16;
  mc.encoder_layers = 1;
  mc.decoder_layers = 1;
  mc.context_encoder_layers = mode == IntegrationMode::kOutside ||
                                      mode == IntegrationMode::kInside
                                  ? 1
                                  : 0;
  mc.dropout = 0.0;
  mc.mode = mode;
  return mc;
}

Batch tiny_batch() {
  ContextTriple a;
  a.context = {6, 7};
  a.source = {8, 9, 10};
  a.target = {11, 12};
  ContextTriple b;
  b.context = {13};
  b.source = {14, 15};
  b.target = {16, 17, 18};
  return batch_from_triples({a, b});
}

AttentionW<double> hand_attention(RngStream& rng, int d) {
  auto mk = [&]() {
    LinearW<double> l;
    l.w = random_tensor({d, d}, rng, 0.6, false);
    l.b = random_tensor({d}, rng, 0.3, false);
    return l;
  };
  AttentionW<double> w;
  w.q = mk();
  w.k = mk();
  w.v = mk();
  w.o = mk();
  return w;
}

/// Fully independent single-head attention arithmetic: explicit loops,
/// no tensor library calls.
std::vector<double> oracle_attention_1head(
    const AttentionW<double>& w, const std::vector<double>& q_in, int lq,
    const std::vector<double>& kv_in, int lk, int d) {
  auto apply = [&](const LinearW<double>& lin, const std::vector<double>& x,
                   int rows) {
    std::vector<double> y(size_t(rows * d), 0.0);
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < d; ++c) {
        double acc = lin.b.value()[size_t(c)];
        for (int i = 0; i < d; ++i)
          acc += x[size_t(r * d + i)] * lin.w.value()[size_t(i * d + c)];
        y[size_t(r * d + c)] = acc;
      }
    return y;
  };
  auto q = apply(w.q, q_in, lq);
  auto k = apply(w.k, kv_in, lk);
  auto v = apply(w.v, kv_in, lk);
  std::vector<double> att(size_t(lq * d), 0.0);
  for (int i = 0; i < lq; ++i) {
    std::vector<double> scores(size_t(lk), 0.0);
    double mx = -1e300;
    for (int j = 0; j < lk; ++j) {
      double s = 0;
      for (int c = 0; c < d; ++c)
        s += q[size_t(i * d + c)] * k[size_t(j * d + c)];
      scores[size_t(j)] = s / std::sqrt(double(d));
      mx = std::max(mx, scores[size_t(j)]);
    }
    double z = 0;
    for (double& s : scores) {
      s = std::exp(s - mx);
      z += s;
    }
    for (int j = 0; j < lk; ++j)
      for (int c = 0; c < d; ++c)
        att[size_t(i * d + c)] += scores[size_t(j)] / z * v[size_t(j * d + c)];
  }
  return apply(w.o, att, lq);
}

}  // namespace

TEST_CASE("model config validation") {
  ModelConfig mc = tiny_config();
  mc.d_model = 10;
  mc.num_heads = 4;
  CHECK_THROWS_AS(mc.validate(), std::invalid_argument);

  mc = tiny_config(IntegrationMode::kOutside);
  mc.context_encoder_layers = 0;
  CHECK_THROWS_AS(mc.validate(), std::invalid_argument);

  mc = tiny_config();
  mc.weight_sharing = true;  // sharing without a context encoder
  CHECK_THROWS_AS(mc.validate(), std::invalid_argument);

  mc = tiny_config(IntegrationMode::kInside);
  mc.weight_sharing = true;
  mc.context_encoder_layers = 3;  // deeper than the 1-layer source encoder
  CHECK_THROWS_AS(mc.validate(), std::invalid_argument);

  mc = tiny_config();
  mc.dropout = 1.0;
  CHECK_THROWS_AS(mc.validate(), std::invalid_argument);
  mc = tiny_config();
  mc.sigma = -0.1;
  CHECK_THROWS_AS(mc.validate(), std::invalid_argument);
}

TEST_CASE("sinusoidal positions: zeros, ones, and the (sin 1, cos 1) pair") {
  auto pe = sinusoidal_positions<double>(4, 6);
  for (int i = 0; i < 6; i += 2) CHECK(pe.value()[size_t(i)] == 0.0);
  for (int i = 1; i < 6; i += 2) CHECK(pe.value()[size_t(i)] == 1.0);
  CHECK(pe.value()[6] == doctest::Approx(0.8414709848078965).epsilon(1e-10));
  CHECK(pe.value()[7] == doctest::Approx(0.5403023058681398).epsilon(1e-10));
}

TEST_CASE("embedding: determinism, bounds, identical rows") {
  RngStream init(1);
  Model<double> m(tiny_config(), init);
  IdMatrix ids(2, 3);
  for (int c = 0; c < 3; ++c) {
    ids.at(0, c) = int32_t(6 + c);
    ids.at(1, c) = int32_t(6 + c);  // identical rows
  }
  RngStream unused(0);
  auto e = m.embed(ids, EncoderKind::kSource, false, unused);
  CHECK(e.shape() == Shape{2, 3, 8});
  for (int i = 0; i < 3 * 8; ++i)
    CHECK(e.value()[size_t(i)] == e.value()[size_t(24 + i)]);

  IdMatrix big(1, 300);
  big.ids.assign(big.ids.size(), 6);
  CHECK_THROWS_AS(m.embed(big, EncoderKind::kSource, false, unused),
                  std::invalid_argument);
  IdMatrix oob(1, 1);
  oob.at(0, 0) = 24;
  CHECK_THROWS_AS(m.embed(oob, EncoderKind::kSource, false, unused),
                  std::invalid_argument);
}

TEST_CASE("attention with a single key/value puts weight 1 on it") {
  RngStream rng(3);
  const int d = 4;
  AttentionW<double> w = hand_attention(rng, d);
  auto q_in = random_tensor({1, 3, d}, rng, 1.0, false);
  auto kv_in = random_tensor({1, 1, d}, rng, 1.0, false);
  AttnMask mask;
  mask.batch = 1;
  mask.keys = 1;
  mask.valid = {1};

  auto weights = attention_weights(w, 1, q_in, kv_in, mask);
  for (double v : weights.value()) CHECK(v == 1.0);

  auto out = multi_head_attention(w, 1, q_in, kv_in, mask);
  auto expect = oracle_attention_1head(w, q_in.value(), 3, kv_in.value(), 1, d);
  for (size_t i = 0; i < expect.size(); ++i)
    CHECK(out.value()[i] == doctest::Approx(expect[i]).epsilon(1e-12));
}

TEST_CASE("attention with equal scores is uniform over unmasked keys") {
  RngStream rng(5);
  const int d = 4;
  AttentionW<double> w = hand_attention(rng, d);
  auto q_in = random_tensor({1, 2, d}, rng, 1.0, false);
  // all key rows identical -> q.k identical -> uniform weights
  std::vector<double> row{0.3, -0.2, 0.8, 0.1};
  std::vector<double> kv;
  for (int i = 0; i < 5; ++i) kv.insert(kv.end(), row.begin(), row.end());
  auto kv_in = Tensor<double>::from({1, 5, d}, kv);
  AttnMask mask;
  mask.batch = 1;
  mask.keys = 5;
  mask.valid = {1, 1, 1, 0, 1};  // one key masked out

  auto weights = attention_weights(w, 1, q_in, kv_in, mask);
  for (int q = 0; q < 2; ++q) {
    CHECK(weights.value()[size_t(q * 5 + 3)] == 0.0);
    for (int k : {0, 1, 2, 4})
      CHECK(weights.value()[size_t(q * 5 + k)] ==
            doctest::Approx(0.25).epsilon(1e-9));
  }
}

TEST_CASE("one-head attention matches the explicit arithmetic oracle") {
  RngStream rng(7);
  const int d = 2;
  for (int trial = 0; trial < 10; ++trial) {
    AttentionW<double> w = hand_attention(rng, d);
    auto q_in = random_tensor({1, 2, d}, rng, 1.0, false);
    auto kv_in = random_tensor({1, 2, d}, rng, 1.0, false);
    AttnMask mask;
    mask.batch = 1;
    mask.keys = 2;
    mask.valid = {1, 1};
    auto out = multi_head_attention(w, 1, q_in, kv_in, mask);
    auto expect =
        oracle_attention_1head(w, q_in.value(), 2, kv_in.value(), 2, d);
    for (size_t i = 0; i < expect.size(); ++i)
      CHECK(out.value()[i] == doctest::Approx(expect[i]).epsilon(1e-10));
  }
}

TEST_CASE("attention rows over unmasked keys sum to one across heads") {
  RngStream rng(9);
  const int d = 8, heads = 4;
  AttentionW<double> w = hand_attention(rng, d);
  auto q_in = random_tensor({2, 3, d}, rng, 1.0, false);
  auto kv_in = random_tensor({2, 5, d}, rng, 1.0, false);
  AttnMask mask;
  mask.batch = 2;
  mask.keys = 5;
  mask.valid = {1, 1, 1, 0, 1, 1, 0, 1, 1, 1};
  auto weights = attention_weights(w, heads, q_in, kv_in, mask);
  CHECK(weights.shape() == Shape{2 * heads, 3, 5});
  for (int n = 0; n < 2 * heads; ++n) {
    const int b = n / heads;
    for (int q = 0; q < 3; ++q) {
      double s = 0;
      for (int k = 0; k < 5; ++k) {
        double v = weights.value()[size_t((n * 3 + q) * 5 + k)];
        if (!mask.key_valid(b, k)) CHECK(v == 0.0);
        s += v;
      }
      CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
    }
  }
}

TEST_CASE("encoder: shape contract, determinism, empty batch error") {
  RngStream init(11);
  Model<double> m(tiny_config(), init);
  Batch b = tiny_batch();
  RngStream unused(0);
  Rep<double> r1 = m.encode(b.source, EncoderKind::kSource, false, unused);
  CHECK(r1.h.shape() == Shape{2, b.source.cols, 8});
  Rep<double> r2 = m.encode(b.source, EncoderKind::kSource, false, unused);
  CHECK(r1.h.value() == r2.h.value());  // bit-identical at inference

  IdMatrix empty;
  CHECK_THROWS_AS(m.encode(empty, EncoderKind::kSource, false, unused),
                  std::invalid_argument);
}

TEST_CASE("one-layer encoder equals the composition of its sublayers") {
  RngStream init(13);
  ModelConfig mc = tiny_config();
  Model<double> m(mc, init);
  IdMatrix ids(1, 2);
  ids.at(0, 0) = 6;
  ids.at(0, 1) = 7;
  RngStream unused(0);
  Rep<double> got = m.encode(ids, EncoderKind::kSource, false, unused);

  // Rebuild from the individually tested pieces.
  AttnMask mask = pad_mask(ids);
  Tensor<double> x = m.embed(ids, EncoderKind::kSource, false, unused);
  const EncoderLayerW<double>& L = m.enc_layers[0];
  Tensor<double> sa =
      multi_head_attention(L.self_attn, mc.num_heads, x, x, mask);
  x = layer_norm(add(x, sa), L.ln1.gamma, L.ln1.beta);
  Tensor<double> ff = linear(relu(linear(x, L.ff1)), L.ff2);
  x = layer_norm(add(x, ff), L.ln2.gamma, L.ln2.beta);
  for (size_t i = 0; i < x.value().size(); ++i)
    CHECK(got.h.value()[i] == doctest::Approx(x.value()[i]).epsilon(1e-12));
}

TEST_CASE("decoder causality: future tokens cannot move earlier logits") {
  RngStream init(17);
  Model<double> m(tiny_config(), init);
  Batch b = tiny_batch();
  RngStream unused(0);
  MemorySet<double> mem = m.build_memory(b, false, unused);

  Tensor<double> base = m.decoder_forward(b.target_in, mem, false, unused);
  CHECK(base.shape() == Shape{2, b.target_in.cols, 24});

  for (int t = 1; t < b.target_in.cols; ++t) {
    IdMatrix mutated = b.target_in;
    mutated.at(0, t) = mutated.at(0, t) == 20 ? 21 : 20;
    Tensor<double> alt = m.decoder_forward(mutated, mem, false, unused);
    for (int pos = 0; pos < t; ++pos)
      for (int v = 0; v < 24; ++v)
        CHECK(base.value()[size_t((0 * b.target_in.cols + pos) * 24 + v)] ==
              alt.value()[size_t((0 * b.target_in.cols + pos) * 24 + v)]);
  }
}

TEST_CASE("decoder memory-count/mode mismatch is a configuration error") {
  RngStream init(19);
  Model<double> m(tiny_config(), init);  // mode none: one memory only
  Batch b = tiny_batch();
  RngStream unused(0);
  MemorySet<double> mem = m.build_memory(b, false, unused);
  mem.context = mem.source;  // sneak in a second representation
  CHECK_THROWS_AS(m.decoder_forward(b.target_in, mem, false, unused),
                  std::invalid_argument);
}

TEST_CASE("gradient flow reaches every parameter in every mode") {
  for (IntegrationMode mode :
       {IntegrationMode::kNone, IntegrationMode::kSingleEncoder,
        IntegrationMode::kOutside, IntegrationMode::kInside}) {
    RngStream init(23);
    Model<double> m(tiny_config(mode), init);
    Batch b = tiny_batch();
    RngStream drop(29);
    m.params.zero_grads();
    {
      Tape<double> tape;
      auto loss = m.loss_on_batch(b, true, drop);
      backward(loss, tape);
    }
    for (const auto& [name, p] : m.params.items) {
      INFO("mode ", to_string(mode), " parameter ", name);
      REQUIRE(!p.grad().empty());
      for (double g : p.grad()) REQUIRE(std::isfinite(g));
    }
  }
}

TEST_CASE("full composed model gradients match finite differences") {
  RngStream pick(31);
  for (IntegrationMode mode :
       {IntegrationMode::kNone, IntegrationMode::kSingleEncoder,
        IntegrationMode::kOutside, IntegrationMode::kInside}) {
    RngStream init(37);
    ModelConfig mc = tiny_config(mode);
    mc.dropout = 0.1;  // exercised with a per-call frozen stream
    mc.sigma = mode == IntegrationMode::kOutside ? 0.2 : 0.0;
    Model<double> m(mc, init);
    Batch b = tiny_batch();

    auto forward = [&]() {
      RngStream drop(4242);  // same dropout/noise pattern per evaluation
      return m.loss_on_batch(b, true, drop);
    };
    std::vector<Tensor<double>*> leaves;
    for (auto& [name, p] : m.params.items) leaves.push_back(&p);
    auto build = [&]() {
      m.params.zero_grads();
      Tape<double> tape;
      backward(forward(), tape);
    };
    auto value = [&]() { return forward().item(); };
    auto res = testing::check_gradients(build, value, leaves, pick, 2);
    INFO("mode ", to_string(mode));
    CHECK(res.checked > 0);
    CHECK(res.max_rel_err < 1e-4);
  }
}

TEST_CASE("inference forward is bit-identical across calls and rng states") {
  RngStream init(41);
  Model<double> m(tiny_config(IntegrationMode::kOutside), init);
  Batch b = tiny_batch();
  RngStream r1(1), r2(999);
  auto l1 = m.loss_on_batch(b, false, r1);
  auto l2 = m.loss_on_batch(b, false, r2);
  CHECK(l1.item() == l2.item());
  CHECK(r1.counter() == 0);  // inference consumes no randomness
}
