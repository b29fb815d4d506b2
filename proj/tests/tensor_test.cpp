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

#include "ctxmt/tensor.hpp"
#include "oracles.hpp"

using namespace ctxmt;
using testing::check_gradients;
using testing::random_tensor;

namespace {

Tensor<double> constant(Shape shape, std::vector<double> vals) {
  return Tensor<double>::from(std::move(shape), std::move(vals));
}

}  // namespace

TEST_CASE("matmul identity and annihilator") {
  auto x = constant({2, 2}, {5, 6, 7, 8});
  auto eye = constant({2, 2}, {1, 0, 0, 1});
  auto zero = Tensor<double>::zeros({2, 2});
  CHECK(matmul(eye, x).value() == std::vector<double>{5, 6, 7, 8});
  CHECK(matmul(zero, x).value() == std::vector<double>{0, 0, 0, 0});
}

TEST_CASE("matmul 2x2 worked example") {
  auto a = constant({2, 2}, {1, 2, 3, 4});
  auto b = constant({2, 2}, {5, 6, 7, 8});
  CHECK(matmul(a, b).value() == std::vector<double>{19, 22, 43, 50});
}

TEST_CASE("matmul batched broadcast and transpose") {
  RngStream rng(11);
  auto a = random_tensor({3, 2, 4}, rng);
  auto b = random_tensor({4, 5}, rng);
  auto c = matmul(a, b);
  CHECK(c.shape() == Shape{3, 2, 5});
  // batch slice 2 equals the plain 2-D product of that slice
  auto a2 = constant({2, 4}, std::vector<double>(a.value().begin() + 16,
                                                 a.value().begin() + 24));
  auto c2 = matmul(a2, b);
  for (int i = 0; i < 10; ++i)
    CHECK(c.value()[size_t(20 + i)] == doctest::Approx(c2.value()[size_t(i)]));

  auto bt = random_tensor({5, 4}, rng);
  auto ct = matmul(a, bt, /*transpose_b=*/true);
  CHECK(ct.shape() == Shape{3, 2, 5});
}

TEST_CASE("matmul dimension mismatch names both shapes") {
  auto a = Tensor<double>::zeros({2, 3});
  auto b = Tensor<double>::zeros({2, 3});
  try {
    matmul(a, b);
    FAIL("expected shape error");
  } catch (const std::invalid_argument& e) {
    std::string msg = e.what();
    CHECK(msg.find("[2 x 3]") != std::string::npos);
  }
}

TEST_CASE("softmax basics") {
  auto sym = softmax(constant({2}, {0, 0}));
  CHECK(sym.value()[0] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(sym.value()[1] == doctest::Approx(0.5).epsilon(1e-12));

  // High-precision independent evaluation of exp/sum for [1, 2, 3].
  auto p = softmax(constant({3}, {1, 2, 3}));
  CHECK(p.value()[0] == doctest::Approx(0.09003057317038046).epsilon(1e-10));
  CHECK(p.value()[1] == doctest::Approx(0.24472847105479767).epsilon(1e-10));
  CHECK(p.value()[2] == doctest::Approx(0.66524095577482190).epsilon(1e-10));
}

TEST_CASE("softmax rows sum to one and shift invariance") {
  RngStream rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    auto x = random_tensor({3, 5}, rng, 4.0, false);
    auto y = softmax(x, -1);
    for (int r = 0; r < 3; ++r) {
      double s = 0;
      for (int c = 0; c < 5; ++c) s += y.value()[size_t(r * 5 + c)];
      CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
    }
    double shift = rng.uniform() * 10 - 5;
    auto xs = x.detached_copy();
    for (double& v : xs.value()) v += shift;
    auto ys = softmax(xs, -1);
    for (size_t i = 0; i < y.value().size(); ++i)
      CHECK(std::abs(y.value()[i] - ys.value()[i]) < 1e-12);
  }
}

TEST_CASE("softmax axis handling") {
  auto x = random_tensor({2, 3, 4}, *new RngStream(3), 1.0, false);
  auto y = softmax(x, 1);
  for (int b = 0; b < 2; ++b)
    for (int c = 0; c < 4; ++c) {
      double s = 0;
      for (int j = 0; j < 3; ++j) s += y.value()[size_t((b * 3 + j) * 4 + c)];
      CHECK(s == doctest::Approx(1.0).epsilon(1e-9));
    }
  CHECK_THROWS_AS(softmax(x, 3), std::invalid_argument);
  CHECK_THROWS_AS(softmax(x, -4), std::invalid_argument);
}

TEST_CASE("layer_norm trivial and oracle cases") {
  auto gamma = constant({4}, {1, 1, 1, 1});
  auto beta = constant({4}, {0, 0, 0, 0});

  // constant vector: zero variance, eps-regularized to all zeros
  auto c = layer_norm(constant({1, 4}, {3, 3, 3, 3}), gamma, beta);
  for (double v : c.value()) CHECK(v == doctest::Approx(0.0).epsilon(1e-12));

  // already normalized input is a fixed point up to O(eps)
  std::vector<double> z{-1.3416407864998738, -0.4472135954999579,
                        0.4472135954999579, 1.3416407864998738};
  auto fp = layer_norm(constant({1, 4}, z), gamma, beta);
  for (int i = 0; i < 4; ++i)
    CHECK(fp.value()[size_t(i)] == doctest::Approx(z[size_t(i)]).epsilon(1e-4));

  // random 8-vector against the direct mean/variance formula
  RngStream rng(5);
  auto g8 = random_tensor({8}, rng, 1.0, false);
  auto b8 = random_tensor({8}, rng, 1.0, false);
  auto x8 = random_tensor({1, 8}, rng, 2.0, false);
  auto y = layer_norm(x8, g8, b8);
  double mu = 0, var = 0;
  for (double v : x8.value()) mu += v;
  mu /= 8;
  for (double v : x8.value()) var += (v - mu) * (v - mu);
  var /= 8;
  for (int i = 0; i < 8; ++i) {
    double expect = g8.value()[size_t(i)] * (x8.value()[size_t(i)] - mu) /
                        std::sqrt(var + 1e-5) +
                    b8.value()[size_t(i)];
    CHECK(y.value()[size_t(i)] == doctest::Approx(expect).epsilon(1e-10));
  }

  CHECK_THROWS_AS(layer_norm(x8, g8, b8, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(layer_norm(x8, g8, b8, -1e-5), std::invalid_argument);
}

TEST_CASE("dropout semantics") {
  RngStream rng(9);
  auto x = random_tensor({4, 4}, rng, 1.0, false);

  RngStream d1(1);
  CHECK(dropout(x, 0.0, true, d1).value() == x.value());
  CHECK(d1.counter() == 0);  // p = 0 consumes nothing
  CHECK(dropout(x, 0.5, false, d1).value() == x.value());
  CHECK(d1.counter() == 0);  // inference consumes nothing

  CHECK_THROWS_AS(dropout(x, 1.0, true, d1), std::invalid_argument);
  CHECK_THROWS_AS(dropout(x, -0.1, true, d1), std::invalid_argument);

  // law of large numbers for the keep/scale scheme
  auto ones = Tensor<double>::full({1000, 1000}, 1.0);
  RngStream d2(123);
  auto dropped = dropout(ones, 0.3, true, d2);
  double mean = 0;
  for (double v : dropped.value()) mean += v;
  mean /= double(dropped.size());
  CHECK(mean > 0.99);
  CHECK(mean < 1.01);
}

TEST_CASE("gaussian_sample semantics") {
  RngStream rng(17);
  auto z = gaussian_sample<double>({3, 3}, 0.0, rng);
  for (double v : z.value()) CHECK(v == 0.0);
  CHECK(rng.counter() == 0);  // sigma = 0 consumes nothing

  CHECK_THROWS_AS(gaussian_sample<double>({2}, -0.1, rng),
                  std::invalid_argument);

  auto s = gaussian_sample<double>({1000, 1000}, 0.3, rng);
  double mean = 0;
  for (double v : s.value()) mean += v;
  mean /= double(s.size());
  double var = 0;
  for (double v : s.value()) var += (v - mean) * (v - mean);
  var /= double(s.size() - 1);
  CHECK(var > 0.088);  // chi-square bounds around 0.09
  CHECK(var < 0.092);
}

TEST_CASE("backward trivial derivatives") {
  auto x = Tensor<double>::from({1}, {3.0}, true);
  {
    Tape<double> tape;
    auto loss = sum(x);  // loss = x
    backward(loss, tape);
    CHECK(x.grad()[0] == doctest::Approx(1.0));
  }
  x.grad().clear();
  {
    Tape<double> tape;
    auto loss = scale(x, 2.0);
    backward(loss, tape);
    CHECK(x.grad()[0] == doctest::Approx(2.0));
  }
}

TEST_CASE("backward errors and empty tape") {
  auto x = Tensor<double>::from({2}, {1.0, 2.0}, true);
  Tape<double> tape;
  auto y = scale(x, 3.0);
  CHECK_THROWS_AS(backward(y, tape), std::invalid_argument);  // non-scalar

  Tape<double> empty;
  auto s = Tensor<double>::from({1}, {1.0}, true);
  backward(s, empty);  // no-op
  CHECK(s.grad().empty());
}

TEST_CASE("backward through composite graph matches finite differences") {
  RngStream rng(21);
  RngStream pick(22);
  for (int trial = 0; trial < 20; ++trial) {
    auto a = random_tensor({3, 4}, rng, 0.8);
    auto b = random_tensor({4, 3}, rng, 0.8);
    auto gamma = random_tensor({3}, rng, 0.5);
    auto beta = random_tensor({3}, rng, 0.5);
    auto r = random_tensor({3, 3}, rng, 1.0, false);

    auto forward = [&]() {
      return sum(mul(layer_norm(softmax(matmul(a, b), -1), gamma, beta), r));
    };
    auto build = [&]() {
      Tape<double> tape;
      backward(forward(), tape);
    };
    auto value = [&]() { return forward().item(); };
    auto res = check_gradients(build, value, {&a, &b, &gamma, &beta}, pick, 4);
    CHECK(res.checked > 0);
    CHECK(res.max_rel_err < 1e-4);
  }
}

TEST_CASE("tensor consumed twice accumulates both path gradients") {
  RngStream rng(31);
  RngStream pick(32);
  auto x = random_tensor({3, 3}, rng, 1.0);
  auto r = random_tensor({3, 3}, rng, 1.0, false);
  auto forward = [&]() {
    // x used by both operands of the product
    return sum(mul(mul(sigmoid(x), relu(x)), r));
  };
  auto build = [&]() {
    Tape<double> tape;
    backward(forward(), tape);
  };
  auto value = [&]() { return forward().item(); };
  auto res = check_gradients(build, value, {&x}, pick, 9);
  CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("elementwise examples") {
  auto zero = constant({1}, {0.0});
  CHECK(sigmoid(zero).value()[0] == doctest::Approx(0.5).epsilon(1e-12));
  auto one = constant({1}, {1.0});
  CHECK(sigmoid(one).value()[0] ==
        doctest::Approx(0.7310585786300049).epsilon(1e-12));

  auto x = constant({2, 2}, {1, -2, 3, -4});
  auto z = Tensor<double>::zeros({2, 2});
  CHECK(add(x, z).value() == x.value());

  CHECK_THROWS_AS(add(constant({2, 3}, std::vector<double>(6, 1.0)),
                      constant({2, 2}, std::vector<double>(4, 1.0))),
                  std::invalid_argument);
}

TEST_CASE("broadcast add/sub/mul against explicit expansion") {
  RngStream rng(41);
  auto x = random_tensor({2, 3, 4}, rng, 1.0, false);
  auto b = random_tensor({4}, rng, 1.0, false);
  auto y = add(x, b);
  for (int64_t i = 0; i < x.size(); ++i)
    CHECK(y.value()[size_t(i)] ==
          doctest::Approx(x.value()[size_t(i)] + b.value()[size_t(i % 4)]));

  auto one = Tensor<double>::full({1}, 1.0);
  auto w = sub(one, x);
  for (int64_t i = 0; i < x.size(); ++i)
    CHECK(w.value()[size_t(i)] == doctest::Approx(1.0 - x.value()[size_t(i)]));
}

TEST_CASE("elementwise and structural ops match finite differences") {
  RngStream rng(51);
  RngStream pick(52);
  for (int trial = 0; trial < 20; ++trial) {
    auto a = random_tensor({2, 6}, rng, 1.0);
    auto b = random_tensor({2, 6}, rng, 1.0);
    auto c = random_tensor({6}, rng, 1.0);
    auto r = random_tensor({2, 12}, rng, 1.0, false);
    auto forward = [&]() {
      auto lhs = add(mul(sigmoid(a), relu(b)), c);
      auto rhs = sub(a, scale(b, 0.7));
      return sum(mul(concat_last(lhs, rhs), r));
    };
    auto build = [&]() {
      Tape<double> tape;
      backward(forward(), tape);
    };
    auto value = [&]() { return forward().item(); };
    auto res = check_gradients(build, value, {&a, &b, &c}, pick, 4);
    CHECK(res.max_rel_err < 1e-4);
  }
}

TEST_CASE("matmul gradients incl. broadcast and transpose") {
  RngStream rng(61);
  RngStream pick(62);
  for (int trial = 0; trial < 20; ++trial) {
    auto a = random_tensor({2, 3, 4}, rng, 0.7);
    auto b = random_tensor({4, 5}, rng, 0.7);
    auto bt = random_tensor({2, 5, 4}, rng, 0.7);
    auto r1 = random_tensor({2, 3, 5}, rng, 1.0, false);
    auto forward = [&]() {
      return sum(add(mul(matmul(a, b), r1), mul(matmul(a, bt, true), r1)));
    };
    auto build = [&]() {
      Tape<double> tape;
      backward(forward(), tape);
    };
    auto value = [&]() { return forward().item(); };
    auto res = check_gradients(build, value, {&a, &b, &bt}, pick, 4);
    CHECK(res.max_rel_err < 1e-4);
  }
}

TEST_CASE("split/merge heads roundtrip and gradients") {
  RngStream rng(71);
  RngStream pick(72);
  auto x = random_tensor({2, 3, 8}, rng, 1.0);
  auto split = split_heads(x, 4);
  CHECK(split.shape() == Shape{8, 3, 2});
  auto merged = merge_heads(split, 4);
  CHECK(merged.value() == x.value());

  auto r = random_tensor({8, 3, 2}, rng, 1.0, false);
  auto forward = [&]() { return sum(mul(split_heads(x, 4), r)); };
  auto build = [&]() {
    Tape<double> tape;
    backward(forward(), tape);
  };
  auto value = [&]() { return forward().item(); };
  auto res = check_gradients(build, value, {&x}, pick, 8);
  CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("masked softmax zero weight on masked keys and sentinel row") {
  AttnMask mask;
  mask.batch = 1;
  mask.keys = 4;
  mask.valid = {1, 0, 1, 0};
  auto scores = constant({1, 2, 4}, {1, 9, 1, 9, 2, 2, 2, 2});
  auto w = masked_softmax(scores, mask);
  for (int q = 0; q < 2; ++q) {
    CHECK(w.value()[size_t(q * 4 + 1)] == 0.0);
    CHECK(w.value()[size_t(q * 4 + 3)] == 0.0);
    CHECK(w.value()[size_t(q * 4 + 0)] + w.value()[size_t(q * 4 + 2)] ==
          doctest::Approx(1.0).epsilon(1e-9));
  }

  AttnMask none;
  none.batch = 1;
  none.keys = 4;
  none.valid = {0, 0, 0, 0};
  auto s = masked_softmax(scores, none);
  CHECK(s.value()[0] == 1.0);  // sentinel: all weight on key 0
  CHECK(s.value()[1] == 0.0);
  for (double v : s.value()) CHECK(std::isfinite(v));
}

TEST_CASE("masked softmax causal structure and gradients") {
  RngStream rng(81);
  RngStream pick(82);
  AttnMask mask;
  mask.batch = 2;
  mask.keys = 4;
  mask.valid = {1, 1, 1, 0, 1, 1, 1, 1};
  mask.causal = true;
  auto scores = random_tensor({2, 4, 4}, rng, 2.0);
  auto w = masked_softmax(scores, mask);
  // future keys carry exactly zero weight
  for (int b = 0; b < 2; ++b)
    for (int q = 0; q < 4; ++q)
      for (int k = q + 1; k < 4; ++k)
        CHECK(w.value()[size_t((b * 4 + q) * 4 + k)] == 0.0);

  auto r = random_tensor({2, 4, 4}, rng, 1.0, false);
  auto forward = [&]() { return sum(mul(masked_softmax(scores, mask), r)); };
  auto build = [&]() {
    Tape<double> tape;
    backward(forward(), tape);
  };
  auto value = [&]() { return forward().item(); };
  auto res = check_gradients(build, value, {&scores}, pick, 12);
  CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("embedding lookup and gradients") {
  RngStream rng(91);
  RngStream pick(92);
  auto table = random_tensor({7, 3}, rng, 1.0);
  IdMatrix ids(2, 2);
  ids.at(0, 0) = 1;
  ids.at(0, 1) = 3;
  ids.at(1, 0) = 1;  // repeated id accumulates gradient twice
  ids.at(1, 1) = 6;
  auto out = embedding_lookup(table, ids, 2.0);
  CHECK(out.shape() == Shape{2, 2, 3});
  CHECK(out.value()[0] == doctest::Approx(2.0 * table.value()[3]));

  IdMatrix bad(1, 1);
  bad.at(0, 0) = 7;
  CHECK_THROWS_AS(embedding_lookup(table, bad), std::invalid_argument);

  auto r = random_tensor({2, 2, 3}, rng, 1.0, false);
  auto forward = [&]() { return sum(mul(embedding_lookup(table, ids, 2.0), r)); };
  auto build = [&]() {
    Tape<double> tape;
    backward(forward(), tape);
  };
  auto value = [&]() { return forward().item(); };
  auto res = check_gradients(build, value, {&table}, pick, 12);
  CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("cross entropy trivial cases and oracle") {
  const int pad = 0;

  // uniform logits, smoothing 0: maximum-entropy loss ln V
  auto uniform = Tensor<double>::full({1, 1, 5}, 0.37);
  IdMatrix t1(1, 1);
  t1.at(0, 0) = 3;
  auto l1 = cross_entropy_label_smoothed(uniform, t1, pad, 0.0);
  CHECK(l1.item() == doctest::Approx(std::log(5.0)).epsilon(1e-12));

  // near-one-hot logits with huge margin, smoothing 0: loss -> 0
  auto hot = Tensor<double>::zeros({1, 1, 5});
  hot.value()[3] = 50.0;
  auto l2 = cross_entropy_label_smoothed(hot, t1, pad, 0.0);
  CHECK(l2.item() == doctest::Approx(0.0).epsilon(1e-12));

  // hand logits, V = 4, smoothing 0.1, against the closed-form oracle
  std::vector<double> logits{0.2, -1.1, 0.7, 2.0};
  auto x = constant({1, 1, 4}, logits);
  IdMatrix t2(1, 1);
  t2.at(0, 0) = 2;
  double mx = 2.0;
  double z = 0;
  for (double v : logits) z += std::exp(v - mx);
  double log_z = mx + std::log(z);
  double sum_logits = 0.2 - 1.1 + 0.7 + 2.0;
  double expect = log_z - 0.9 * 0.7 - (0.1 / 4.0) * sum_logits;
  auto l3 = cross_entropy_label_smoothed(x, t2, pad, 0.1);
  CHECK(l3.item() == doctest::Approx(expect).epsilon(1e-10));

  // PAD positions are excluded; all-PAD is an error
  IdMatrix padded(1, 1);
  padded.at(0, 0) = pad;
  CHECK_THROWS_AS(cross_entropy_label_smoothed(x, padded, pad, 0.1),
                  std::invalid_argument);
}

TEST_CASE("cross entropy gradients match finite differences") {
  RngStream rng(101);
  RngStream pick(102);
  for (int trial = 0; trial < 20; ++trial) {
    auto logits = random_tensor({2, 3, 6}, rng, 1.5);
    IdMatrix targets(2, 3);
    for (int r = 0; r < 2; ++r)
      for (int c = 0; c < 3; ++c)
        targets.at(r, c) = int32_t(rng.uniform_int(0, 5));  // 0 = PAD mixes in
    targets.at(0, 0) = 2;  // at least one live position
    auto forward = [&]() {
      return cross_entropy_label_smoothed(logits, targets, 0, 0.1);
    };
    auto build = [&]() {
      Tape<double> tape;
      backward(forward(), tape);
    };
    auto value = [&]() { return forward().item(); };
    auto res = check_gradients(build, value, {&logits}, pick, 6);
    CHECK(res.max_rel_err < 1e-4);
  }
}

TEST_CASE("dropout gradients with a frozen mask") {
  RngStream rng(111);
  RngStream pick(112);
  auto x = random_tensor({4, 5}, rng, 1.0);
  auto r = random_tensor({4, 5}, rng, 1.0, false);
  auto forward = [&]() {
    RngStream drop(777);  // same mask on every evaluation
    return sum(mul(dropout(x, 0.4, true, drop), r));
  };
  auto build = [&]() {
    Tape<double> tape;
    backward(forward(), tape);
  };
  auto value = [&]() { return forward().item(); };
  auto res = check_gradients(build, value, {&x}, pick, 10);
  CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("reshape keeps values and routes gradients") {
  RngStream rng(121);
  auto x = random_tensor({2, 6}, rng, 1.0);
  auto y = reshape(x, {3, 4});
  CHECK(y.shape() == Shape{3, 4});
  CHECK(y.value() == x.value());
  CHECK_THROWS_AS(reshape(x, {5, 2}), std::invalid_argument);
}
