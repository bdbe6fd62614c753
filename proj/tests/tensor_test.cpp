// Copyright 2026 The cosmo Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "cosmo/tensor.hpp"

namespace cosmo {
namespace {

std::vector<real> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

TEST(Tensor, RejectsMismatchedShape) {
  EXPECT_THROW(Tensor::from({2, 2}, {1, 2, 3}), ShapeError);
}

TEST(Tensor, MatmulIdentity) {
  auto a = Tensor::from({2, 2}, {1, 2, 3, 4});
  auto eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  EXPECT_EQ(values(matmul(a, eye)), (std::vector<real>{1, 2, 3, 4}));
}

TEST(Tensor, MatmulShapeErrorNamesBothShapes) {
  auto a = Tensor::zeros({2, 3});
  auto b = Tensor::zeros({2, 3});
  try {
    matmul(a, b);
    FAIL();
  } catch (const ShapeError& e) {
    std::string msg = e.what();
    EXPECT_NE(msg.find("matmul"), std::string::npos);
    EXPECT_NE(msg.find("[2,3]"), std::string::npos);
  }
}

TEST(Tensor, SoftmaxUniform) {
  auto s = softmax(Tensor::zeros({4}), 0);
  for (real v : s.data()) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(Tensor, SoftmaxFullyMaskedSliceIsZero) {
  const real inf = std::numeric_limits<real>::infinity();
  auto s = softmax(Tensor::from({2, 2}, {-inf, -inf, 0, 0}), 1);
  EXPECT_EQ(values(s), (std::vector<real>{0, 0, 0.5, 0.5}));
}

TEST(Tensor, LayerNormThreeValues) {
  auto y = layer_norm(Tensor::from({3}, {2, 4, 6}), 0);
  // (x - 4) / sqrt(8/3 + 1e-5)
  const double sd = std::sqrt(8.0 / 3.0 + 1e-5);
  EXPECT_NEAR(y[0], -2.0 / sd, 1e-12);
  EXPECT_NEAR(y[0], -1.2247, 1e-3);
  EXPECT_NEAR(y[1], 0.0, 1e-12);
  EXPECT_NEAR(y[2], 1.2247, 1e-3);
}

TEST(Backward, SumGivesOnes) {
  auto x = Tensor::from({3}, {1, 2, 3}, true);
  backward(sum(x));
  EXPECT_EQ(values(Tensor::from({3}, {x.grad().begin(), x.grad().end()})), (std::vector<real>{1, 1, 1}));
}

TEST(Backward, SquareGivesTwoX) {
  auto x = Tensor::from({3}, {1, 2, 3}, true);
  backward(sum(mul(x, x)));
  ASSERT_TRUE(x.has_grad());
  EXPECT_DOUBLE_EQ(x.grad()[0], 2);
  EXPECT_DOUBLE_EQ(x.grad()[1], 4);
  EXPECT_DOUBLE_EQ(x.grad()[2], 6);
}

TEST(Backward, CrossEntropyTwoClasses) {
  auto logits = Tensor::from({2}, {0, 0}, true);
  const int target[] = {0};
  backward(cross_entropy(logits, target));
  EXPECT_NEAR(logits.grad()[0], -0.5, 1e-15);
  EXPECT_NEAR(logits.grad()[1], 0.5, 1e-15);
}

TEST(Backward, NonScalarLossRejected) {
  auto x = Tensor::from({2}, {1, 2}, true);
  EXPECT_THROW(backward(scale(x, 2)), ShapeError);
}

TEST(Backward, ConstantLossHasEmptyTape) {
  auto x = Tensor::from({2}, {1, 2});
  EXPECT_THROW(backward(sum(x)), std::logic_error);
}

TEST(Backward, FrozenLeafNeverAccumulates) {
  auto w = Tensor::from({2}, {1, 2}, false);
  auto x = Tensor::from({2}, {3, 4}, true);
  backward(sum(mul(w, x)));
  EXPECT_FALSE(w.has_grad());
  EXPECT_TRUE(x.has_grad());
}

TEST(Backward, MultiUseEqualsSumOfSingleUses) {
  std::mt19937_64 rng(3);
  auto x = Tensor::randn({3, 4}, rng, 1.0, true);
  auto w = Tensor::randn({4, 2}, rng, 1.0);
  auto f1 = [&] { return sum(tanh(matmul(x, w))); };
  auto f2 = [&] { return sum(gelu(x)); };
  backward(f1());
  std::vector<real> g1(x.grad().begin(), x.grad().end());
  x.zero_grad();
  backward(f2());
  std::vector<real> g2(x.grad().begin(), x.grad().end());
  x.zero_grad();
  backward(add(f1(), f2()));
  for (std::size_t i = 0; i < g1.size(); ++i) EXPECT_NEAR(x.grad()[i], g1[i] + g2[i], 1e-12);
}

TEST(Tape, TopologicalOrderVisitsEachNodeOnce) {
  auto x = Tensor::from({2}, {1, 2}, true);
  auto y = mul(x, x);
  auto z = add(y, y);
  auto loss = sum(z);
  Tape tape = Tape::record(loss);
  ASSERT_EQ(tape.size(), 4u);
  std::unordered_set<const detail::Node*> seen;
  for (auto* node : tape.nodes()) {
    for (auto& in : node->inputs)
      if (in->requires_grad) {
        EXPECT_TRUE(seen.count(in.get())) << node->op;
      }
    EXPECT_TRUE(seen.insert(node).second);
  }
  EXPECT_EQ(tape.nodes().back(), loss.id());
}

TEST(GradCheck, ExactQuadratic) {
  auto x = Tensor::from({2}, {1, 2}, true);
  EXPECT_LT(grad_check([&] { return sum(mul(x, x)); }, {x}, 1e-5), 1e-8);
}

TEST(GradCheck, ConstantFunction) {
  auto x = Tensor::from({2}, {1, 2}, true);
  EXPECT_EQ(grad_check([&] { return Tensor::scalar(3.0); }, {x}, 1e-5), 0.0);
}

TEST(GradCheck, RejectsBadEpsAndNonFinite) {
  auto x = Tensor::from({1}, {-1}, true);
  EXPECT_THROW(grad_check([&] { return sum(x); }, {x}, 1e-1), std::invalid_argument);
  EXPECT_THROW(grad_check([&] { return sum(log(x)); }, {x}, 1e-5), std::domain_error);
}

TEST(Ops, SliceConcatRoundTrip) {
  std::mt19937_64 rng(1);
  auto x = Tensor::randn({3, 5, 2}, rng, 1.0);
  auto parts = std::vector<Tensor>{slice(x, 1, 0, 2), slice(x, 1, 2, 5)};
  EXPECT_EQ(values(concat(parts, 1)), values(x));
}

TEST(Ops, BroadcastRowAndScalar) {
  auto x = Tensor::from({2, 2}, {1, 2, 3, 4});
  EXPECT_EQ(values(add(x, Tensor::from({2}, {10, 20}))), (std::vector<real>{11, 22, 13, 24}));
  EXPECT_EQ(values(mul(x, Tensor::scalar(2))), (std::vector<real>{2, 4, 6, 8}));
  EXPECT_THROW(add(x, Tensor::zeros({3})), ShapeError);
}

TEST(Ops, EmbeddingOutOfRange) {
  auto table = Tensor::zeros({3, 2});
  const int ids[] = {0, 3};
  EXPECT_THROW(embedding_lookup(table, ids), ShapeError);
}

TEST(Ops, NoGradGuardSkipsRecording) {
  auto x = Tensor::from({2}, {1, 2}, true);
  NoGradGuard guard;
  EXPECT_FALSE(sum(mul(x, x)).requires_grad());
}

// Randomized finite-difference sweep over every op, shapes up to 8 per axis.
class OpGradientSweep : public ::testing::TestWithParam<int> {};

TEST_P(OpGradientSweep, AnalyticMatchesCentralDifferences) {
  const int seed = GetParam();
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> dim(1, 8);
  const std::size_t m = dim(rng), k = dim(rng), n = dim(rng);
  auto a = Tensor::randn({m, k}, rng, 1.0, true);
  auto b = Tensor::randn({k, n}, rng, 1.0, true);
  auto row = Tensor::randn({k}, rng, 1.0, true);
  auto pos = Tensor::from({m, k}, [&] {
    std::vector<real> v(m * k);
    std::uniform_real_distribution<double> u(0.5, 2.0);
    for (auto& x : v) x = u(rng);
    return v;
  }(), true);
  auto probe = Tensor::randn({m, n}, rng, 1.0);
  auto probe_k = Tensor::randn({m, k}, rng, 1.0);
  std::vector<std::uint8_t> mask(m * k);
  for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = (i % 3 == 1);
  std::vector<int> ids(m);
  std::vector<int> targets(m);
  for (std::size_t i = 0; i < m; ++i) {
    ids[i] = static_cast<int>(rng() % m);
    targets[i] = static_cast<int>(rng() % k);
  }
  std::vector<real> weights(m);
  for (std::size_t i = 0; i < m; ++i) weights[i] = (i % 2) ? 1.0 : 0.5;
  const std::size_t cut = k > 1 ? k / 2 : 1;

  const std::vector<std::pair<const char*, std::function<Tensor()>>> cases = {
      {"matmul", [&] { return sum(mul(matmul(a, b), probe)); }},
      {"add", [&] { return sum(mul(add(a, row), probe_k)); }},
      {"mul", [&] { return sum(mul(mul(a, row), probe_k)); }},
      {"scale", [&] { return sum(mul(scale(a, -1.7), probe_k)); }},
      {"transpose", [&] { return sum(mul(transpose(transpose(a)), probe_k)); }},
      {"reshape", [&] { return sum(mul(reshape(reshape(a, {m * k}), {m, k}), probe_k)); }},
      {"slice_concat",
       [&] {
         return sum(mul(concat({slice(a, 1, 0, cut), slice(a, 1, cut, k)}, 1), probe_k));
       }},
      {"concat_rows", [&] { return sum(mul(concat({a, pos}, 0), concat({probe_k, probe_k}, 0))); }},
      {"softmax1", [&] { return sum(mul(softmax(a, 1), probe_k)); }},
      {"softmax0", [&] { return sum(mul(softmax(a, 0), probe_k)); }},
      {"layer_norm1", [&] { return sum(mul(layer_norm(a, 1), probe_k)); }},
      {"layer_norm0", [&] { return sum(mul(layer_norm(a, 0), probe_k)); }},
      {"tanh", [&] { return sum(mul(tanh(a), probe_k)); }},
      {"gelu", [&] { return sum(mul(gelu(a), probe_k)); }},
      {"exp", [&] { return sum(mul(exp(scale(a, 0.5)), probe_k)); }},
      {"log", [&] { return sum(mul(log(pos), probe_k)); }},
      {"mean", [&] { return mean(mul(a, a)); }},
      {"embedding", [&] { return sum(mul(embedding_lookup(pos, ids), probe_k)); }},
      {"masked_fill", [&] { return sum(mul(masked_fill(a, mask, 0.25), probe_k)); }},
      {"cross_entropy", [&] { return cross_entropy(a, targets, weights); }},
      {"l2_normalize", [&] { return sum(mul(l2_normalize(a), probe_k)); }},
  };
  for (const auto& [name, f] : cases) {
    const double err = grad_check(f, {a, b, row, pos}, 1e-5);
    EXPECT_LT(err, 1e-4) << name << " seed " << seed;
  }
}

INSTANTIATE_TEST_SUITE_P(Seeds, OpGradientSweep, ::testing::Range(0, 50));

TEST(Properties, SoftmaxRowsSumToOne) {
  for (int seed = 0; seed < 50; ++seed) {
    std::mt19937_64 rng(seed);
    auto x = Tensor::randn({5, 7}, rng, 3.0);
    auto s = softmax(x, 1);
    for (std::size_t r = 0; r < 5; ++r) {
      double total = 0;
      for (std::size_t c = 0; c < 7; ++c) {
        EXPECT_GE(s.at(r, c), 0.0);
        total += s.at(r, c);
      }
      EXPECT_NEAR(total, 1.0, 1e-12);
    }
  }
}

}  // namespace
}  // namespace cosmo
