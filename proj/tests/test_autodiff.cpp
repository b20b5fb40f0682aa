// Copyright 2026 The HMMoE Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "hmmoe/autodiff.hpp"
#include "hmmoe/checkpoint.hpp"
#include "hmmoe/errors.hpp"
#include "oracles.hpp"

namespace hmmoe {
namespace {

std::mt19937_64 rng_for(int salt) { return std::mt19937_64(0xC0FFEE + static_cast<unsigned>(salt)); }

// Central-difference gradient of f with respect to every entry of `x`.
template <typename F>
Tensor numeric_grad(Tensor x, F f, double h = 1e-6) {
  Tensor g(x.shape(), 0.0);
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double orig = x[i];
    x[i] = orig + h;
    const double up = f(x);
    x[i] = orig - h;
    const double down = f(x);
    x[i] = orig;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

TEST(Tensor, RejectsEmptyAndZeroSizedShapes) {
  EXPECT_THROW(Tensor(Shape{}, 0.0), DimensionError);
  EXPECT_THROW(Tensor(Shape{2, 0, 3}, 0.0), EmptySequenceError);
  EXPECT_THROW(Tensor(Shape{2, 2}, std::vector<double>(3)), DimensionError);
}

TEST(Tensor, IndexingAndReshape) {
  Tensor t({2, 3}, std::vector<double>{0, 1, 2, 3, 4, 5});
  EXPECT_EQ(t.at({1, 2}), 5.0);
  EXPECT_EQ(t.dim(-1), 3u);
  EXPECT_EQ(t.reshaped({3, 2}).at({2, 0}), 4.0);
  EXPECT_THROW(t.reshaped({4, 2}), DimensionError);
}

TEST(Broadcast, ShapeRules) {
  EXPECT_EQ(broadcast_shape({2, 3, 4}, {4}), (Shape{2, 3, 4}));
  EXPECT_EQ(broadcast_shape({2, 1, 4}, {3, 1}), (Shape{2, 3, 4}));
  EXPECT_THROW(broadcast_shape({2, 3}, {4}), DimensionError);
}

struct BinaryCase {
  Shape a, b;
};

void PrintTo(const BinaryCase& c, std::ostream* os) { *os << shape_str(c.a) << "x" << shape_str(c.b); }

class BinaryOps : public ::testing::TestWithParam<BinaryCase> {};

// Covers the equal-shape, trailing-bias, leading-gate and general layouts.
TEST_P(BinaryOps, MatchLoopOracle) {
  auto rng = rng_for(1);
  const auto& c = GetParam();
  for (int trial = 0; trial < 5; ++trial) {
    const Tensor a = oracle::random_tensor(c.a, rng), b = oracle::random_tensor(c.b, rng);
    Tape t;
    const Var va = t.constant(a), vb = t.constant(b);
    EXPECT_LE(max_abs_diff(add(va, vb).value(), oracle::binary(a, b, std::plus<>())), 0.0);
    EXPECT_LE(max_abs_diff(sub(va, vb).value(), oracle::binary(a, b, std::minus<>())), 0.0);
    EXPECT_LE(max_abs_diff(mul(va, vb).value(), oracle::binary(a, b, std::multiplies<>())), 0.0);
    EXPECT_LE(max_abs_diff(add(vb, va).value(), oracle::binary(b, a, std::plus<>())), 0.0);
  }
}

TEST_P(BinaryOps, GradientsReduceOverBroadcastAxes) {
  auto rng = rng_for(2);
  const auto& c = GetParam();
  const Tensor a0 = oracle::random_tensor(c.a, rng), b0 = oracle::random_tensor(c.b, rng);
  const Tensor w = oracle::random_tensor(broadcast_shape(c.a, c.b), rng);
  auto loss = [&](const Tensor& a, const Tensor& b) {
    return oracle::sum_all(oracle::binary(oracle::binary(a, b, std::multiplies<>()), w, std::multiplies<>()));
  };
  ParameterStore s;
  Parameter& pa = s.add("a", a0);
  Parameter& pb = s.add("b", b0);
  Tape t;
  t.backward(sum_all(mul(mul(t.param(pa), t.param(pb)), t.constant(w))));
  const Tensor ga = numeric_grad(a0, [&](const Tensor& x) { return loss(x, b0); });
  const Tensor gb = numeric_grad(b0, [&](const Tensor& x) { return loss(a0, x); });
  EXPECT_LT(max_abs_diff(pa.grad, ga), 1e-7);
  EXPECT_LT(max_abs_diff(pb.grad, gb), 1e-7);
}

INSTANTIATE_TEST_SUITE_P(Layouts, BinaryOps,
                         ::testing::Values(BinaryCase{{2, 3, 4}, {2, 3, 4}}, BinaryCase{{2, 3, 4}, {4}},
                                           BinaryCase{{2, 3, 4}, {3, 4}}, BinaryCase{{2, 3, 4}, {2, 1, 1}},
                                           BinaryCase{{2, 3, 4}, {2, 1, 4}}, BinaryCase{{2, 1, 4}, {3, 1}},
                                           BinaryCase{{5}, {1}}, BinaryCase{{3, 1}, {1, 3}}),
                         [](const ::testing::TestParamInfo<BinaryCase>& info) {
                           auto dims = [](const Shape& s) {
                             std::string out;
                             for (std::size_t d : s) out += std::to_string(d);
                             return out;
                           };
                           return dims(info.param.a) + "_by_" + dims(info.param.b);
                         });

TEST(Matmul, MatchesOracleAcrossBatchLayouts) {
  auto rng = rng_for(3);
  const std::vector<std::pair<Shape, Shape>> cases{
      {{3, 4}, {4, 2}}, {{2, 3, 4}, {4, 5}}, {{2, 3, 4}, {2, 4, 5}}, {{2, 1, 3, 4}, {3, 4, 2}}};
  for (const auto& [sa, sb] : cases) {
    const Tensor a = oracle::random_tensor(sa, rng), b = oracle::random_tensor(sb, rng);
    Tape t;
    EXPECT_LT(max_abs_diff(matmul(t.constant(a), t.constant(b)).value(), oracle::matmul(a, b)), 1e-13);
  }
  Tape t;
  EXPECT_THROW(matmul(t.constant(Tensor({2, 3}, 1.0)), t.constant(Tensor({2, 3}, 1.0))), DimensionError);
  EXPECT_THROW(matmul(t.constant(Tensor({3}, 1.0)), t.constant(Tensor({3, 1}, 1.0))), DimensionError);
}

TEST(Matmul, GradientMatchesFiniteDifference) {
  auto rng = rng_for(4);
  const Tensor a0 = oracle::random_tensor({2, 3, 4}, rng), b0 = oracle::random_tensor({4, 5}, rng);
  const Tensor w = oracle::random_tensor({2, 3, 5}, rng);
  auto loss = [&](const Tensor& a, const Tensor& b) {
    return oracle::sum_all(oracle::binary(oracle::matmul(a, b), w, std::multiplies<>()));
  };
  ParameterStore s;
  Parameter& pa = s.add("a", a0);
  Parameter& pb = s.add("b", b0);
  Tape t;
  t.backward(sum_all(mul(matmul(t.param(pa), t.param(pb)), t.constant(w))));
  EXPECT_LT(max_abs_diff(pa.grad, numeric_grad(a0, [&](const Tensor& x) { return loss(x, b0); })), 1e-7);
  EXPECT_LT(max_abs_diff(pb.grad, numeric_grad(b0, [&](const Tensor& x) { return loss(a0, x); })), 1e-7);
}

TEST(Unary, MatchOracles) {
  auto rng = rng_for(5);
  const Tensor x = oracle::random_tensor({3, 4, 5}, rng, -3.0, 3.0);
  Tape t;
  const Var v = t.constant(x);
  EXPECT_EQ(max_abs_diff(relu(v).value(), oracle::unary(x, [](double z) { return oracle::relu(z); })), 0.0);
  EXPECT_LT(max_abs_diff(sigmoid(v).value(), oracle::unary(x, oracle::sigmoid)), 1e-15);
  EXPECT_EQ(max_abs_diff(scale(v, 2.5).value(), oracle::unary(x, [](double z) { return 2.5 * z; })), 0.0);
  EXPECT_EQ(max_abs_diff(add_scalar(v, 1.0).value(), oracle::unary(x, [](double z) { return z + 1.0; })), 0.0);
  EXPECT_LT(max_abs_diff(transpose_last(v).value(), oracle::transpose_last(x)), 1e-300);
  for (int axis = 0; axis < 3; ++axis) {
    EXPECT_LT(max_abs_diff(softmax(v, axis).value(), oracle::softmax(x, axis)), 1e-15);
    EXPECT_LT(max_abs_diff(mean(v, axis).value(), oracle::mean(x, axis)), 1e-15);
  }
  EXPECT_LT(max_abs_diff(mean_pool(v).value(), oracle::mean(x, 1)), 1e-15);
  EXPECT_NEAR(sum_all(v).value()[0], oracle::sum_all(x), 1e-13);
}

TEST(Softmax, StableForLargeLogits) {
  Tape t;
  const Tensor p = softmax(t.constant(Tensor({1, 3}, std::vector<double>{1000.0, 1000.0, -1000.0})), 1).value();
  EXPECT_DOUBLE_EQ(p[0], 0.5);
  EXPECT_DOUBLE_EQ(p[1], 0.5);
  EXPECT_EQ(p[2], 0.0);
}

TEST(Structural, ConcatGatherScatterMatchOracles) {
  auto rng = rng_for(6);
  const Tensor a = oracle::random_tensor({2, 3, 4}, rng), b = oracle::random_tensor({2, 2, 4}, rng);
  Tape t;
  EXPECT_EQ(max_abs_diff(concat(t.constant(a), t.constant(b), 1).value(), oracle::concat(a, b, 1)), 0.0);
  const std::vector<std::size_t> rows{2, 0};
  EXPECT_EQ(max_abs_diff(gather(t.constant(a), 1, rows).value(), oracle::gather(a, 1, rows)), 0.0);
  const Tensor g = oracle::gather(a, 0, {1});
  EXPECT_EQ(max_abs_diff(scatter(t.constant(g), 0, {1}, 3).value(), oracle::scatter(g, 0, {1}, 3)), 0.0);
  EXPECT_THROW(gather(t.constant(a), 1, {3}), DimensionError);
  EXPECT_THROW(concat(t.constant(a), t.constant(Tensor({2, 2, 5}, 0.0)), 1), DimensionError);
}

TEST(LayerNorm, MatchesOracleAndGradient) {
  auto rng = rng_for(7);
  const Tensor x0 = oracle::random_tensor({2, 3, 6}, rng);
  const Tensor g0 = oracle::random_tensor({6}, rng), b0 = oracle::random_tensor({6}, rng);
  const Tensor w = oracle::random_tensor({2, 3, 6}, rng);
  ParameterStore s;
  Parameter& px = s.add("x", x0);
  Parameter& pg = s.add("g", g0);
  Parameter& pb = s.add("b", b0);
  Tape t;
  Var y = layer_norm(t.param(px), t.param(pg), t.param(pb));
  EXPECT_LT(max_abs_diff(y.value(), oracle::layer_norm(x0, g0, b0)), 1e-14);
  t.backward(sum_all(mul(y, t.constant(w))));
  auto loss = [&](const Tensor& x, const Tensor& g, const Tensor& b) {
    return oracle::sum_all(oracle::binary(oracle::layer_norm(x, g, b), w, std::multiplies<>()));
  };
  EXPECT_LT(max_abs_diff(px.grad, numeric_grad(x0, [&](const Tensor& x) { return loss(x, g0, b0); })), 1e-7);
  EXPECT_LT(max_abs_diff(pg.grad, numeric_grad(g0, [&](const Tensor& g) { return loss(x0, g, b0); })), 1e-7);
  EXPECT_LT(max_abs_diff(pb.grad, numeric_grad(b0, [&](const Tensor& b) { return loss(x0, g0, b); })), 1e-7);
}

TEST(CrossEntropy, MatchesOracleAndRejectsBadLabels) {
  auto rng = rng_for(8);
  const Tensor l0 = oracle::random_tensor({4, 3}, rng, -2.0, 2.0);
  const std::vector<int> y{0, 2, 1, 2};
  ParameterStore s;
  Parameter& pl = s.add("l", l0);
  Tape t;
  Var loss = cross_entropy(t.param(pl), y);
  EXPECT_NEAR(loss.value()[0], oracle::cross_entropy(l0, y), 1e-15);
  t.backward(loss);
  EXPECT_LT(max_abs_diff(pl.grad, numeric_grad(l0, [&](const Tensor& l) { return oracle::cross_entropy(l, y); })),
            1e-8);
  Tape t2;
  EXPECT_THROW(cross_entropy(t2.constant(l0), std::vector<int>{0, 3, 1, 1}), DataError);
  EXPECT_THROW(cross_entropy(t2.constant(l0), std::vector<int>{0, -1, 1, 1}), DataError);
}

TEST(Tape, BackwardRequiresScalarLoss) {
  ParameterStore s;
  Parameter& p = s.add("p", Tensor({2}, 1.0));
  Tape t;
  EXPECT_THROW(t.backward(t.param(p)), ContractError);
}

TEST(Tape, FrozenParametersReceiveNoGradient) {
  ParameterStore s;
  Parameter& live = s.add("live", Tensor({2}, 1.0));
  Parameter& frozen = s.add("frozen", Tensor({2}, 3.0), true);
  Tape t;
  t.backward(sum_all(mul(t.param(live), t.param(frozen))));
  EXPECT_EQ(live.grad[0], 3.0);
  EXPECT_EQ(frozen.grad[0], 0.0);
  EXPECT_EQ(frozen.grad[1], 0.0);
}

TEST(Tape, ReusedParameterAccumulates) {
  ParameterStore s;
  Parameter& p = s.add("p", Tensor({1}, 2.0));
  Tape t;
  Var v = t.param(p);
  t.backward(sum_all(mul(v, v)));  // d(p^2)/dp = 2p
  EXPECT_DOUBLE_EQ(p.grad[0], 4.0);
}

TEST(ParameterStore, RejectsDuplicatesAndUnknownNames) {
  ParameterStore s;
  s.add("a", Tensor({1}, 0.0));
  EXPECT_THROW(s.add("a", Tensor({1}, 0.0)), ContractError);
  EXPECT_THROW(s.get("b"), ContractError);
}

TEST(GradCheck, ReportsSmallErrorForCorrectGradients) {
  auto rng = rng_for(9);
  ParameterStore s;
  Parameter& w = s.add("w", oracle::random_tensor({4, 3}, rng));
  const Tensor x = oracle::random_tensor({2, 4}, rng);
  auto r = finite_difference_check(
      [&](Tape& t) { return sum_all(sigmoid(matmul(t.constant(x), t.param(w)))); }, s);
  EXPECT_EQ(r.entries_checked, 12u);
  EXPECT_LT(r.max_relative_error, 1e-6);
}

TEST(GradCheck, RelativeErrorFloor) {
  EXPECT_DOUBLE_EQ(relative_error(1.0, 0.5), 0.5);
  EXPECT_DOUBLE_EQ(relative_error(0.0, 1e-10), 1e-2);
}

TEST(Checkpoint, RoundTripAndValidation) {
  auto rng = rng_for(10);
  ParameterStore s;
  s.add("a", oracle::random_tensor({2, 3}, rng));
  s.add("b", oracle::random_tensor({4}, rng), true);
  const auto dir = std::filesystem::temp_directory_path() / "hmmoe_ckpt_test";
  std::filesystem::create_directories(dir);
  const std::string path = (dir / "m.ckpt").string();
  save_checkpoint(s, path);

  ParameterStore other;
  other.add("a", Tensor({2, 3}, 0.0));
  other.add("b", Tensor({4}, 0.0), true);
  load_checkpoint(other, path);
  EXPECT_EQ(other.get("a").value, s.get("a").value);
  EXPECT_EQ(other.get("b").value, s.get("b").value);

  ParameterStore wrong_shape;
  wrong_shape.add("a", Tensor({3, 2}, 0.0));
  wrong_shape.add("b", Tensor({4}, 0.0), true);
  EXPECT_THROW(load_checkpoint(wrong_shape, path), DataError);

  auto bytes = encode_checkpoint(s);
  bytes.resize(bytes.size() - 8);
  EXPECT_THROW(decode_checkpoint(bytes), DataError);
  std::filesystem::remove_all(dir);
}

}  // namespace
}  // namespace hmmoe
