// Copyright 2026 The HMMoE Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>

#include "hmmoe/errors.hpp"
#include "hmmoe/experts.hpp"
#include "hmmoe/rng.hpp"
#include "hmmoe/routing.hpp"
#include "oracles.hpp"

namespace hmmoe {
namespace {

constexpr ExpertKind kKinds[] = {ExpertKind::SingleModal, ExpertKind::CrossAttention, ExpertKind::ChannelAttention};

void randomize(ParameterStore& s, std::mt19937_64& rng) {
  s.for_each([&](Parameter& p) {
    for (double& x : p.value.storage()) x = std::uniform_real_distribution<double>(-0.7, 0.7)(rng);
  });
}

TEST(Experts, ParameterCountsMatchClosedForm) {
  Rng rng = make_rng(1, "t");
  for (ExpertKind kind : kKinds) {
    ParameterStore s;
    init_expert(s, "e", kind, 8, 2, rng);
    std::size_t n = 0;
    s.for_each([&](const Parameter& p) { n += p.value.numel(); });
    const std::size_t expected = 2 * 8 * 2 + 2 + 8 + (kind == ExpertKind::CrossAttention ? 3 * 2 * 2 : 0);
    EXPECT_EQ(n, expected);
    EXPECT_EQ(expert_parameter_count(kind, 8, 2), expected);
  }
  EXPECT_EQ(expert_parameter_count(ExpertKind::SingleModal, 8, 2), 42u);
}

TEST(Experts, InitializationContract) {
  Rng rng = make_rng(2, "t");
  ParameterStore s;
  ExpertParams p = init_expert(s, "e", ExpertKind::CrossAttention, 16, 4, rng);
  for (double x : p.w_up->value.data()) EXPECT_EQ(x, 0.0);
  for (double x : p.b_up->value.data()) EXPECT_EQ(x, 0.0);
  for (double x : p.b_down->value.data()) EXPECT_EQ(x, 0.0);
  for (double x : p.w_down->value.data()) EXPECT_LE(std::abs(x), 1.0 / std::sqrt(16.0));
  for (double x : p.w_q->value.data()) EXPECT_LE(std::abs(x), 0.5);
  EXPECT_FALSE(p.w_down->frozen);
  EXPECT_THROW(init_expert(s, "bad", ExpertKind::SingleModal, 8, 8, rng), ConfigError);
  EXPECT_THROW(init_expert(s, "bad0", ExpertKind::SingleModal, 8, 0, rng), ConfigError);
}

TEST(Experts, FreshSingleIsIdentityAndAttentionExpertsAreZero) {
  Rng rng = make_rng(3, "t");
  std::mt19937_64 g(3);
  const Tensor v = oracle::random_tensor({2, 3, 8}, g), a = oracle::random_tensor({2, 4, 8}, g);
  for (ExpertKind kind : kKinds) {
    ParameterStore s;
    ExpertParams p = init_expert(s, "e", kind, 8, 2, rng);
    Tape t;
    const Tensor out = expert_forward(t.constant(v), t.constant(a), p).value();
    if (kind == ExpertKind::SingleModal) {
      EXPECT_EQ(max_abs_diff(out, v), 0.0);
    } else {
      EXPECT_EQ(max_abs_diff(out, Tensor(v.shape(), 0.0)), 0.0);
    }
  }
}

TEST(Experts, MatchLoopOracles) {
  Rng rng = make_rng(4, "t");
  std::mt19937_64 g(4);
  for (int trial = 0; trial < 20; ++trial) {
    for (ExpertKind kind : kKinds) {
      ParameterStore s;
      ExpertParams p = init_expert(s, "e", kind, 8, 2, rng);
      randomize(s, g);
      const Tensor v = oracle::random_tensor({2, 3, 8}, g), a = oracle::random_tensor({2, 4, 8}, g);
      Tape t;
      const Tensor out = expert_forward(t.constant(v), t.constant(a), p).value();
      EXPECT_LT(max_abs_diff(out, oracle::expert_batch(v, a, p)), 1e-12) << to_string(kind);
    }
  }
}

TEST(Experts, ChannelGateIsPerChannelSigmoid) {
  std::mt19937_64 g(5);
  const Tensor v = oracle::random_tensor({2, 3, 8}, g), a = oracle::random_tensor({2, 4, 8}, g);
  Tape t;
  const Tensor gate = channel_gate(t.constant(v), t.constant(a)).value();
  ASSERT_EQ(gate.shape(), (Shape{2, 1, 8}));
  for (std::size_t b = 0; b < 2; ++b) {
    const auto ref = oracle::channel_gate(oracle::sample(v, b), oracle::sample(a, b));
    for (std::size_t j = 0; j < 8; ++j) EXPECT_NEAR(gate[b * 8 + j], ref[j], 1e-15);
  }
}

TEST(Experts, ShapeErrors) {
  Rng rng = make_rng(6, "t");
  ParameterStore s;
  ExpertParams p = init_expert(s, "e", ExpertKind::CrossAttention, 8, 2, rng);
  Tape t;
  EXPECT_THROW(expert_forward(t.constant(Tensor({2, 3, 7}, 0.0)), t.constant(Tensor({2, 4, 8}, 0.0)), p),
               DimensionError);
  EXPECT_THROW(expert_forward(t.constant(Tensor({2, 3, 8}, 0.0)), t.constant(Tensor({3, 4, 8}, 0.0)), p),
               DimensionError);
  EXPECT_THROW(expert_forward(t.constant(Tensor({3, 8}, 0.0)), t.constant(Tensor({3, 8}, 0.0)), p), DimensionError);
}

TEST(Experts, ParseKind) {
  EXPECT_EQ(parse_expert_kind("single"), ExpertKind::SingleModal);
  EXPECT_EQ(parse_expert_kind("cross"), ExpertKind::CrossAttention);
  EXPECT_EQ(parse_expert_kind("channel"), ExpertKind::ChannelAttention);
  EXPECT_THROW(parse_expert_kind("gated"), ConfigError);
}

// ---- routing ---------------------------------------------------------------------------

TEST(Routing, GlobalRouterIsCategoricalAndMatchesOracle) {
  Rng rng = make_rng(7, "t");
  std::mt19937_64 g(7);
  ParameterStore s;
  auto gr = init_global_router(s, "gr", 8, 3, rng);
  const Tensor v = oracle::random_tensor({4, 5, 8}, g);
  Tape t;
  const Tensor w = route_global(t.constant(v), gr).value();
  for (std::size_t b = 0; b < 4; ++b) {
    const auto ref = oracle::softmax_vec(oracle::vec_mat(oracle::col_mean(oracle::sample(v, b)), gr.w_gr->value));
    double sum = 0.0;
    for (std::size_t j = 0; j < 3; ++j) {
      EXPECT_NEAR(w[b * 3 + j], ref[j], 1e-15);
      sum += w[b * 3 + j];
    }
    EXPECT_NEAR(sum, 1.0, 1e-12);
  }
}

TEST(Routing, TopKOrdersByProbabilityAndBreaksTiesLow) {
  const std::vector<double> p{0.1, 0.4, 0.4, 0.1};
  EXPECT_EQ(top_k_indices(p, 1), (std::vector<std::size_t>{1}));
  EXPECT_EQ(top_k_indices(p, 3), (std::vector<std::size_t>{1, 2, 0}));
  const std::vector<double> uniform{0.25, 0.25, 0.25, 0.25};
  EXPECT_EQ(top_k_indices(uniform, 2), (std::vector<std::size_t>{0, 1}));
  EXPECT_THROW(top_k_indices(p, 0), ConfigError);
  EXPECT_THROW(top_k_indices(p, 5), ConfigError);
}

TEST(Routing, TopKAgreesWithArgmaxOracle) {
  std::mt19937_64 g(8);
  std::uniform_int_distribution<int> coarse(0, 3);  // coarse values force ties
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> p(5);
    for (double& x : p) x = coarse(g) * 0.25;
    for (std::size_t k = 1; k <= 5; ++k) EXPECT_EQ(top_k_indices(p, k), oracle::top_k(p, k));
  }
}

TEST(Routing, LocalRouterSelectsExactlyKWithRawProbabilities) {
  Rng rng = make_rng(9, "t");
  std::mt19937_64 g(9);
  ParameterStore s;
  auto lr = init_local_router(s, "lr", 8, 4, rng);
  const Tensor v = oracle::random_tensor({6, 3, 8}, g);
  Tape t;
  LocalRouting r = route_local(t.constant(v), lr, 2);
  const Tensor& p = r.probs.value();
  for (std::size_t b = 0; b < 6; ++b) {
    ASSERT_EQ(r.selected[b].size(), 2u);
    double kept = 0.0, sum = 0.0;
    for (std::size_t j = 0; j < 4; ++j) {
      sum += p[b * 4 + j];
      kept += r.combine_weights[b * 4 + j];
      const bool chosen = j == r.selected[b][0] || j == r.selected[b][1];
      EXPECT_EQ(r.combine_weights[b * 4 + j], chosen ? p[b * 4 + j] : 0.0);
    }
    EXPECT_NEAR(sum, 1.0, 1e-12);
    EXPECT_LT(kept, 1.0);  // no renormalization after selection
  }
  EXPECT_THROW(route_local(t.constant(v), lr, 0), ConfigError);
  EXPECT_THROW(route_local(t.constant(v), lr, 5), ConfigError);
}

TEST(Routing, ZeroRouterPicksExpertZero) {
  Rng rng = make_rng(10, "t");
  ParameterStore s;
  auto lr = init_local_router(s, "lr", 8, 2, rng);
  lr.w_lr->value.fill(0.0);
  std::mt19937_64 g(10);
  Tape t;
  LocalRouting r = route_local(t.constant(oracle::random_tensor({5, 3, 8}, g)), lr, 1);
  for (const auto& sel : r.selected) EXPECT_EQ(sel, (std::vector<std::size_t>{0}));
}

TEST(Routing, LogitShiftInvariance) {
  std::mt19937_64 g(11);
  std::uniform_int_distribution<int> num(-2048, 2048);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor logits({2, 5}, 0.0);
    for (double& x : logits.storage()) x = num(g) / 512.0;
    Tensor shifted = logits;
    for (double& x : shifted.storage()) x += 3.0;
    EXPECT_EQ(softmax_values(logits, 1), softmax_values(shifted, 1));
  }
}

TEST(Routing, CombineGroupMatchesWeightedSumAndValidates) {
  Rng rng = make_rng(12, "t");
  std::mt19937_64 g(12);
  ParameterStore s;
  auto lr = init_local_router(s, "lr", 8, 3, rng);
  const Tensor v = oracle::random_tensor({4, 2, 8}, g);
  std::vector<Tensor> outs;
  for (int j = 0; j < 3; ++j) outs.push_back(oracle::random_tensor({4, 2, 8}, g));
  Tape t;
  LocalRouting r = route_local(t.constant(v), lr, 2);
  std::vector<Var> vars;
  for (const auto& o : outs) vars.push_back(t.constant(o));
  const Tensor got = combine_group(r, vars).value();
  Tensor want({4, 2, 8}, 0.0);
  for (std::size_t b = 0; b < 4; ++b)
    for (std::size_t j : r.selected[b])
      for (std::size_t i = 0; i < 16; ++i) want[b * 16 + i] += r.probs.value()[b * 3 + j] * outs[j][b * 16 + i];
  EXPECT_LT(max_abs_diff(got, want), 1e-15);
  vars.pop_back();
  EXPECT_THROW(combine_group(r, vars), ContractError);
}

TEST(Routing, UnselectedExpertsReceiveNoGradient) {
  Rng rng = make_rng(13, "t");
  std::mt19937_64 g(13);
  ParameterStore s;
  auto lr = init_local_router(s, "lr", 8, 3, rng);
  Parameter& e0 = s.add("e0", oracle::random_tensor({1, 2, 8}, g), false);
  Parameter& e1 = s.add("e1", oracle::random_tensor({1, 2, 8}, g), false);
  Parameter& e2 = s.add("e2", oracle::random_tensor({1, 2, 8}, g), false);
  Tape t;
  LocalRouting r = route_local(t.constant(oracle::random_tensor({1, 2, 8}, g)), lr, 1);
  t.backward(sum_all(combine_group(r, {t.param(e0), t.param(e1), t.param(e2)})));
  const std::size_t chosen = r.selected[0][0];
  const Parameter* ps[] = {&e0, &e1, &e2};
  for (std::size_t j = 0; j < 3; ++j) {
    double mag = 0.0;
    for (double x : ps[j]->grad.data()) mag = std::max(mag, std::abs(x));
    if (j == chosen) {
      EXPECT_GT(mag, 0.0);
    } else {
      EXPECT_EQ(mag, 0.0);
    }
  }
}

TEST(Routing, RouterRejectsWrongWidth) {
  Rng rng = make_rng(14, "t");
  ParameterStore s;
  auto gr = init_global_router(s, "gr", 8, 2, rng);
  Tape t;
  EXPECT_THROW(route_global(t.constant(Tensor({2, 3, 6}, 0.0)), gr), DimensionError);
}

}  // namespace
}  // namespace hmmoe
