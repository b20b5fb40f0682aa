// Copyright 2026 The HMMoE Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <tuple>

#include "hmmoe/errors.hpp"
#include "hmmoe/layer.hpp"
#include "hmmoe/model.hpp"
#include "oracles.hpp"

namespace hmmoe {
namespace {

void randomize_trainable(ParameterStore& s, std::mt19937_64& rng, double bound = 0.5) {
  s.for_each([&](Parameter& p) {
    if (p.frozen) return;
    for (double& x : p.value.storage()) x = std::uniform_real_distribution<double>(-bound, bound)(rng);
  });
}

HmmoeConfig single_groups(std::size_t dim, std::size_t rank, std::vector<std::size_t> sizes, std::size_t k) {
  HmmoeConfig c;
  c.dim = dim;
  c.rank = rank;
  c.top_k = k;
  for (std::size_t m : sizes) c.groups.push_back({ExpertKind::SingleModal, m});
  return c;
}

ModelConfig model_config(std::size_t layers, std::size_t dim, std::size_t classes, HmmoeConfig h) {
  ModelConfig c;
  c.layers = layers;
  c.dim = dim;
  c.classes = classes;
  c.hmmoe = std::move(h);
  return c;
}

Tensor run_layer(const HmmoeLayer& l, const Tensor& v, const Tensor& a, bool audio = false,
                 std::vector<RoutingDecision>* decisions = nullptr) {
  Tape t;
  ModalPair out = l.forward({t.constant(v), t.constant(a)}, decisions, 0);
  return audio ? out.audio.value() : out.visual.value();
}

// ---- layer ---------------------------------------------------------------------------

TEST(Layer, OneFreshSingleExpertIsIdentity) {
  Rng rng = make_rng(1, "t");
  ParameterStore s;
  HmmoeLayer l(s, "h", single_groups(8, 2, {1}, 1), rng);
  std::mt19937_64 g(1);
  const Tensor v = oracle::random_tensor({2, 3, 8}, g), a = oracle::random_tensor({2, 4, 8}, g);
  EXPECT_LT(max_abs_diff(run_layer(l, v, a), v), 1e-12);
  EXPECT_LT(max_abs_diff(run_layer(l, v, a, true), a), 1e-12);
}

TEST(Layer, ZeroGlobalRouterAveragesGroups) {
  // Two fresh single groups with k=M and a zero global router: 0.5 V + 0.5 V = V.
  Rng rng = make_rng(2, "t");
  ParameterStore s;
  HmmoeLayer l(s, "h", single_groups(8, 2, {2, 2}, 2), rng);
  l.stream(Modality::Visual).global.w_gr->value.fill(0.0);
  std::mt19937_64 g(2);
  const Tensor v = oracle::random_tensor({3, 5, 8}, g), a = oracle::random_tensor({3, 2, 8}, g);
  EXPECT_LT(max_abs_diff(run_layer(l, v, a), v), 1e-12);
}

TEST(Layer, HeterogeneousMatchesLoopOracle) {
  std::mt19937_64 g(3);
  for (std::size_t k : {1u, 2u}) {
    for (bool share : {false, true}) {
      Rng rng = make_rng(3 + k, "t");
      ParameterStore s;
      HmmoeConfig c = default_hmmoe_config(8, 2, 2, k);
      c.share_across_modalities = share;
      HmmoeLayer l(s, "h", c, rng);
      randomize_trainable(s, g);
      const Tensor v = oracle::random_tensor({4, 3, 8}, g), a = oracle::random_tensor({4, 5, 8}, g);
      Tape t;
      ModalPair out = l.forward({t.constant(v), t.constant(a)});
      const auto [ov, oa] = oracle::layer(v, a, l);
      EXPECT_LT(max_abs_diff(out.visual.value(), ov), 1e-12) << "k=" << k << " share=" << share;
      EXPECT_LT(max_abs_diff(out.audio.value(), oa), 1e-12) << "k=" << k << " share=" << share;
    }
  }
}

TEST(Layer, FreshHeterogeneousLayerWeightsSingleGroupOnly) {
  // Fresh cross and channel experts output zero, so the layer returns G_single * V.
  Rng rng = make_rng(5, "t");
  ParameterStore s;
  HmmoeLayer l(s, "h", default_hmmoe_config(8, 2, 2, 2), rng);
  std::mt19937_64 g(5);
  const Tensor v = oracle::random_tensor({2, 3, 8}, g), a = oracle::random_tensor({2, 4, 8}, g);
  Tape t;
  const Tensor gw = route_global(t.constant(v), l.stream(Modality::Visual).global).value();
  const Tensor out = run_layer(l, v, a);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t i = 0; i < 24; ++i) EXPECT_NEAR(out[b * 24 + i], gw[b * 3] * v[b * 24 + i], 1e-12);
}

TEST(Layer, ShapeAndConfigErrors) {
  Rng rng = make_rng(6, "t");
  ParameterStore s;
  HmmoeLayer l(s, "h", default_hmmoe_config(8, 2, 2, 1), rng);
  Tape t;
  EXPECT_THROW(l.forward({t.constant(Tensor({2, 3, 6}, 0.0)), t.constant(Tensor({2, 3, 8}, 0.0))}), DimensionError);
  EXPECT_THROW(l.forward({t.constant(Tensor({2, 3, 8}, 0.0)), t.constant(Tensor({1, 3, 8}, 0.0))}), DimensionError);
  EXPECT_THROW(HmmoeLayer(s, "bad", default_hmmoe_config(8, 2, 2, 3), rng), ConfigError);
  EXPECT_THROW(HmmoeLayer(s, "bad", default_hmmoe_config(8, 8, 2, 1), rng), ConfigError);
  HmmoeConfig empty = default_hmmoe_config(8, 2, 2, 1);
  empty.groups.clear();
  EXPECT_THROW(HmmoeLayer(s, "bad", empty, rng), ConfigError);
}

TEST(Layer, ParameterCountMatchesStore) {
  for (std::size_t m = 1; m <= 3; ++m) {
    for (bool share : {false, true}) {
      Rng rng = make_rng(7, "t");
      ParameterStore s;
      HmmoeConfig c = default_hmmoe_config(16, 4, m, 1);
      c.share_across_modalities = share;
      HmmoeLayer l(s, "h", c, rng);
      const ParameterLedger ledger = count_parameters(s);
      EXPECT_EQ(ledger.trainable, hmmoe_layer_parameter_count(c));
      const std::size_t per_stream = 16 * 3 + 3 * (16 * m) + m * (3 * (2 * 16 * 4 + 4 + 16) + 3 * 16);
      EXPECT_EQ(ledger.trainable, share ? per_stream : 2 * per_stream);
    }
  }
}

TEST(Ledger, EmptyStoreAndComponents) {
  ParameterStore s;
  const ParameterLedger empty = count_parameters(s);
  EXPECT_EQ(empty.total(), 0u);
  EXPECT_EQ(empty.fraction(), 0.0);
  s.add("backbone.l0.visual.w", Tensor({3, 2}, 0.0), true);
  s.add("backbone.l1.visual.w", Tensor({4}, 0.0), true);
  s.add("head.w", Tensor({5}, 0.0));
  const ParameterLedger l = count_parameters(s);
  EXPECT_EQ(l.trainable, 5u);
  EXPECT_EQ(l.frozen, 10u);
  ASSERT_EQ(l.components.size(), 3u);
  EXPECT_EQ(l.components[0].component, "backbone.l0");
  EXPECT_EQ(l.components[2].component, "head");
  EXPECT_DOUBLE_EQ(l.fraction(), 5.0 / 15.0);
}

TEST(Utilization, AllActiveGivesFrequencyOne) {
  Rng rng = make_rng(8, "t");
  ParameterStore s;
  HmmoeLayer l(s, "h", default_hmmoe_config(8, 2, 2, 2), rng);
  std::mt19937_64 g(8);
  std::vector<RoutingDecision> d;
  run_layer(l, oracle::random_tensor({5, 3, 8}, g), oracle::random_tensor({5, 2, 8}, g), false, &d);
  const UtilizationTable u = utilization_stats(d);
  ASSERT_EQ(u.rows.size(), 2u * 3u * 2u);
  for (const auto& r : u.rows) EXPECT_EQ(r.frequency, 1.0);
}

TEST(Utilization, ZeroRouterPicksFirstExpert) {
  Rng rng = make_rng(9, "t");
  ParameterStore s;
  HmmoeLayer l(s, "h", default_hmmoe_config(8, 2, 3, 1), rng);
  for (Modality m : {Modality::Visual, Modality::Audio})
    for (const auto& lr : l.stream(m).local) lr.w_lr->value.fill(0.0);
  std::mt19937_64 g(9);
  std::vector<RoutingDecision> d;
  run_layer(l, oracle::random_tensor({6, 3, 8}, g), oracle::random_tensor({6, 2, 8}, g), false, &d);
  for (const auto& r : utilization_stats(d).rows) EXPECT_EQ(r.frequency, r.expert == 0 ? 1.0 : 0.0);
}

TEST(Utilization, MatchesCountingOracleAndSumsToK) {
  Rng rng = make_rng(10, "t");
  ParameterStore s;
  HmmoeLayer l(s, "h", default_hmmoe_config(8, 2, 4, 2), rng);
  std::mt19937_64 g(10);
  randomize_trainable(s, g, 2.0);
  std::vector<RoutingDecision> d;
  for (std::size_t chunk = 0; chunk < 3; ++chunk) {
    run_layer(l, oracle::random_tensor({7, 3, 8}, g), oracle::random_tensor({7, 2, 8}, g), false, &d);
  }
  const UtilizationTable u = utilization_stats(d);
  // Count by hand from the recorded top-k sets.
  std::map<std::tuple<int, std::size_t, std::size_t>, double> counts;
  std::map<std::pair<int, std::size_t>, double> sums;
  for (const auto& dec : d)
    for (std::size_t gi = 0; gi < dec.groups.size(); ++gi)
      for (const auto& sel : dec.groups[gi].selected)
        for (std::size_t e : sel) counts[{static_cast<int>(*dec.modality), gi, e}] += 1.0 / 21.0;
  for (const auto& r : u.rows) {
    const std::tuple<int, std::size_t, std::size_t> key{static_cast<int>(r.modality), r.group, r.expert};
    EXPECT_NEAR(r.frequency, counts[key], 1e-15);
    sums[{static_cast<int>(r.modality), r.group}] += r.frequency;
  }
  for (const auto& [key, total] : sums) EXPECT_NEAR(total, 2.0, 1e-9);
  const std::string csv = u.to_csv();
  EXPECT_EQ(csv.rfind("layer,modality,group,expert_index,frequency\n", 0), 0u);
}

TEST(Utilization, UntaggedDecisionIsRejected) {
  RoutingDecision d;
  d.groups.push_back({Tensor({1, 2}, 0.5), {{0}}, Tensor({1, 2}, 0.0)});
  std::vector<RoutingDecision> ds{d};
  EXPECT_THROW(utilization_stats(ds), ContractError);
}

// ---- model ---------------------------------------------------------------------------

TEST(Model, LogitsShapeAndDeterminism) {
  const ModelConfig c = model_config(2, 16, 3, default_hmmoe_config(16, 4, 2, 1));
  Model a = build_model(c, 11), b = build_model(c, 11), other = build_model(c, 12);
  std::mt19937_64 g(11);
  const Tensor v = oracle::random_tensor({4, 5, 16}, g), au = oracle::random_tensor({4, 3, 16}, g);
  const Tensor la = a.logits(v, au);
  EXPECT_EQ(la.shape(), (Shape{4, 3}));
  EXPECT_EQ(la, b.logits(v, au));
  EXPECT_NE(la, other.logits(v, au));
  EXPECT_EQ(frozen_digest(a.params()), frozen_digest(b.params()));
}

TEST(Model, MatchesLoopOracleWithRandomAdapters) {
  const ModelConfig c = model_config(2, 8, 3, default_hmmoe_config(8, 2, 2, 1));
  Model m = build_model(c, 13);
  std::mt19937_64 g(13);
  randomize_trainable(m.params(), g);
  const Tensor v = oracle::random_tensor({3, 4, 8}, g), a = oracle::random_tensor({3, 2, 8}, g);
  const Tensor want = oracle::model_logits(v, a, m.visual_blocks(), m.audio_blocks(), m.adapters(),
                                           m.head_weight().value, m.head_bias().value);
  EXPECT_LT(max_abs_diff(m.logits(v, a), want), 1e-10);
  const Tensor bare = oracle::model_logits(v, a, m.visual_blocks(), m.audio_blocks(), m.adapters(),
                                           m.head_weight().value, m.head_bias().value, false);
  EXPECT_LT(max_abs_diff(m.logits(v, a, true), bare), 1e-10);
}

TEST(Model, TransparentAtInitWithSingleGroups) {
  const ModelConfig c = model_config(2, 8, 2, single_groups(8, 2, {2}, 2));
  Model m = build_model(c, 14);
  std::mt19937_64 g(14);
  const Tensor v = oracle::random_tensor({3, 4, 8}, g), a = oracle::random_tensor({3, 2, 8}, g);
  EXPECT_LT(max_abs_diff(m.logits(v, a), m.logits(v, a, true)), 1e-12);
}

TEST(Model, ParameterCountsMatchClosedForm) {
  const ModelConfig c = model_config(2, 32, 2, default_hmmoe_config(32, 8, 2, 1));
  Model m = build_model(c, 15);
  const ParameterLedger l = count_parameters(m.params());
  EXPECT_EQ(l.frozen, model_frozen_parameter_count(c));
  EXPECT_EQ(l.frozen, 2u * 2u * (12u * 32u * 32u + 4u * 32u));
  EXPECT_EQ(l.trainable, model_trainable_parameter_count(c));
  EXPECT_EQ(head_parameter_count(32, 2), 2u * 32u * 2u + 2u);
}

TEST(Model, InputErrors) {
  Model m = build_model(model_config(1, 8, 2, default_hmmoe_config(8, 2, 2, 1)), 16);
  EXPECT_THROW(m.logits(Tensor({2, 3, 7}, 0.0), Tensor({2, 3, 8}, 0.0)), DimensionError);
  EXPECT_THROW(m.logits(Tensor({2, 3, 8}, 0.0), Tensor({3, 3, 8}, 0.0)), DimensionError);
  EXPECT_THROW(build_model(model_config(1, 8, 1, default_hmmoe_config(8, 2, 2, 1)), 0), ConfigError);
  EXPECT_THROW(build_model(model_config(1, 8, 2, default_hmmoe_config(16, 2, 2, 1)), 0), ConfigError);
  Optimizer opt;
  Batch bad{Tensor({2, 3, 8}, 0.0), Tensor({2, 3, 8}, 0.0), {0, 2}};
  EXPECT_THROW(train_step(m, bad, opt, 1e-3), DataError);
}

Batch random_batch(std::mt19937_64& g, std::size_t b, std::size_t d, std::size_t classes) {
  Batch batch{oracle::random_tensor({b, 4, d}, g), oracle::random_tensor({b, 3, d}, g), {}};
  for (std::size_t i = 0; i < b; ++i) batch.labels.push_back(static_cast<int>(i % classes));
  return batch;
}

TEST(Training, ZeroLearningRateIsNoOp) {
  Model m = build_model(model_config(1, 8, 2, default_hmmoe_config(8, 2, 2, 1)), 17);
  std::mt19937_64 g(17);
  const Batch batch = random_batch(g, 4, 8, 2);
  const Tensor before = m.logits(batch.visual, batch.audio);
  Optimizer opt;
  for (int i = 0; i < 3; ++i) train_step(m, batch, opt, 0.0);
  EXPECT_EQ(before, m.logits(batch.visual, batch.audio));
}

TEST(Training, SmallSgdStepDescends) {
  Model m = build_model(model_config(1, 8, 3, default_hmmoe_config(8, 2, 2, 1)), 18);
  std::mt19937_64 g(18);
  randomize_trainable(m.params(), g, 0.3);
  const Batch batch = random_batch(g, 6, 8, 3);
  Optimizer sgd(OptimizerConfig{OptimizerKind::Sgd});
  const double before = train_step(m, batch, sgd, 1e-3);
  Tape t;
  const double after = cross_entropy(m.forward(t, batch.visual, batch.audio), batch.labels).value()[0];
  EXPECT_LT(after, before);
}

TEST(Training, FrozenBackboneStaysBitIdentical) {
  Model m = build_model(model_config(2, 8, 2, default_hmmoe_config(8, 2, 2, 1)), 19);
  std::mt19937_64 g(19);
  const std::uint64_t digest = frozen_digest(m.params());
  const Parameter& head = m.head_weight();
  const Tensor head_before = head.value;
  Optimizer opt;
  for (int i = 0; i < 50; ++i) train_step(m, random_batch(g, 4, 8, 2), opt, 1e-2);
  EXPECT_EQ(frozen_digest(m.params()), digest);
  EXPECT_NE(head.value, head_before);
}

TEST(Training, GradientReachesEveryAdapterLayer) {
  Model m = build_model(model_config(3, 8, 2, default_hmmoe_config(8, 2, 2, 2)), 20);
  std::mt19937_64 g(20);
  const Batch batch = random_batch(g, 4, 8, 2);
  m.params().zero_grad();
  Tape t;
  t.backward(cross_entropy(m.forward(t, batch.visual, batch.audio), batch.labels));
  for (std::size_t l = 0; l < 3; ++l) {
    // w_up starts at zero, so its gradient is the first signal an adapter receives.
    double mag = 0.0;
    for (Modality mod : {Modality::Visual, Modality::Audio})
      for (double x : m.adapters()[l].stream(mod).experts[0][0].w_up->grad.data()) mag = std::max(mag, std::abs(x));
    EXPECT_GT(mag, 0.0) << "layer " << l;
  }
  m.params().for_each([](const Parameter& p) {
    if (!p.frozen) return;
    for (double x : p.grad.data()) ASSERT_EQ(x, 0.0) << p.name;
  });
}

}  // namespace
}  // namespace hmmoe
