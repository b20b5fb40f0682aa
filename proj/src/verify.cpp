// Copyright 2026 The HMMoE Authors
// SPDX-License-Identifier: Apache-2.0

#include "hmmoe/verify.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <set>
#include <sstream>

#include "hmmoe/errors.hpp"
#include "hmmoe/experts.hpp"
#include "hmmoe/layer.hpp"
#include "hmmoe/model.hpp"
#include "hmmoe/rng.hpp"
#include "hmmoe/routing.hpp"

namespace hmmoe {

std::string_view to_string(VerifySuite s) {
  switch (s) {
    case VerifySuite::GradCheck: return "gradcheck";
    case VerifySuite::Invariants: return "invariants";
    case VerifySuite::Ledger: return "ledger";
    case VerifySuite::All: return "all";
  }
  return "all";
}

VerifySuite parse_verify_suite(std::string_view name) {
  if (name == "gradcheck") return VerifySuite::GradCheck;
  if (name == "invariants") return VerifySuite::Invariants;
  if (name == "ledger") return VerifySuite::Ledger;
  if (name == "all") return VerifySuite::All;
  throw ConfigError("unknown suite '" + std::string(name) + "' (expected gradcheck, invariants, ledger or all)",
                    "scope");
}

Tolerances tolerances_from_env() {
  Tolerances t;
  const char* raw = std::getenv("HMMOE_TOL_OVERRIDE");
  if (raw == nullptr || *raw == '\0') return t;
  char* end = nullptr;
  const double v = std::strtod(raw, &end);
  if (end == raw || *end != '\0' || !std::isfinite(v)) {
    throw ConfigError("not a finite number: '" + std::string(raw) + "'", "HMMOE_TOL_OVERRIDE");
  }
  t.gradient = v;
  t.exact = v;
  return t;
}

bool VerifyReport::all_passed() const { return failures() == 0; }

std::size_t VerifyReport::failures() const {
  return static_cast<std::size_t>(std::count_if(checks.begin(), checks.end(), [](const auto& c) { return !c.passed; }));
}

double VerifyReport::max_value(std::string_view suite) const {
  double m = 0.0;
  for (const auto& c : checks) {
    if (c.suite == suite && c.tolerance) m = std::max(m, c.value);
  }
  return m;
}

std::string VerifyReport::table() const {
  std::size_t width = 4;
  for (const auto& c : checks) width = std::max(width, c.suite.size() + 1 + c.name.size());
  std::ostringstream os;
  char buf[64];
  for (const auto& c : checks) {
    const std::string label = c.suite + "/" + c.name;
    os << (c.passed ? "PASS  " : "FAIL  ") << label << std::string(width - label.size() + 2, ' ');
    if (c.tolerance) {
      std::snprintf(buf, sizeof(buf), "%.3e < %.1e", c.value, *c.tolerance);
    } else {
      std::snprintf(buf, sizeof(buf), "%s", c.passed ? "holds" : "violated");
    }
    os << buf;
    if (!c.detail.empty()) os << "  (" << c.detail << ")";
    os << '\n';
  }
  os << checks.size() - failures() << '/' << checks.size() << " checks passed\n";
  return os.str();
}

namespace {

constexpr std::size_t kB = 2, kSv = 3, kSa = 4, kD = 8, kR = 2, kM = 2, kK = 2;

class Recorder {
 public:
  Recorder(VerifyReport& report, std::string suite, const Tolerances& tol)
      : report_(report), suite_(std::move(suite)), tol_(tol) {}

  void below(const std::string& name, double value, double tolerance, std::string detail = {}) {
    report_.checks.push_back({suite_, name, value, tolerance, value < tolerance, std::move(detail)});
  }
  void gradient(const std::string& name, double value, std::string detail = {}) {
    below(name, value, tol_.gradient, std::move(detail));
  }
  void exact(const std::string& name, double value, std::string detail = {}) {
    below(name, value, tol_.exact, std::move(detail));
  }
  void holds(const std::string& name, bool ok, std::string detail = {}) {
    report_.checks.push_back({suite_, name, ok ? 0.0 : 1.0, std::nullopt, ok, std::move(detail)});
  }
  // Exceptions inside a check become a failed entry instead of aborting the suite.
  template <typename F>
  void guard(const std::string& name, F&& f) {
    try {
      f();
    } catch (const std::exception& e) {
      report_.checks.push_back({suite_, name, 1.0, std::nullopt, false, e.what()});
    }
  }

 private:
  VerifyReport& report_;
  std::string suite_;
  const Tolerances& tol_;
};

Tensor random_tensor(Shape shape, Rng& rng, double bound = 1.0) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor t(std::move(shape), 0.0);
  for (double& x : t.storage()) x = dist(rng);
  return t;
}

bool ends_with(const std::string& s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

// Down-projection biases are drawn positive so bottleneck units sit away
// from the relu kink, where central differences are not valid.
void randomize_trainable(ParameterStore& store, Rng& rng, double bound = 0.5) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::uniform_real_distribution<double> positive(bound, 2.0 * bound);
  store.for_each([&](Parameter& p) {
    if (p.frozen) return;
    const bool down_bias = ends_with(p.name, "b_down");
    for (double& x : p.value.storage()) x = down_bias ? positive(rng) : dist(rng);
  });
}

std::string worst(const GradCheckReport& r) {
  std::ostringstream os;
  os << r.entries_checked << " entries, worst " << r.worst_parameter << "[" << r.worst_index << "]";
  return os.str();
}

HmmoeConfig micro_layer_config() {
  HmmoeConfig c = default_hmmoe_config(kD, kR, kM, kK);
  return c;
}

HmmoeConfig all_single_config(std::size_t dim, std::size_t rank, std::size_t groups, std::size_t m) {
  HmmoeConfig c;
  c.dim = dim;
  c.rank = rank;
  c.top_k = m;
  c.groups.assign(groups, {ExpertKind::SingleModal, m});
  return c;
}

// Weighted sum of every output entry so no gradient cancels by symmetry.
Var probe_loss(const Var& out, const Tensor& weights) { return sum_all(mul(out, out.tape().constant(weights))); }

// ---- gradient checks --------------------------------------------------------------

void gradcheck_suite(Recorder& rec) {
  Rng rng = make_rng(0x5eed, "verify.gradcheck");
  const Tensor v = random_tensor({kB, kSv, kD}, rng);
  const Tensor a = random_tensor({kB, kSa, kD}, rng);
  const Tensor wv = random_tensor({kB, kSv, kD}, rng);

  for (ExpertKind kind : {ExpertKind::SingleModal, ExpertKind::CrossAttention, ExpertKind::ChannelAttention}) {
    const std::string name = "expert_" + std::string(to_string(kind));
    rec.guard(name, [&] {
      ParameterStore store;
      ExpertParams p = init_expert(store, "e", kind, kD, kR, rng);
      randomize_trainable(store, rng);
      auto r = finite_difference_check(
          [&](Tape& t) { return probe_loss(expert_forward(t.constant(v), t.constant(a), p), wv); }, store);
      rec.gradient(name, r.max_relative_error, worst(r));
    });
  }

  rec.guard("global_router", [&] {
    ParameterStore store;
    auto g = init_global_router(store, "gr", kD, 3, rng);
    const Tensor w = random_tensor({kB, 3}, rng);
    auto r = finite_difference_check([&](Tape& t) { return probe_loss(route_global(t.constant(v), g), w); }, store);
    rec.gradient("global_router", r.max_relative_error, worst(r));
  });

  for (std::size_t k : {std::size_t{1}, std::size_t{2}}) {
    const std::string name = "local_router_k" + std::to_string(k);
    rec.guard(name, [&] {
      ParameterStore store;
      auto lr = init_local_router(store, "lr", kD, kM, rng);
      randomize_trainable(store, rng);
      std::vector<Tensor> outs;
      for (std::size_t j = 0; j < kM; ++j) outs.push_back(random_tensor({kB, kSv, kD}, rng));
      auto r = finite_difference_check(
          [&](Tape& t) {
            LocalRouting routing = route_local(t.constant(v), lr, k);
            std::vector<Var> vars;
            for (const auto& o : outs) vars.push_back(t.constant(o));
            return probe_loss(combine_group(routing, vars), wv);
          },
          store);
      rec.gradient(name, r.max_relative_error, worst(r));
    });
  }

  for (bool shared : {false, true}) {
    const std::string name = shared ? "layer_shared" : "layer";
    rec.guard(name, [&] {
      ParameterStore store;
      HmmoeConfig c = micro_layer_config();
      c.share_across_modalities = shared;
      HmmoeLayer layer(store, "h", c, rng);
      randomize_trainable(store, rng);
      const Tensor wa = random_tensor({kB, kSa, kD}, rng);
      auto r = finite_difference_check(
          [&](Tape& t) {
            ModalPair out = layer.forward({t.constant(v), t.constant(a)});
            return add(probe_loss(out.visual, wv), probe_loss(out.audio, wa));
          },
          store);
      rec.gradient(name, r.max_relative_error, worst(r));
    });
  }

  rec.guard("layer_sparse_k1", [&] {
    ParameterStore store;
    HmmoeLayer layer(store, "h", default_hmmoe_config(kD, kR, 3, 1), rng);
    randomize_trainable(store, rng);
    const Tensor wa = random_tensor({kB, kSa, kD}, rng);
    auto r = finite_difference_check(
        [&](Tape& t) {
          ModalPair out = layer.forward({t.constant(v), t.constant(a)});
          return add(probe_loss(out.visual, wv), probe_loss(out.audio, wa));
        },
        store);
    rec.gradient("layer_sparse_k1", r.max_relative_error, worst(r));
  });

  rec.guard("model", [&] {
    ModelConfig mc;
    mc.layers = 1;
    mc.dim = kD;
    mc.classes = 3;
    mc.hmmoe = micro_layer_config();
    Model model = build_model(mc, 7);
    randomize_trainable(model.params(), rng);
    const std::vector<int> labels{0, 2};
    auto r = finite_difference_check(
        [&](Tape& t) { return cross_entropy(model.forward(t, v, a), labels); }, model.params());
    rec.gradient("model", r.max_relative_error, worst(r));
  });
}

// ---- invariants --------------------------------------------------------------------

double max_row_sum_error(const Tensor& probs) {
  const std::size_t rows = probs.shape()[0], cols = probs.shape()[1];
  double worst_err = 0.0;
  for (std::size_t i = 0; i < rows; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < cols; ++j) s += probs[i * cols + j];
    worst_err = std::max(worst_err, std::abs(s - 1.0));
  }
  return worst_err;
}

void invariants_suite(Recorder& rec) {
  Rng rng = make_rng(0x5eed, "verify.invariants");

  rec.guard("routing_distributions", [&] {
    double worst_err = 0.0;
    bool k_ok = true;
    for (int trial = 0; trial < 20; ++trial) {
      ParameterStore store;
      HmmoeLayer layer(store, "h", micro_layer_config(), rng);
      randomize_trainable(store, rng, 2.0);
      Tape t;
      std::vector<RoutingDecision> decisions;
      layer.forward({t.constant(random_tensor({4, kSv, kD}, rng)), t.constant(random_tensor({4, kSa, kD}, rng))},
                    &decisions, 0);
      for (const auto& d : decisions) {
        worst_err = std::max(worst_err, max_row_sum_error(d.group_weights));
        for (const auto& g : d.groups) {
          worst_err = std::max(worst_err, max_row_sum_error(g.probs));
          for (const auto& sel : g.selected) {
            std::set<std::size_t> distinct(sel.begin(), sel.end());
            k_ok = k_ok && sel.size() == d.k && distinct.size() == d.k;
          }
        }
      }
    }
    rec.exact("routing_distributions", worst_err, "sum of probabilities minus one");
    rec.holds("exactly_k_selected", k_ok);
  });

  rec.guard("unselected_zero_gradient", [&] {
    // One sample, k=1: in every group exactly one expert runs.
    ParameterStore store;
    HmmoeLayer layer(store, "h", default_hmmoe_config(kD, kR, 3, 1), rng);
    randomize_trainable(store, rng);
    Tape t;
    std::vector<RoutingDecision> decisions;
    ModalPair out =
        layer.forward({t.constant(random_tensor({1, kSv, kD}, rng)), t.constant(random_tensor({1, kSa, kD}, rng))},
                      &decisions, 0);
    store.zero_grad();
    t.backward(add(sum_all(out.visual), sum_all(out.audio)));
    double leaked = 0.0;
    bool selected_moves = false;
    for (Modality m : {Modality::Visual, Modality::Audio}) {
      const RoutingDecision& d = decisions[m == Modality::Visual ? 0 : 1];
      const StreamParams& sp = layer.stream(m);
      for (std::size_t g = 0; g < sp.experts.size(); ++g) {
        for (std::size_t j = 0; j < sp.experts[g].size(); ++j) {
          const ExpertParams& e = sp.experts[g][j];
          double mag = 0.0;
          for (Parameter* p : {e.w_down, e.b_down, e.w_up, e.b_up, e.w_q, e.w_k, e.w_v}) {
            if (p == nullptr) continue;
            for (double x : p->grad.data()) mag = std::max(mag, std::abs(x));
          }
          const bool chosen = d.groups[g].selected[0][0] == j;
          if (chosen) selected_moves = selected_moves || mag > 0.0;
          else leaked = std::max(leaked, mag);
        }
      }
    }
    rec.holds("unselected_zero_gradient", leaked == 0.0, "max |grad| of unselected experts");
    rec.holds("selected_receive_gradient", selected_moves);
  });

  rec.guard("logit_shift_invariance", [&] {
    // Dyadic logits and shift keep every addition exact, so the shift must
    // leave probabilities and selections bitwise unchanged.
    bool identical = true;
    std::uniform_int_distribution<int> num(-4096, 4096);
    for (int trial = 0; trial < 100; ++trial) {
      Tensor logits({3, 4}, 0.0);
      for (double& x : logits.storage()) x = num(rng) / 1024.0;
      Tensor shifted = logits;
      const double c = num(rng) / 64.0;
      for (double& x : shifted.storage()) x += c;
      const Tensor p0 = softmax_values(logits, 1);
      const Tensor p1 = softmax_values(shifted, 1);
      identical = identical && p0 == p1;
      for (std::size_t b = 0; b < 3; ++b) {
        for (std::size_t k = 1; k <= 4; ++k) {
          identical = identical &&
                      top_k_indices(p0.data().subspan(b * 4, 4), k) == top_k_indices(p1.data().subspan(b * 4, 4), k);
        }
      }
    }
    rec.holds("logit_shift_invariance", identical, "bitwise on dyadic logits");
  });

  rec.guard("layer_identity_at_init", [&] {
    double worst_diff = 0.0;
    for (std::size_t groups : {std::size_t{1}, std::size_t{2}, std::size_t{3}}) {
      for (std::size_t m : {std::size_t{1}, std::size_t{2}, std::size_t{3}}) {
        ParameterStore store;
        HmmoeLayer layer(store, "h", all_single_config(kD, kR, groups, m), rng);
        Tape t;
        const Tensor v = random_tensor({kB, kSv, kD}, rng);
        const Tensor a = random_tensor({kB, kSa, kD}, rng);
        ModalPair out = layer.forward({t.constant(v), t.constant(a)});
        worst_diff = std::max({worst_diff, max_abs_diff(out.visual.value(), v), max_abs_diff(out.audio.value(), a)});
      }
    }
    rec.exact("layer_identity_at_init", worst_diff, "all-single groups, k = M");
  });

  rec.guard("transparent_at_init", [&] {
    ModelConfig mc;
    mc.layers = 2;
    mc.dim = kD;
    mc.classes = 3;
    mc.hmmoe = all_single_config(kD, kR, 2, 2);
    Model model = build_model(mc, 11);
    const Tensor v = random_tensor({4, kSv, kD}, rng);
    const Tensor a = random_tensor({4, kSa, kD}, rng);
    rec.exact("transparent_at_init", max_abs_diff(model.logits(v, a), model.logits(v, a, true)),
              "logits with and without adapters");
  });

  rec.guard("output_shapes", [&] {
    bool ok = true;
    for (const auto& c : {micro_layer_config(), default_hmmoe_config(kD, 4, 3, 2), all_single_config(kD, 1, 1, 1)}) {
      ParameterStore store;
      HmmoeLayer layer(store, "h", c, rng);
      Tape t;
      ModalPair out =
          layer.forward({t.constant(random_tensor({3, 5, kD}, rng)), t.constant(random_tensor({3, 2, kD}, rng))});
      ok = ok && out.visual.shape() == Shape{3, 5, kD} && out.audio.shape() == Shape{3, 2, kD};
    }
    rec.holds("output_shapes", ok);
  });

  rec.guard("determinism", [&] {
    ModelConfig mc;
    mc.layers = 1;
    mc.dim = kD;
    mc.classes = 2;
    mc.hmmoe = micro_layer_config();
    const Tensor v = random_tensor({kB, kSv, kD}, rng);
    const Tensor a = random_tensor({kB, kSa, kD}, rng);
    Model m1 = build_model(mc, 3);
    Model m2 = build_model(mc, 3);
    rec.holds("determinism", m1.logits(v, a) == m2.logits(v, a), "same seed, bitwise equal logits");
  });

  rec.guard("freeze_contract", [&] {
    ModelConfig mc;
    mc.layers = 1;
    mc.dim = kD;
    mc.classes = 2;
    mc.hmmoe = micro_layer_config();
    Model model = build_model(mc, 5);
    const std::uint64_t before = frozen_digest(model.params());
    Optimizer opt;
    Batch batch{random_tensor({4, kSv, kD}, rng), random_tensor({4, kSa, kD}, rng), {0, 1, 1, 0}};
    for (int step = 0; step < 50; ++step) train_step(model, batch, opt, 1e-2);
    rec.holds("freeze_contract", frozen_digest(model.params()) == before, "backbone digest after 50 steps");
  });
}

// ---- ledger -----------------------------------------------------------------------

void ledger_suite(Recorder& rec) {
  Rng rng = make_rng(0x5eed, "verify.ledger");

  rec.guard("single_expert_example", [&] {
    ParameterStore store;
    init_expert(store, "e", ExpertKind::SingleModal, 8, 2, rng);
    const auto n = count_parameters(store).trainable;
    rec.holds("single_expert_example", n == 42, std::to_string(n) + " parameters for D=8, r=2");
  });

  rec.guard("expert_closed_form", [&] {
    std::size_t mismatches = 0, cases = 0;
    for (std::size_t d : {4, 8, 16, 32, 64}) {
      for (std::size_t r = 1; r < d; r *= 2) {
        for (ExpertKind kind : {ExpertKind::SingleModal, ExpertKind::CrossAttention, ExpertKind::ChannelAttention}) {
          ParameterStore store;
          init_expert(store, "e", kind, d, r, rng);
          ++cases;
          if (count_parameters(store).trainable != expert_parameter_count(kind, d, r)) ++mismatches;
        }
      }
    }
    rec.holds("expert_closed_form", mismatches == 0, std::to_string(cases) + " configurations");
  });

  rec.guard("layer_closed_form", [&] {
    std::size_t mismatches = 0, cases = 0;
    const std::vector<std::vector<GroupSpec>> layouts{
        {{ExpertKind::SingleModal, 1}},
        {{ExpertKind::SingleModal, 2}, {ExpertKind::CrossAttention, 2}, {ExpertKind::ChannelAttention, 2}},
        {{ExpertKind::CrossAttention, 3}, {ExpertKind::ChannelAttention, 1}},
        {{ExpertKind::SingleModal, 4}, {ExpertKind::SingleModal, 2}},
    };
    for (const auto& groups : layouts) {
      for (std::size_t d : {8, 16, 32}) {
        for (std::size_t r : {1, 2, 4}) {
          for (bool shared : {false, true}) {
            HmmoeConfig c;
            c.dim = d;
            c.rank = r;
            c.top_k = 1;
            c.groups = groups;
            c.share_across_modalities = shared;
            ParameterStore store;
            HmmoeLayer layer(store, "h", c, rng);
            ++cases;
            if (count_parameters(store).trainable != hmmoe_layer_parameter_count(c)) ++mismatches;
          }
        }
      }
    }
    rec.holds("layer_closed_form", mismatches == 0, std::to_string(cases) + " configurations");
  });

  rec.guard("model_closed_form", [&] {
    std::size_t mismatches = 0, cases = 0;
    for (std::size_t layers : {1, 2, 3}) {
      for (std::size_t d : {8, 32}) {
        for (std::size_t classes : {2, 5}) {
          ModelConfig mc;
          mc.layers = layers;
          mc.dim = d;
          mc.classes = classes;
          mc.hmmoe = default_hmmoe_config(d, 4, 2, 1);
          Model m = build_model(mc, 1);
          const ParameterLedger l = count_parameters(m.params());
          ++cases;
          if (l.trainable != model_trainable_parameter_count(mc) || l.frozen != model_frozen_parameter_count(mc)) {
            ++mismatches;
          }
        }
      }
    }
    rec.holds("model_closed_form", mismatches == 0, std::to_string(cases) + " configurations");
  });

  rec.guard("component_breakdown", [&] {
    ModelConfig mc;
    mc.hmmoe = default_hmmoe_config(mc.dim, 8, 2, 1);
    Model m = build_model(mc, 1);
    const ParameterLedger l = count_parameters(m.params());
    std::size_t t = 0, f = 0;
    for (const auto& c : l.components) {
      t += c.trainable;
      f += c.frozen;
    }
    rec.holds("component_breakdown", t == l.trainable && f == l.frozen && l.total() > 0,
              "per-component counts sum to the totals");
  });
}

}  // namespace

VerifyReport run_verification(VerifySuite suite, const Tolerances& tol) {
  VerifyReport report;
  if (suite == VerifySuite::GradCheck || suite == VerifySuite::All) {
    Recorder rec(report, "gradcheck", tol);
    gradcheck_suite(rec);
  }
  if (suite == VerifySuite::Invariants || suite == VerifySuite::All) {
    Recorder rec(report, "invariants", tol);
    invariants_suite(rec);
  }
  if (suite == VerifySuite::Ledger || suite == VerifySuite::All) {
    Recorder rec(report, "ledger", tol);
    ledger_suite(rec);
  }
  return report;
}

}  // namespace hmmoe
