// Copyright 2026 The HMMoE Authors
// SPDX-License-Identifier: Apache-2.0

#include "hmmoe/routing.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <json.hpp>

#include "hmmoe/errors.hpp"

namespace hmmoe {

std::string_view to_string(Modality m) { return m == Modality::Visual ? "visual" : "audio"; }

namespace {

Tensor router_init(std::size_t dim, std::size_t n, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(dim));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor t({dim, n}, 0.0);
  for (double& x : t.storage()) x = dist(rng);
  return t;
}

// mean over the sequence axis, then [B, D] x [D, N] logits
Var router_logits(const Var& features, Parameter& w, const char* what) {
  const Shape& s = features.shape();
  const std::size_t dim = w.value.shape()[0];
  if (s.size() != 3 || s[2] != dim) {
    throw DimensionError(std::string(what) + " expects [B, S, " + std::to_string(dim) + "] features, got " +
                         shape_str(s));
  }
  Tape& t = features.tape();
  Var pooled = reshape(mean_pool(features), {s[0], dim});
  return matmul(pooled, t.param(w));
}

}  // namespace

GlobalRouterParams init_global_router(ParameterStore& store, const std::string& name, std::size_t dim,
                                      std::size_t groups, Rng& rng) {
  if (groups < 1) throw ConfigError("global router needs at least one group");
  return {&store.add(name, router_init(dim, groups, rng), false), groups};
}

LocalRouterParams init_local_router(ParameterStore& store, const std::string& name, std::size_t dim,
                                    std::size_t experts, Rng& rng) {
  if (experts < 1) throw ConfigError("local router needs at least one expert");
  return {&store.add(name, router_init(dim, experts, rng), false), experts};
}

Var route_global(const Var& features, const GlobalRouterParams& p) {
  return softmax(router_logits(features, *p.w_gr, "global router"), 1);
}

std::vector<std::size_t> top_k_indices(std::span<const double> probs, std::size_t k) {
  if (k < 1 || k > probs.size()) {
    throw ConfigError("top-k needs 1 <= k <= M, got k=" + std::to_string(k) + " M=" + std::to_string(probs.size()));
  }
  std::vector<std::size_t> order(probs.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return probs[a] > probs[b]; });
  order.resize(k);
  return order;
}

LocalRouting route_local(const Var& features, const LocalRouterParams& p, std::size_t k) {
  if (k < 1 || k > p.experts) {
    throw ConfigError("top-k needs 1 <= k <= M, got k=" + std::to_string(k) + " M=" + std::to_string(p.experts));
  }
  LocalRouting r;
  r.k = k;
  r.probs = softmax(router_logits(features, *p.w_lr, "local router"), 1);
  const Tensor& pv = r.probs.value();
  const std::size_t batch = pv.shape()[0], m = pv.shape()[1];
  r.combine_weights = Tensor({batch, m}, 0.0);
  r.selected.resize(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    r.selected[b] = top_k_indices(pv.data().subspan(b * m, m), k);
    for (std::size_t j : r.selected[b]) r.combine_weights[b * m + j] = pv[b * m + j];
  }
  return r;
}

Var combine_group(const LocalRouting& routing, const ExpertEvaluator& evaluate) {
  const Shape& ps = routing.probs.shape();
  const std::size_t batch = ps[0], m = ps[1];
  if (routing.selected.size() != batch) {
    throw ContractError("routing decision covers " + std::to_string(routing.selected.size()) +
                        " samples but probabilities cover " + std::to_string(batch));
  }
  Var total;
  for (std::size_t j = 0; j < m; ++j) {
    std::vector<std::size_t> rows;
    for (std::size_t b = 0; b < batch; ++b) {
      const auto& sel = routing.selected[b];
      if (std::find(sel.begin(), sel.end(), j) != sel.end()) rows.push_back(b);
    }
    if (rows.empty()) continue;
    Var out = evaluate(j, rows);
    if (out.shape().size() != 3 || out.shape()[0] != rows.size()) {
      throw ContractError("expert " + std::to_string(j) + " returned " + shape_str(out.shape()) + " for " +
                          std::to_string(rows.size()) + " samples");
    }
    const bool all_rows = rows.size() == batch;
    Var w = reshape(gather(all_rows ? routing.probs : gather(routing.probs, 0, rows), 1, {j}), {rows.size(), 1, 1});
    Var contrib = mul(out, w);
    if (!all_rows) contrib = scatter(contrib, 0, rows, batch);
    if (total.valid() && total.shape() != contrib.shape()) {
      throw ContractError("expert outputs disagree in shape: " + shape_str(total.shape()) + " vs " +
                          shape_str(contrib.shape()));
    }
    total = total.valid() ? add(total, contrib) : contrib;
  }
  if (!total.valid()) throw ContractError("no expert selected by any sample");
  return total;
}

Var combine_group(const LocalRouting& routing, const std::vector<Var>& expert_outputs) {
  const std::size_t m = routing.probs.shape()[1];
  if (expert_outputs.size() != m) {
    throw ContractError("routing decision is over " + std::to_string(m) + " experts but " +
                        std::to_string(expert_outputs.size()) + " outputs were supplied");
  }
  const std::size_t batch = routing.probs.shape()[0];
  return combine_group(routing, [&](std::size_t j, const std::vector<std::size_t>& rows) {
    if (rows.size() == batch) return expert_outputs[j];
    return gather(expert_outputs[j], 0, rows);
  });
}

std::string decision_to_json(const RoutingDecision& d) {
  nlohmann::json j;
  j["layer"] = d.layer ? nlohmann::json(*d.layer) : nlohmann::json(nullptr);
  j["modality"] = d.modality ? nlohmann::json(std::string(to_string(*d.modality))) : nlohmann::json(nullptr);
  j["k"] = d.k;
  j["group_weights"] = d.group_weights.storage();
  const std::size_t batch = d.batch();
  nlohmann::json groups = nlohmann::json::array();
  for (std::size_t g = 0; g < d.groups.size(); ++g) {
    const auto& gd = d.groups[g];
    const std::size_t m = gd.probs.shape()[1];
    std::vector<double> freq(m, 0.0);
    for (const auto& sel : gd.selected)
      for (std::size_t e : sel) freq[e] += 1.0;
    for (double& f : freq) f /= static_cast<double>(batch);
    groups.push_back({{"group", g},
                      {"probs", gd.probs.storage()},
                      {"selected", gd.selected},
                      {"selection_frequency", freq}});
  }
  j["groups"] = std::move(groups);
  return j.dump();
}

}  // namespace hmmoe
