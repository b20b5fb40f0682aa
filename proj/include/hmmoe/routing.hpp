// Copyright 2026 The HMMoE Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "hmmoe/autodiff.hpp"
#include "hmmoe/rng.hpp"

namespace hmmoe {

enum class Modality { Visual, Audio };

std::string_view to_string(Modality m);

struct GlobalRouterParams {
  Parameter* w_gr = nullptr;  // [D, G]
  std::size_t groups = 0;
};

struct LocalRouterParams {
  Parameter* w_lr = nullptr;  // [D, M]
  std::size_t experts = 0;
};

GlobalRouterParams init_global_router(ParameterStore& store, const std::string& name, std::size_t dim,
                                      std::size_t groups, Rng& rng);
LocalRouterParams init_local_router(ParameterStore& store, const std::string& name, std::size_t dim,
                                    std::size_t experts, Rng& rng);

/// Dense group weights: softmax(mean_S(features) W_gr) per sample, [B, G].
Var route_global(const Var& features, const GlobalRouterParams& p);

/// One group's local routing for a batch.
struct LocalRouting {
  Var probs;                                     // [B, M], differentiable
  std::size_t k = 0;
  std::vector<std::vector<std::size_t>> selected;  // per sample, highest probability first
  Tensor combine_weights;                        // [B, M], probs on the selected set, 0 elsewhere
};

/// Probabilities softmax(mean_S(features) W_lr) and per-sample top-k.
/// Combine weights are the raw probabilities (no renormalization).
LocalRouting route_local(const Var& features, const LocalRouterParams& p, std::size_t k);

/// Indices of the k largest entries, largest first; ties go to the lower index.
std::vector<std::size_t> top_k_indices(std::span<const double> probs, std::size_t k);

/// Produces the outputs of expert `expert` for the listed samples only,
/// shaped [samples.size(), S, D].
using ExpertEvaluator = std::function<Var(std::size_t expert, const std::vector<std::size_t>& samples)>;

/// Per-sample sum over selected experts of combine_weight * output. An expert
/// chosen by no sample is never evaluated; one chosen by some samples is
/// evaluated on exactly those samples.
Var combine_group(const LocalRouting& routing, const ExpertEvaluator& evaluate);

/// Same combination over precomputed full-batch outputs, one per expert.
Var combine_group(const LocalRouting& routing, const std::vector<Var>& expert_outputs);

// ---- recorded decisions -----------------------------------------------------

struct GroupDecision {
  Tensor probs;                                    // [B, M]
  std::vector<std::vector<std::size_t>> selected;  // per sample
  Tensor combine_weights;                          // [B, M]
};

/// Routing of one modality stream through one layer for one batch.
struct RoutingDecision {
  std::optional<std::size_t> layer;
  std::optional<Modality> modality;
  std::size_t k = 0;
  Tensor group_weights;  // [B, G]
  std::vector<GroupDecision> groups;

  std::size_t batch() const { return group_weights.empty() ? 0 : group_weights.shape()[0]; }
};

/// JSON object: layer, modality, k, group_weights, and per group the
/// probabilities, selections and per-expert selection frequency.
std::string decision_to_json(const RoutingDecision& d);

}  // namespace hmmoe
