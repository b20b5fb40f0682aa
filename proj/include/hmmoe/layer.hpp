// Copyright 2026 The HMMoE Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hmmoe/autodiff.hpp"
#include "hmmoe/experts.hpp"
#include "hmmoe/routing.hpp"

namespace hmmoe {

struct GroupSpec {
  ExpertKind kind = ExpertKind::SingleModal;
  std::size_t experts = 1;

  friend bool operator==(const GroupSpec&, const GroupSpec&) = default;
};

/// Shape of one HMMoE layer: model width, bottleneck rank, ordered expert
/// groups and the per-group top-k.
struct HmmoeConfig {
  std::size_t dim = 0;
  std::size_t rank = 0;
  std::size_t top_k = 1;
  std::vector<GroupSpec> groups;
  bool share_across_modalities = false;

  // Throws ConfigError naming the offending field.
  void validate() const;
  // Compact label such as "single:2+cross:2+channel:2/r8/k1".
  std::string describe() const;

  friend bool operator==(const HmmoeConfig&, const HmmoeConfig&) = default;
};

/// Default heterogeneous layout: single, cross and channel groups with
/// `experts` experts each.
HmmoeConfig default_hmmoe_config(std::size_t dim, std::size_t rank, std::size_t experts, std::size_t top_k);

struct ModalPair {
  Var visual;
  Var audio;
};

/// Routers and experts of one modality stream.
struct StreamParams {
  GlobalRouterParams global;
  std::vector<LocalRouterParams> local;           // one per group
  std::vector<std::vector<ExpertParams>> experts;  // [group][expert]
};

/// Heterogeneous mixture-of-experts adapter for a visual/audio pair. Each
/// stream output is sum_g G_g * sum_{j in topk_g} P_gj * E_gj(self, other),
/// with multimodal experts taking the stream itself as query/target.
class HmmoeLayer {
 public:
  HmmoeLayer(ParameterStore& store, const std::string& prefix, HmmoeConfig config, Rng& rng);

  ModalPair forward(const ModalPair& in, std::vector<RoutingDecision>* decisions = nullptr,
                    std::optional<std::size_t> layer_index = std::nullopt) const;

  const HmmoeConfig& config() const noexcept { return config_; }
  const StreamParams& stream(Modality m) const;

 private:
  Var forward_stream(const Var& self, const Var& other, const StreamParams& sp, RoutingDecision* decision) const;

  HmmoeConfig config_;
  std::array<StreamParams, 2> streams_;
};

/// Closed-form trainable count of one layer (both modalities).
std::size_t hmmoe_layer_parameter_count(const HmmoeConfig& config);

// ---- parameter ledger ------------------------------------------------------

struct ComponentCount {
  std::string component;
  std::size_t trainable = 0;
  std::size_t frozen = 0;
};

struct ParameterLedger {
  std::size_t trainable = 0;
  std::size_t frozen = 0;
  std::vector<ComponentCount> components;  // in first-registration order

  std::size_t total() const noexcept { return trainable + frozen; }
  // trainable / (trainable + frozen); 0 for an empty store
  double fraction() const noexcept;
  std::string to_json() const;
};

/// Exact counts by enumerating the registry. A parameter's component is its
/// first name segment, extended by the second when that is a layer tag
/// ("hmmoe.l0", "backbone.l1", "head").
ParameterLedger count_parameters(const ParameterStore& store);

// ---- expert utilization ----------------------------------------------------

struct UtilizationRow {
  std::size_t layer = 0;
  Modality modality = Modality::Visual;
  std::size_t group = 0;
  std::size_t expert = 0;
  double frequency = 0.0;
};

struct UtilizationTable {
  std::vector<UtilizationRow> rows;  // sorted by (layer, modality, group, expert)

  // Columns: layer, modality, group, expert_index, frequency
  std::string to_csv() const;
};

/// Selection frequency of each expert over all samples of the tagged
/// decisions. Per (layer, modality, group) the frequencies sum to k.
UtilizationTable utilization_stats(std::span<const RoutingDecision> decisions);

}  // namespace hmmoe
