// Copyright 2026 The HMMoE Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "hmmoe/harness.hpp"

namespace hmmoe {

struct AblationGrids {
  std::vector<std::size_t> rank{2, 4, 8, 16, 32};
  std::vector<std::size_t> expert_count{1, 2, 3, 4};
  std::vector<std::vector<ExpertKind>> expert_type{
      {ExpertKind::SingleModal},
      {ExpertKind::CrossAttention},
      {ExpertKind::ChannelAttention},
      {ExpertKind::SingleModal, ExpertKind::CrossAttention, ExpertKind::ChannelAttention},
  };
  std::vector<HeterogeneousArmSpec> heterogeneous = default_heterogeneous_arms();
};

/// Fully resolved run configuration. Every section is validated on parse,
/// so a RunConfig in hand is always runnable.
struct RunConfig {
  ModelConfig model;
  SyntheticTaskSpec task;
  std::optional<std::uint64_t> task_seed;  // fixed task draw across seeds when set
  ModalityAblation modality_ablation = ModalityAblation::None;
  TrainingSpec training;
  AblationGrids ablation;
  std::string output_dir;  // may be empty; the caller then supplies one

  // Canonical JSON of the resolved configuration, defaults included.
  std::string to_json() const;
  // Seed override: a single run uses `seed`; an ablation uses seed, seed+1, ...
  void override_seed(std::uint64_t seed);
  RunSpec run_spec(std::uint64_t seed) const;
  std::vector<AblationArm> arms(AblationKind kind) const;
};

/// Throws ConfigError whose field() is the dotted path of the offending key.
/// Required keys: model.layers, model.dim, model.classes, hmmoe.r, hmmoe.k.
/// Unknown keys are rejected.
RunConfig parse_run_config(const std::string& json_text);
RunConfig load_run_config(const std::string& path);

}  // namespace hmmoe
