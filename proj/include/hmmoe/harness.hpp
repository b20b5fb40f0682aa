// Copyright 2026 The HMMoE Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "hmmoe/layer.hpp"
#include "hmmoe/model.hpp"

namespace hmmoe {

// ---- synthetic task ----------------------------------------------------------

enum class FusionRule { XorLatent, Agreement };

std::string_view to_string(FusionRule r);
FusionRule parse_fusion_rule(std::string_view name);

/// Label from the two per-modality latents. XorLatent: (z_v + z_a) mod C,
/// which is XOR for C = 2. Agreement: 1 when the latents match, else 0.
int fuse_latents(FusionRule rule, int latent_visual, int latent_audio, std::size_t classes);

struct SyntheticTaskSpec {
  std::size_t batch = 32;
  std::size_t seq_visual = 6;
  std::size_t seq_audio = 4;
  std::size_t dim = 32;
  std::size_t classes = 2;
  FusionRule rule = FusionRule::XorLatent;
  double noise_std = 0.1;
  std::uint64_t seed = 0;
  std::size_t train_size = 2048;
  std::size_t test_size = 2048;

  void validate() const;
  friend bool operator==(const SyntheticTaskSpec&, const SyntheticTaskSpec&) = default;
};

struct Dataset {
  Tensor visual;  // [N, S_V, D]
  Tensor audio;   // [N, S_A, D]
  std::vector<int> labels;
  std::vector<int> latent_visual;
  std::vector<int> latent_audio;

  std::size_t size() const noexcept { return labels.size(); }
  Batch slice(std::size_t begin, std::size_t count) const;
  Batch select(const std::vector<std::size_t>& rows) const;
};

struct TaskData {
  Dataset train;
  Dataset test;
};

/// Every token of a sample is its modality's class direction for the latent
/// plus N(0, noise_std^2) noise. Directions are fixed per (modality, class);
/// train and test draws come from separate seed streams.
TaskData generate_task(const SyntheticTaskSpec& spec);

enum class ModalityAblation { None, ZeroVisual, ZeroAudio };

std::string_view to_string(ModalityAblation a);

// Zeroes the tokens of the ablated stream in place.
void apply_ablation(Dataset& data, ModalityAblation ablation);

// ---- training ------------------------------------------------------------------

struct TrainingSpec {
  std::size_t steps = 2000;
  std::size_t eval_every = 100;
  double lr = 1e-3;
  OptimizerKind optimizer = OptimizerKind::Adam;
  std::vector<std::uint64_t> seeds{0, 1, 2};

  void validate() const;
  friend bool operator==(const TrainingSpec&, const TrainingSpec&) = default;
};

struct MetricRow {
  std::size_t step = 0;
  std::string split;
  double loss = 0.0;
  double accuracy = 0.0;

  friend bool operator==(const MetricRow&, const MetricRow&) = default;
};

std::string metrics_to_csv(const std::vector<MetricRow>& rows);

struct Evaluation {
  double loss = 0.0;
  double accuracy = 0.0;
  std::vector<RoutingDecision> decisions;
};

Evaluation evaluate(const Model& model, const Dataset& data, std::size_t chunk = 128, bool record_decisions = false);

struct RunSpec {
  ModelConfig model;
  SyntheticTaskSpec task;  // task.seed is replaced per run unless fixed_task_seed
  bool fixed_task_seed = false;
  TrainingSpec training;
  std::uint64_t seed = 0;
  ModalityAblation ablation = ModalityAblation::None;
};

struct TrainResult {
  std::uint64_t seed = 0;
  std::vector<MetricRow> metrics;
  double final_train_accuracy = 0.0;
  double final_test_accuracy = 0.0;
  double final_test_loss = 0.0;
  ParameterLedger ledger;
  UtilizationTable utilization;  // from the final test-set evaluation
  std::uint64_t frozen_digest_before = 0;
  std::uint64_t frozen_digest_after = 0;
};

/// Trains one fresh model. Model, data and batch order derive from spec.seed.
TrainResult train_run(const RunSpec& spec);

// ---- ablations ------------------------------------------------------------------

enum class AblationKind { ExpertType, Rank, ExpertCount, Heterogeneous };

std::string_view to_string(AblationKind k);
AblationKind parse_ablation_kind(std::string_view name);

struct AblationArm {
  std::string name;
  ModelConfig model;
};

std::vector<AblationArm> rank_arms(const ModelConfig& base, const std::vector<std::size_t>& ranks);
// Every group of the base config gets M experts; k is clamped to M.
std::vector<AblationArm> expert_count_arms(const ModelConfig& base, const std::vector<std::size_t>& counts);
// Each entry lists the group kinds of one arm; groups keep the base group size.
std::vector<AblationArm> expert_type_arms(const ModelConfig& base, const std::vector<std::vector<ExpertKind>>& types);

struct HeterogeneousArmSpec {
  std::string name;
  std::vector<GroupSpec> groups;
  std::optional<std::size_t> top_k;  // default: every expert active
};

// Default: "3xSingle" (one group of three single-modal experts) against
// "1+1+1" (one single, one cross, one channel expert).
std::vector<HeterogeneousArmSpec> default_heterogeneous_arms();
std::vector<AblationArm> heterogeneous_arms(const ModelConfig& base, const std::vector<HeterogeneousArmSpec>& specs);

struct ArmResult {
  std::string name;
  std::string descriptor;
  std::vector<std::uint64_t> seeds;
  std::vector<double> accuracies;
  double mean = 0.0;
  double stddev = 0.0;
  ParameterLedger ledger;
  std::vector<TrainResult> runs;  // not serialized
};

struct AblationReport {
  std::string kind;
  std::string config_echo;  // JSON text of the run configuration
  std::vector<ArmResult> arms;

  std::string to_json() const;
  static AblationReport from_json(const std::string& text);
  // Compares serialized fields only.
  bool same_content(const AblationReport& other) const;
};

/// Trains every (arm, seed) with the base training budget. Arms are
/// validated up front; a bad arm aborts the run with its name in the error.
/// Jobs run on up to `workers` threads; results do not depend on the count.
AblationReport run_ablation(AblationKind kind, const std::vector<AblationArm>& arms, const RunSpec& base,
                            std::size_t workers = 1, const std::string& config_echo = "{}");

// ---- report emission ---------------------------------------------------------------

// report.json content for one run.
std::string train_report_json(const TrainResult& result, const std::string& config_echo);

/// metrics.csv, utilization.csv, ledger.json and report.json for one run.
void emit_train_reports(const std::string& out_dir, const TrainResult& result, const std::string& config_echo);

/// report.json, ledger.json and per-arm, per-seed metrics/utilization CSVs
/// under arms/<arm>/seed<seed>/.
void emit_ablation_reports(const std::string& out_dir, const AblationReport& report);

}  // namespace hmmoe
