// Copyright 2026 The HMMoE Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "hmmoe/autodiff.hpp"
#include "hmmoe/layer.hpp"

namespace hmmoe {

struct ModelConfig {
  std::size_t layers = 2;
  std::size_t dim = 32;
  std::size_t classes = 2;
  HmmoeConfig hmmoe;  // hmmoe.dim must equal dim

  void validate() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Frozen weights of one encoder block for one stream. Post-norm layout:
///   h   = LN1(x + softmax(x W_q (x W_k)^T / sqrt(D)) x W_v W_o)
///   out = LN2(h + relu(h W_ff1) W_ff2)
struct EncoderStream {
  Parameter* w_q = nullptr;
  Parameter* w_k = nullptr;
  Parameter* w_v = nullptr;
  Parameter* w_o = nullptr;
  Parameter* ln1_gain = nullptr;
  Parameter* ln1_bias = nullptr;
  Parameter* w_ff1 = nullptr;  // [D, 4D]
  Parameter* w_ff2 = nullptr;  // [4D, D]
  Parameter* ln2_gain = nullptr;
  Parameter* ln2_bias = nullptr;
};

Var encoder_forward(const Var& x, const EncoderStream& p);

/// Two-stream encoder with an HMMoE layer after every block and a linear
/// head on the concatenated mean-pooled streams. Backbone parameters are
/// registered frozen; HMMoE and head parameters are trainable.
class Model {
 public:
  static Model build(const ModelConfig& config, std::uint64_t seed);

  /// Logits [B, C]. With `bypass_adapters` the HMMoE layers are skipped,
  /// leaving the bare backbone plus head.
  Var forward(Tape& tape, const Tensor& visual, const Tensor& audio, std::vector<RoutingDecision>* decisions = nullptr,
              bool bypass_adapters = false) const;
  Tensor logits(const Tensor& visual, const Tensor& audio, bool bypass_adapters = false) const;

  const ModelConfig& config() const noexcept { return config_; }
  ParameterStore& params() noexcept { return store_; }
  const ParameterStore& params() const noexcept { return store_; }
  const std::vector<HmmoeLayer>& adapters() const noexcept { return adapters_; }
  const std::vector<EncoderStream>& visual_blocks() const noexcept { return visual_blocks_; }
  const std::vector<EncoderStream>& audio_blocks() const noexcept { return audio_blocks_; }
  const Parameter& head_weight() const noexcept { return *head_w_; }
  const Parameter& head_bias() const noexcept { return *head_b_; }

 private:
  Model() = default;

  ModelConfig config_;
  ParameterStore store_;
  std::vector<EncoderStream> visual_blocks_;
  std::vector<EncoderStream> audio_blocks_;
  std::vector<HmmoeLayer> adapters_;
  Parameter* head_w_ = nullptr;  // [2D, C]
  Parameter* head_b_ = nullptr;  // [C]
};

inline Model build_model(const ModelConfig& config, std::uint64_t seed) { return Model::build(config, seed); }

// Closed-form counts used to cross-check the enumerated ledger.
std::size_t encoder_block_parameter_count(std::size_t dim);  // one stream
std::size_t head_parameter_count(std::size_t dim, std::size_t classes);
std::size_t model_frozen_parameter_count(const ModelConfig& config);
std::size_t model_trainable_parameter_count(const ModelConfig& config);

/// FNV-1a over names, shapes and raw bytes of every frozen parameter.
std::uint64_t frozen_digest(const ParameterStore& store);

// ---- training ---------------------------------------------------------------

enum class OptimizerKind { Sgd, Adam };

std::string_view to_string(OptimizerKind k);
OptimizerKind parse_optimizer(std::string_view name);

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::Adam;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Plain gradient descent or adaptive moments over the trainable
/// parameters of a store. Frozen parameters are never read or written.
class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig config = {}) : config_(config) {}
  void step(ParameterStore& store, double lr);
  std::size_t steps() const noexcept { return t_; }

 private:
  struct Moments {
    std::vector<double> m, v;
  };
  OptimizerConfig config_;
  std::unordered_map<const Parameter*, Moments> moments_;
  std::size_t t_ = 0;
};

struct Batch {
  Tensor visual;  // [B, S_V, D]
  Tensor audio;   // [B, S_A, D]
  std::vector<int> labels;
};

/// One optimization step on cross-entropy. Returns the pre-update loss.
/// Labels outside [0, C) raise DataError; a non-finite loss raises NumericError.
double train_step(Model& model, const Batch& batch, Optimizer& optimizer, double lr);

}  // namespace hmmoe
