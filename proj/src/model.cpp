// Copyright 2026 The HMMoE Authors
// SPDX-License-Identifier: Apache-2.0

#include "hmmoe/model.hpp"

#include <bit>
#include <cmath>

#include "hmmoe/errors.hpp"
#include "hmmoe/rng.hpp"

namespace hmmoe {

void ModelConfig::validate() const {
  if (layers < 1) throw ConfigError("at least one encoder layer is required", "model.layers");
  if (dim < 2) throw ConfigError("model dimension must be at least 2", "model.dim");
  if (classes < 2) throw ConfigError("at least two classes are required", "model.classes");
  if (hmmoe.dim != dim) {
    throw ConfigError("HMMoE width " + std::to_string(hmmoe.dim) + " differs from model width " + std::to_string(dim),
                      "hmmoe.dim");
  }
  hmmoe.validate();
}

namespace {

Tensor uniform(Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor t(std::move(shape), 0.0);
  for (double& x : t.storage()) x = dist(rng);
  return t;
}

EncoderStream init_encoder(ParameterStore& s, const std::string& prefix, std::size_t d, Rng& rng) {
  EncoderStream e;
  e.w_q = &s.add(prefix + ".attn.w_q", uniform({d, d}, d, rng), true);
  e.w_k = &s.add(prefix + ".attn.w_k", uniform({d, d}, d, rng), true);
  e.w_v = &s.add(prefix + ".attn.w_v", uniform({d, d}, d, rng), true);
  e.w_o = &s.add(prefix + ".attn.w_o", uniform({d, d}, d, rng), true);
  e.ln1_gain = &s.add(prefix + ".ln1.gain", Tensor({d}, 1.0), true);
  e.ln1_bias = &s.add(prefix + ".ln1.bias", Tensor({d}, 0.0), true);
  e.w_ff1 = &s.add(prefix + ".ffn.w1", uniform({d, 4 * d}, d, rng), true);
  e.w_ff2 = &s.add(prefix + ".ffn.w2", uniform({4 * d, d}, 4 * d, rng), true);
  e.ln2_gain = &s.add(prefix + ".ln2.gain", Tensor({d}, 1.0), true);
  e.ln2_bias = &s.add(prefix + ".ln2.bias", Tensor({d}, 0.0), true);
  return e;
}

void check_tokens(const Tensor& t, std::size_t dim, const char* what) {
  if (t.rank() != 3 || t.shape()[2] != dim) {
    throw DimensionError(std::string(what) + " tokens must be [B, S, " + std::to_string(dim) + "], got " +
                         shape_str(t.shape()));
  }
}

}  // namespace

Var encoder_forward(const Var& x, const EncoderStream& p) {
  Tape& t = x.tape();
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(x.shape().back()));
  Var q = matmul(x, t.param(*p.w_q));
  Var k = matmul(x, t.param(*p.w_k));
  Var v = matmul(x, t.param(*p.w_v));
  Var attn = softmax(scale(matmul(q, transpose_last(k)), inv_sqrt_d), -1);
  Var mixed = matmul(matmul(attn, v), t.param(*p.w_o));
  Var h = layer_norm(add(x, mixed), t.param(*p.ln1_gain), t.param(*p.ln1_bias));
  Var ff = matmul(relu(matmul(h, t.param(*p.w_ff1))), t.param(*p.w_ff2));
  return layer_norm(add(h, ff), t.param(*p.ln2_gain), t.param(*p.ln2_bias));
}

Model Model::build(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Model m;
  m.config_ = config;
  const std::size_t d = config.dim;
  Rng backbone_rng = make_rng(seed, "backbone");
  for (std::size_t l = 0; l < config.layers; ++l) {
    const std::string p = "backbone.l" + std::to_string(l);
    m.visual_blocks_.push_back(init_encoder(m.store_, p + ".visual", d, backbone_rng));
    m.audio_blocks_.push_back(init_encoder(m.store_, p + ".audio", d, backbone_rng));
  }
  for (std::size_t l = 0; l < config.layers; ++l) {
    Rng rng = make_rng(seed, "hmmoe", l);
    m.adapters_.emplace_back(m.store_, "hmmoe.l" + std::to_string(l), config.hmmoe, rng);
  }
  Rng head_rng = make_rng(seed, "head");
  m.head_w_ = &m.store_.add("head.w", uniform({2 * d, config.classes}, 2 * d, head_rng), false);
  m.head_b_ = &m.store_.add("head.b", Tensor({config.classes}, 0.0), false);
  return m;
}

Var Model::forward(Tape& tape, const Tensor& visual, const Tensor& audio, std::vector<RoutingDecision>* decisions,
                   bool bypass_adapters) const {
  check_tokens(visual, config_.dim, "visual");
  check_tokens(audio, config_.dim, "audio");
  if (visual.shape()[0] != audio.shape()[0]) {
    throw DimensionError("batch sizes differ: visual " + shape_str(visual.shape()) + " vs audio " +
                         shape_str(audio.shape()));
  }
  const std::size_t batch = visual.shape()[0];
  ModalPair s{tape.constant(visual), tape.constant(audio)};
  for (std::size_t l = 0; l < config_.layers; ++l) {
    s.visual = encoder_forward(s.visual, visual_blocks_[l]);
    s.audio = encoder_forward(s.audio, audio_blocks_[l]);
    if (!bypass_adapters) s = adapters_[l].forward(s, decisions, l);
  }
  Var pooled = concat(reshape(mean_pool(s.visual), {batch, config_.dim}),
                      reshape(mean_pool(s.audio), {batch, config_.dim}), 1);
  return add(matmul(pooled, tape.param(*head_w_)), tape.param(*head_b_));
}

Tensor Model::logits(const Tensor& visual, const Tensor& audio, bool bypass_adapters) const {
  Tape tape;
  return forward(tape, visual, audio, nullptr, bypass_adapters).value();
}

std::size_t encoder_block_parameter_count(std::size_t dim) { return 12 * dim * dim + 4 * dim; }

std::size_t head_parameter_count(std::size_t dim, std::size_t classes) { return 2 * dim * classes + classes; }

std::size_t model_frozen_parameter_count(const ModelConfig& c) {
  return 2 * c.layers * encoder_block_parameter_count(c.dim);
}

std::size_t model_trainable_parameter_count(const ModelConfig& c) {
  return c.layers * hmmoe_layer_parameter_count(c.hmmoe) + head_parameter_count(c.dim, c.classes);
}

std::uint64_t frozen_digest(const ParameterStore& store) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&](const void* data, std::size_t len) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
      h ^= p[i];
      h *= 0x100000001b3ULL;
    }
  };
  store.for_each([&](const Parameter& p) {
    if (!p.frozen) return;
    mix(p.name.data(), p.name.size());
    for (std::size_t d : p.value.shape()) mix(&d, sizeof(d));
    mix(p.value.data().data(), p.value.numel() * sizeof(double));
  });
  return h;
}

// ---- training -------------------------------------------------------------------

std::string_view to_string(OptimizerKind k) { return k == OptimizerKind::Adam ? "adam" : "sgd"; }

OptimizerKind parse_optimizer(std::string_view name) {
  if (name == "adam") return OptimizerKind::Adam;
  if (name == "sgd") return OptimizerKind::Sgd;
  throw ConfigError("unknown optimizer '" + std::string(name) + "' (expected adam or sgd)", "training.optimizer");
}

void Optimizer::step(ParameterStore& store, double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  store.for_each([&](Parameter& p) {
    if (p.frozen) return;
    const std::size_t n = p.value.numel();
    if (config_.kind == OptimizerKind::Sgd) {
      for (std::size_t i = 0; i < n; ++i) p.value[i] -= lr * p.grad[i];
      return;
    }
    Moments& mo = moments_[&p];
    if (mo.m.empty()) {
      mo.m.assign(n, 0.0);
      mo.v.assign(n, 0.0);
    }
    for (std::size_t i = 0; i < n; ++i) {
      const double g = p.grad[i];
      mo.m[i] = config_.beta1 * mo.m[i] + (1.0 - config_.beta1) * g;
      mo.v[i] = config_.beta2 * mo.v[i] + (1.0 - config_.beta2) * g * g;
      const double mhat = mo.m[i] / bc1;
      const double vhat = mo.v[i] / bc2;
      p.value[i] -= lr * mhat / (std::sqrt(vhat) + config_.eps);
    }
  });
}

double train_step(Model& model, const Batch& batch, Optimizer& optimizer, double lr) {
  const std::size_t classes = model.config().classes;
  for (int y : batch.labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= classes) {
      throw DataError("label " + std::to_string(y) + " outside [0, " + std::to_string(classes) + ")");
    }
  }
  model.params().zero_grad();
  double loss_value = 0.0;
  {
    Tape tape;
    Var logits = model.forward(tape, batch.visual, batch.audio);
    Var loss = cross_entropy(logits, batch.labels);
    loss_value = loss.value()[0];
    if (!std::isfinite(loss_value)) throw NumericError("training loss became non-finite");
    tape.backward(loss);
  }
  optimizer.step(model.params(), lr);
  return loss_value;
}

}  // namespace hmmoe
