// Copyright 2026 The HMMoE Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <string>
#include <string_view>

#include "hmmoe/autodiff.hpp"
#include "hmmoe/rng.hpp"

namespace hmmoe {

enum class ExpertKind { SingleModal, CrossAttention, ChannelAttention };

std::string_view to_string(ExpertKind kind);
// Accepts "single", "cross", "channel" (and the enum spellings).
ExpertKind parse_expert_kind(std::string_view name);

// Unary experts see only their own stream; binary experts also read the other one.
constexpr bool is_multimodal(ExpertKind kind) { return kind != ExpertKind::SingleModal; }

/// Trainable tensors of one expert, owned by a ParameterStore.
///   w_down [D, r], b_down [r], w_up [r, D], b_up [D]
///   w_q, w_k, w_v [r, r]   (cross-attention only, bias-free)
struct ExpertParams {
  ExpertKind kind = ExpertKind::SingleModal;
  std::size_t dim = 0;
  std::size_t rank = 0;
  Parameter* w_down = nullptr;
  Parameter* b_down = nullptr;
  Parameter* w_up = nullptr;
  Parameter* b_up = nullptr;
  Parameter* w_q = nullptr;
  Parameter* w_k = nullptr;
  Parameter* w_v = nullptr;
};

/// Registers a fresh expert under `prefix` in `store`. Projections into the
/// bottleneck and the attention maps are uniform in ±1/sqrt(fan_in); w_up and
/// every bias start at zero, so a new expert is output-neutral.
ExpertParams init_expert(ParameterStore& store, const std::string& prefix, ExpertKind kind, std::size_t dim,
                         std::size_t rank, Rng& rng);

/// Closed-form trainable parameter count of one expert.
std::size_t expert_parameter_count(ExpertKind kind, std::size_t dim, std::size_t rank);

// x + relu(x W_down + b_down) W_up + b_up
Var single_modal_forward(const Var& x, const ExpertParams& p);

// Query-side bottleneck attends over the context bottleneck:
//   qb = relu(query W_down + b_down), cb = relu(context W_down + b_down)
//   attn = softmax(qb W_q (cb W_k)^T / sqrt(r)) over context positions
//   out  = (attn cb W_v + qb) W_up + b_up
Var cross_attention_forward(const Var& query, const Var& context, const ExpertParams& p);

// gate = sigmoid(mean_S(mean_S(context) * target))           [B, 1, D]
// out  = relu(target W_down + b_down) W_up * (1 + gate) + b_up
Var channel_attention_forward(const Var& target, const Var& context, const ExpertParams& p);

// Channel gate alone, exposed for inspection and tests.
Var channel_gate(const Var& target, const Var& context);

/// Dispatches on p.kind. `other` is ignored by single-modal experts.
Var expert_forward(const Var& self, const Var& other, const ExpertParams& p);

}  // namespace hmmoe
