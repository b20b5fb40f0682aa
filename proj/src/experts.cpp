// Copyright 2026 The HMMoE Authors
// SPDX-License-Identifier: Apache-2.0

#include "hmmoe/experts.hpp"

#include <cmath>

#include "hmmoe/errors.hpp"

namespace hmmoe {

std::string_view to_string(ExpertKind kind) {
  switch (kind) {
    case ExpertKind::SingleModal: return "single";
    case ExpertKind::CrossAttention: return "cross";
    case ExpertKind::ChannelAttention: return "channel";
  }
  return "unknown";
}

ExpertKind parse_expert_kind(std::string_view name) {
  if (name == "single" || name == "SingleModal") return ExpertKind::SingleModal;
  if (name == "cross" || name == "CrossAttention") return ExpertKind::CrossAttention;
  if (name == "channel" || name == "ChannelAttention") return ExpertKind::ChannelAttention;
  throw ConfigError("unknown expert kind '" + std::string(name) + "' (expected single, cross or channel)");
}

namespace {

Tensor uniform(Shape shape, double bound, Rng& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor t(std::move(shape), 0.0);
  for (double& x : t.storage()) x = dist(rng);
  return t;
}

void check_features(const Var& x, const ExpertParams& p, const char* role) {
  const Shape& s = x.shape();
  if (s.size() != 3 || s[2] != p.dim) {
    throw DimensionError(std::string(role) + " must be [B, S, " + std::to_string(p.dim) + "], got " + shape_str(s));
  }
}

void check_pair(const Var& a, const Var& b, const ExpertParams& p) {
  check_features(a, p, "query/target features");
  check_features(b, p, "context features");
  if (a.shape()[0] != b.shape()[0]) {
    throw DimensionError("batch sizes differ between modalities: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

// relu(x W_down + b_down)
Var bottleneck(Tape& t, const Var& x, const ExpertParams& p) {
  return relu(add(matmul(x, t.param(*p.w_down)), t.param(*p.b_down)));
}

}  // namespace

std::size_t expert_parameter_count(ExpertKind kind, std::size_t dim, std::size_t rank) {
  std::size_t n = 2 * dim * rank + rank + dim;
  if (kind == ExpertKind::CrossAttention) n += 3 * rank * rank;
  return n;
}

ExpertParams init_expert(ParameterStore& store, const std::string& prefix, ExpertKind kind, std::size_t dim,
                         std::size_t rank, Rng& rng) {
  if (rank < 1 || rank >= dim) {
    throw ConfigError("expert rank must satisfy 1 <= r < D, got r=" + std::to_string(rank) +
                      " D=" + std::to_string(dim));
  }
  ExpertParams p;
  p.kind = kind;
  p.dim = dim;
  p.rank = rank;
  const double down_bound = 1.0 / std::sqrt(static_cast<double>(dim));
  p.w_down = &store.add(prefix + ".w_down", uniform({dim, rank}, down_bound, rng), false);
  p.b_down = &store.add(prefix + ".b_down", Tensor({rank}, 0.0), false);
  p.w_up = &store.add(prefix + ".w_up", Tensor({rank, dim}, 0.0), false);
  p.b_up = &store.add(prefix + ".b_up", Tensor({dim}, 0.0), false);
  if (kind == ExpertKind::CrossAttention) {
    const double attn_bound = 1.0 / std::sqrt(static_cast<double>(rank));
    p.w_q = &store.add(prefix + ".w_q", uniform({rank, rank}, attn_bound, rng), false);
    p.w_k = &store.add(prefix + ".w_k", uniform({rank, rank}, attn_bound, rng), false);
    p.w_v = &store.add(prefix + ".w_v", uniform({rank, rank}, attn_bound, rng), false);
  }
  return p;
}

Var single_modal_forward(const Var& x, const ExpertParams& p) {
  check_features(x, p, "input features");
  Tape& t = x.tape();
  Var h = bottleneck(t, x, p);
  return add(x, add(matmul(h, t.param(*p.w_up)), t.param(*p.b_up)));
}

Var cross_attention_forward(const Var& query, const Var& context, const ExpertParams& p) {
  check_pair(query, context, p);
  if (p.kind != ExpertKind::CrossAttention) throw ContractError("cross_attention_forward needs cross-attention params");
  Tape& t = query.tape();
  Var qb = bottleneck(t, query, p);    // [B, Sq, r]
  Var cb = bottleneck(t, context, p);  // [B, Sc, r]
  Var q = matmul(qb, t.param(*p.w_q));
  Var k = matmul(cb, t.param(*p.w_k));
  Var v = matmul(cb, t.param(*p.w_v));
  Var scores = scale(matmul(q, transpose_last(k)), 1.0 / std::sqrt(static_cast<double>(p.rank)));
  Var attn = softmax(scores, -1);  // [B, Sq, Sc]
  Var mixed = add(matmul(attn, v), qb);
  return add(matmul(mixed, t.param(*p.w_up)), t.param(*p.b_up));
}

Var channel_gate(const Var& target, const Var& context) {
  Var pooled_context = mean_pool(context);  // [B, 1, D]
  return sigmoid(mean_pool(mul(pooled_context, target)));
}

Var channel_attention_forward(const Var& target, const Var& context, const ExpertParams& p) {
  check_pair(target, context, p);
  Tape& t = target.tape();
  Var gate = channel_gate(target, context);
  Var low = matmul(bottleneck(t, target, p), t.param(*p.w_up));
  return add(mul(low, add_scalar(gate, 1.0)), t.param(*p.b_up));
}

Var expert_forward(const Var& self, const Var& other, const ExpertParams& p) {
  switch (p.kind) {
    case ExpertKind::SingleModal: return single_modal_forward(self, p);
    case ExpertKind::CrossAttention: return cross_attention_forward(self, other, p);
    case ExpertKind::ChannelAttention: return channel_attention_forward(self, other, p);
  }
  throw ContractError("unknown expert kind");
}

}  // namespace hmmoe
