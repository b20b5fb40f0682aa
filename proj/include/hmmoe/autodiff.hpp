// Copyright 2026 The HMMoE Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "hmmoe/tensor.hpp"

namespace hmmoe {

/// A named tensor owned by a ParameterStore. Frozen parameters never
/// receive gradient and are never touched by an optimizer.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  bool frozen = false;
};

/// Insertion-ordered registry of parameters. Parameter addresses are stable
/// for the lifetime of the store.
class ParameterStore {
 public:
  ParameterStore() = default;
  ParameterStore(const ParameterStore&) = delete;
  ParameterStore& operator=(const ParameterStore&) = delete;
  ParameterStore(ParameterStore&&) noexcept = default;
  ParameterStore& operator=(ParameterStore&&) noexcept = default;

  Parameter& add(std::string name, Tensor value, bool frozen = false);
  Parameter& get(const std::string& name);
  const Parameter& get(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::size_t size() const noexcept { return params_.size(); }
  Parameter& operator[](std::size_t i) { return *params_[i]; }
  const Parameter& operator[](std::size_t i) const { return *params_[i]; }

  void zero_grad();

  template <typename F>
  void for_each(F&& f) {
    for (auto& p : params_) f(*p);
  }
  template <typename F>
  void for_each(F&& f) const {
    for (const auto& p : params_) f(static_cast<const Parameter&>(*p));
  }

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t dim(int axis) const { return value().dim(axis); }
  std::size_t id() const noexcept { return id_; }
  Tape& tape() const { return *tape_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Reverse-mode tape. Nodes are appended in evaluation order, so ids are a
/// topological order and backward is a single reverse sweep.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  // One leaf per parameter per tape, however many times it is requested.
  Var param(Parameter& p);

  Var record(Tensor value, bool requires_grad, BackwardFn backward);

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  bool requires_grad(const Var& v) const { return nodes_[v.id()].requires_grad; }

  // Gradient accumulator of a node, zero-allocated on first use.
  Tensor& grad(std::size_t id);
  const Tensor* grad_if_any(std::size_t id) const;

  /// Seeds d(loss)/d(loss) = 1 and accumulates into Parameter::grad of every
  /// trainable parameter leaf reached. Loss must be a single-element tensor.
  void backward(const Var& loss);

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    BackwardFn backward;
    Parameter* param = nullptr;
  };

  std::vector<Node> nodes_;
  std::unordered_map<const Parameter*, std::size_t> param_leaf_;
};

// ---- differentiable operations ------------------------------------------

/// Batched matrix product over the last two axes. Leading axes broadcast by
/// size-1 stretching after right alignment.
Var matmul(const Var& a, const Var& b);
Var transpose_last(const Var& a);

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double factor);
Var add_scalar(const Var& a, double value);
Var relu(const Var& a);
Var sigmoid(const Var& a);

Var softmax(const Var& a, int axis);
// Mean over one axis, kept as a size-1 axis.
Var mean(const Var& a, int axis);
// Mean over the sequence axis of a [B, S, D] tensor; throws EmptySequenceError on S == 0.
Var mean_pool(const Var& a);
Var sum_all(const Var& a);

Var reshape(const Var& a, Shape shape);
Var concat(const Var& a, const Var& b, int axis);
// Select entries along an axis, in the given order.
Var gather(const Var& a, int axis, const std::vector<std::size_t>& indices);
// Inverse of gather: places slices at `indices` of a zero tensor whose `axis` has length `size`.
Var scatter(const Var& a, int axis, const std::vector<std::size_t>& indices, std::size_t size);

Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5);
/// Mean softmax cross-entropy of [B, C] logits against integer labels.
Var cross_entropy(const Var& logits, std::span<const int> labels);

// Broadcast result shape of two shapes under size-1 stretching.
Shape broadcast_shape(const Shape& a, const Shape& b);

// ---- plain-tensor helpers (no tape) ---------------------------------------

Tensor softmax_values(const Tensor& x, int axis);

// ---- verification -----------------------------------------------------------

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::string worst_parameter;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t entries_checked = 0;
};

/// |a - n| / max(|a|, |n|, 1e-8)
double relative_error(double analytic, double numeric);

using LossFn = std::function<Var(Tape&)>;

/// Compares the tape gradient of every trainable scalar entry in `store`
/// against the central difference (f(θ+h) - f(θ-h)) / 2h. The loss is
/// evaluated twice up front; any bitwise mismatch raises DeterminismError.
GradCheckReport finite_difference_check(const LossFn& loss, ParameterStore& store, double step = 1e-5);

}  // namespace hmmoe
