// Copyright 2026 The HMMoE Authors
// SPDX-License-Identifier: Apache-2.0

#include "hmmoe/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

#include "hmmoe/errors.hpp"

namespace hmmoe {

// ---- ParameterStore ---------------------------------------------------------

Parameter& ParameterStore::add(std::string name, Tensor value, bool frozen) {
  if (index_.count(name)) throw ContractError("parameter '" + name + "' registered twice");
  auto p = std::make_unique<Parameter>();
  p->name = name;
  p->grad = Tensor(value.shape(), 0.0);
  p->value = std::move(value);
  p->frozen = frozen;
  index_.emplace(std::move(name), params_.size());
  params_.push_back(std::move(p));
  return *params_.back();
}

Parameter& ParameterStore::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ContractError("unknown parameter '" + name + "'");
  return *params_[it->second];
}

const Parameter& ParameterStore::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ContractError("unknown parameter '" + name + "'");
  return *params_[it->second];
}

void ParameterStore::zero_grad() {
  for (auto& p : params_) p->grad.fill(0.0);
}

// ---- Tape ---------------------------------------------------------------------

const Tensor& Var::value() const { return tape_->value(id_); }

Var Tape::constant(Tensor value) { return record(std::move(value), false, nullptr); }

Var Tape::param(Parameter& p) {
  auto it = param_leaf_.find(&p);
  if (it != param_leaf_.end()) return Var(this, it->second);
  Var v = record(p.value, !p.frozen, nullptr);
  nodes_[v.id()].param = &p;
  param_leaf_.emplace(&p, v.id());
  return v;
}

Var Tape::record(Tensor value, bool requires_grad, BackwardFn backward) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  if (requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Tensor& Tape::grad(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) n.grad = Tensor(n.value.shape(), 0.0);
  return n.grad;
}

const Tensor* Tape::grad_if_any(std::size_t id) const {
  const Node& n = nodes_[id];
  return n.grad.empty() ? nullptr : &n.grad;
}

void Tape::backward(const Var& loss) {
  if (&loss.tape() != this) throw ContractError("loss was recorded on a different tape");
  if (loss.value().numel() != 1) {
    throw ContractError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
  }
  if (!nodes_[loss.id()].requires_grad) return;
  grad(loss.id()).fill(1.0);
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || n.grad.empty()) continue;
    if (n.backward) n.backward(*this, n.grad);
    if (n.param != nullptr && !n.param->frozen) {
      Tensor& pg = n.param->grad;
      if (pg.shape() != n.value.shape()) pg = Tensor(n.value.shape(), 0.0);
      for (std::size_t j = 0; j < pg.numel(); ++j) pg[j] += n.grad[j];
    }
  }
}

// ---- broadcasting -----------------------------------------------------------

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw DimensionError("shapes " + shape_str(a) + " and " + shape_str(b) + " are not broadcastable");
    }
    out[i] = std::max(da, db);
  }
  return out;
}

namespace {

// Per-output-axis strides of an operand; stretched axes get stride 0.
std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
  std::vector<std::size_t> strides(out.size(), 0);
  const std::size_t offset = out.size() - in.size();
  std::size_t stride = 1;
  for (std::size_t i = in.size(); i-- > 0;) {
    strides[i + offset] = in[i] == 1 ? 0 : stride;
    stride *= in[i];
  }
  return strides;
}

// Calls f(out_index, a_index, b_index) for every output element.
template <typename F>
void for_each_broadcast(const Shape& out, const Shape& sa, const Shape& sb, F&& f) {
  const std::size_t n = shape_numel(out);
  if (sa == out && sb == out) {
    for (std::size_t i = 0; i < n; ++i) f(i, i, i);
    return;
  }
  // Common layouts: one operand equals the output and the other repeats
  // along the leading axes (bias) or is constant over the trailing axes (gate).
  if (sa == out || sb == out) {
    const Shape& small = sa == out ? sb : sa;
    const bool a_full = sa == out;
    const std::size_t pad = out.size() - small.size();
    std::size_t lead = 0;  // leading axes of `small` that are 1 or missing
    while (lead < out.size() && (lead < pad || small[lead - pad] == 1)) ++lead;
    bool suffix = true;
    for (std::size_t ax = lead; ax < out.size(); ++ax) suffix = suffix && small[ax - pad] == out[ax];
    if (suffix) {
      const std::size_t m = shape_numel(small);
      for (std::size_t i = 0; i < n; ++i) a_full ? f(i, i, i % m) : f(i, i % m, i);
      return;
    }
    std::size_t trail = out.size();  // trailing axes of `small` that are 1
    while (trail > pad && small[trail - 1 - pad] == 1) --trail;
    bool prefix = true;
    for (std::size_t ax = 0; ax < trail && prefix; ++ax) prefix = ax >= pad && small[ax - pad] == out[ax];
    if (prefix) {
      std::size_t inner = 1;
      for (std::size_t ax = trail; ax < out.size(); ++ax) inner *= out[ax];
      for (std::size_t i = 0; i < n; ++i) a_full ? f(i, i, i / inner) : f(i, i / inner, i);
      return;
    }
  }
  const auto stra = broadcast_strides(sa, out);
  const auto strb = broadcast_strides(sb, out);
  const std::size_t r = out.size();
  std::vector<std::size_t> idx(r, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t i = 0; i < n; ++i) {
    f(i, ia, ib);
    for (std::size_t ax = r; ax-- > 0;) {
      if (++idx[ax] < out[ax]) {
        ia += stra[ax];
        ib += strb[ax];
        break;
      }
      ia -= stra[ax] * (out[ax] - 1);
      ib -= strb[ax] * (out[ax] - 1);
      idx[ax] = 0;
    }
  }
}

bool needs_grad(const Var& a) { return a.tape().requires_grad(a); }

void same_tape(const Var& a, const Var& b) {
  if (&a.tape() != &b.tape()) throw ContractError("operands recorded on different tapes");
}

struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit sp;
  for (std::size_t i = 0; i < axis; ++i) sp.outer *= s[i];
  sp.len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) sp.inner *= s[i];
  return sp;
}

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

}  // namespace

// ---- matmul -------------------------------------------------------------------

Var matmul(const Var& a, const Var& b) {
  same_tape(a, b);
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() < 2 || sb.size() < 2) {
    throw DimensionError("matmul needs rank >= 2 operands, got " + shape_str(sa) + " and " + shape_str(sb));
  }
  const std::size_t m = sa[sa.size() - 2], n = sa.back();
  const std::size_t n2 = sb[sb.size() - 2], p = sb.back();
  if (n != n2) throw DimensionError("matmul inner dimensions differ: " + shape_str(sa) + " x " + shape_str(sb));

  const Shape batch_a(sa.begin(), sa.end() - 2);
  const Shape batch_b(sb.begin(), sb.end() - 2);
  Shape batch_out;
  try {
    batch_out = broadcast_shape(batch_a, batch_b);
  } catch (const DimensionError&) {
    throw DimensionError("matmul batch dimensions not broadcastable: " + shape_str(sa) + " x " + shape_str(sb));
  }
  Shape out_shape = batch_out;
  out_shape.push_back(m);
  out_shape.push_back(p);
  Tensor out(out_shape, 0.0);

  const std::size_t batches = shape_numel(batch_out);
  // Offsets (in matrices) of each batch entry into a and b.
  std::vector<std::size_t> off_a(batches), off_b(batches);
  const bool folded = batch_b.empty() || shape_numel(batch_b) == 1;
  if (folded) {
    // b is a single matrix: fold every leading axis of a into the row count.
    const std::size_t rows = shape_numel(sa) / n;
    ConstMap A(a.value().data().data(), rows, n);
    ConstMap B(b.value().data().data(), n, p);
    MutMap C(out.data().data(), rows, p);
    C.noalias() = A * B;
  } else {
    for_each_broadcast(batch_out.empty() ? Shape{1} : batch_out, batch_a.empty() ? Shape{1} : batch_a,
                       batch_b, [&](std::size_t i, std::size_t ia, std::size_t ib) {
                         off_a[i] = ia;
                         off_b[i] = ib;
                       });
    for (std::size_t i = 0; i < batches; ++i) {
      ConstMap A(a.value().data().data() + off_a[i] * m * n, m, n);
      ConstMap B(b.value().data().data() + off_b[i] * n * p, n, p);
      MutMap C(out.data().data() + i * m * p, m, p);
      C.noalias() = A * B;
    }
  }

  Tape& t = a.tape();
  const std::size_t ida = a.id(), idb = b.id();
  const bool ga = needs_grad(a), gb = needs_grad(b);
  return t.record(std::move(out), ga || gb,
                  [=](Tape& tp, const Tensor& g) {
                    const Tensor& av = tp.value(ida);
                    const Tensor& bv = tp.value(idb);
                    if (folded) {
                      const std::size_t rows = av.numel() / n;
                      ConstMap G(g.data().data(), rows, p);
                      if (ga) {
                        MutMap GA(tp.grad(ida).data().data(), rows, n);
                        GA.noalias() += G * ConstMap(bv.data().data(), n, p).transpose();
                      }
                      if (gb) {
                        MutMap GB(tp.grad(idb).data().data(), n, p);
                        GB.noalias() += ConstMap(av.data().data(), rows, n).transpose() * G;
                      }
                      return;
                    }
                    for (std::size_t i = 0; i < batches; ++i) {
                      ConstMap G(g.data().data() + i * m * p, m, p);
                      if (ga) {
                        MutMap GA(tp.grad(ida).data().data() + off_a[i] * m * n, m, n);
                        GA.noalias() += G * ConstMap(bv.data().data() + off_b[i] * n * p, n, p).transpose();
                      }
                      if (gb) {
                        MutMap GB(tp.grad(idb).data().data() + off_b[i] * n * p, n, p);
                        GB.noalias() += ConstMap(av.data().data() + off_a[i] * m * n, m, n).transpose() * G;
                      }
                    }
                  });
}

Var transpose_last(const Var& a) {
  const Shape& s = a.shape();
  if (s.size() < 2) throw DimensionError("transpose needs rank >= 2, got " + shape_str(s));
  const std::size_t m = s[s.size() - 2], n = s.back();
  const std::size_t batches = a.value().numel() / (m * n);
  Shape os = s;
  std::swap(os[os.size() - 2], os[os.size() - 1]);
  Tensor out(os, 0.0);
  const auto& in = a.value();
  for (std::size_t b = 0; b < batches; ++b)
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) out[b * m * n + j * m + i] = in[b * m * n + i * n + j];
  const std::size_t ida = a.id();
  return a.tape().record(std::move(out), needs_grad(a), [=](Tape& tp, const Tensor& g) {
    Tensor& ga = tp.grad(ida);
    for (std::size_t b = 0; b < batches; ++b)
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) ga[b * m * n + i * n + j] += g[b * m * n + j * m + i];
  });
}

// ---- elementwise ----------------------------------------------------------------

namespace {

enum class Binary { Add, Sub, Mul };

Var binary(const Var& a, const Var& b, Binary op) {
  same_tape(a, b);
  const Shape out_shape = broadcast_shape(a.shape(), b.shape());
  Tensor out(out_shape, 0.0);
  const auto& av = a.value();
  const auto& bv = b.value();
  for_each_broadcast(out_shape, av.shape(), bv.shape(), [&](std::size_t i, std::size_t ia, std::size_t ib) {
    switch (op) {
      case Binary::Add: out[i] = av[ia] + bv[ib]; break;
      case Binary::Sub: out[i] = av[ia] - bv[ib]; break;
      case Binary::Mul: out[i] = av[ia] * bv[ib]; break;
    }
  });
  const std::size_t ida = a.id(), idb = b.id();
  const bool ga = needs_grad(a), gb = needs_grad(b);
  return a.tape().record(std::move(out), ga || gb, [=](Tape& tp, const Tensor& g) {
    const Tensor& av = tp.value(ida);
    const Tensor& bv = tp.value(idb);
    Tensor* gA = ga ? &tp.grad(ida) : nullptr;
    Tensor* gB = gb ? &tp.grad(idb) : nullptr;
    for_each_broadcast(out_shape, av.shape(), bv.shape(), [&](std::size_t i, std::size_t ia, std::size_t ib) {
      switch (op) {
        case Binary::Add:
          if (gA) (*gA)[ia] += g[i];
          if (gB) (*gB)[ib] += g[i];
          break;
        case Binary::Sub:
          if (gA) (*gA)[ia] += g[i];
          if (gB) (*gB)[ib] -= g[i];
          break;
        case Binary::Mul:
          if (gA) (*gA)[ia] += g[i] * bv[ib];
          if (gB) (*gB)[ib] += g[i] * av[ia];
          break;
      }
    });
  });
}

}  // namespace

Var add(const Var& a, const Var& b) { return binary(a, b, Binary::Add); }
Var sub(const Var& a, const Var& b) { return binary(a, b, Binary::Sub); }
Var mul(const Var& a, const Var& b) { return binary(a, b, Binary::Mul); }

Var scale(const Var& a, double factor) {
  Tensor out = a.value();
  for (double& x : out.storage()) x *= factor;
  const std::size_t ida = a.id();
  return a.tape().record(std::move(out), needs_grad(a), [=](Tape& tp, const Tensor& g) {
    Tensor& ga = tp.grad(ida);
    for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += factor * g[i];
  });
}

Var add_scalar(const Var& a, double value) {
  Tensor out = a.value();
  for (double& x : out.storage()) x += value;
  const std::size_t ida = a.id();
  return a.tape().record(std::move(out), needs_grad(a), [=](Tape& tp, const Tensor& g) {
    Tensor& ga = tp.grad(ida);
    for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
  });
}

Var relu(const Var& a) {
  Tensor out = a.value();
  for (double& x : out.storage()) x = x > 0.0 ? x : 0.0;
  const std::size_t ida = a.id();
  return a.tape().record(std::move(out), needs_grad(a), [=](Tape& tp, const Tensor& g) {
    const Tensor& in = tp.value(ida);
    Tensor& ga = tp.grad(ida);
    for (std::size_t i = 0; i < g.numel(); ++i)
      if (in[i] > 0.0) ga[i] += g[i];
  });
}

Var sigmoid(const Var& a) {
  Tensor out = a.value();
  for (double& x : out.storage()) {
    x = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
  }
  Tape& t = a.tape();
  const std::size_t ida = a.id();
  const std::size_t self = t.size();
  return t.record(std::move(out), needs_grad(a), [=](Tape& tp, const Tensor& g) {
    const Tensor& y = tp.value(self);
    Tensor& ga = tp.grad(ida);
    for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * y[i] * (1.0 - y[i]);
  });
}

// ---- reductions -----------------------------------------------------------------

Tensor softmax_values(const Tensor& x, int axis) {
  const std::size_t ax = x.normalize_axis(axis);
  const AxisSplit sp = split_at(x.shape(), ax);
  Tensor out(x.shape(), 0.0);
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t in = 0; in < sp.inner; ++in) {
      const std::size_t base = o * sp.len * sp.inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < sp.len; ++k) mx = std::max(mx, x[base + k * sp.inner]);
      double sum = 0.0;
      for (std::size_t k = 0; k < sp.len; ++k) {
        const double e = std::exp(x[base + k * sp.inner] - mx);
        out[base + k * sp.inner] = e;
        sum += e;
      }
      for (std::size_t k = 0; k < sp.len; ++k) out[base + k * sp.inner] /= sum;
    }
  }
  return out;
}

Var softmax(const Var& a, int axis) {
  const std::size_t ax = a.value().normalize_axis(axis);
  Tensor out = softmax_values(a.value(), static_cast<int>(ax));
  const AxisSplit sp = split_at(a.shape(), ax);
  Tape& t = a.tape();
  const std::size_t ida = a.id();
  const std::size_t self = t.size();
  return t.record(std::move(out), needs_grad(a), [=](Tape& tp, const Tensor& g) {
    const Tensor& y = tp.value(self);
    Tensor& ga = tp.grad(ida);
    for (std::size_t o = 0; o < sp.outer; ++o) {
      for (std::size_t in = 0; in < sp.inner; ++in) {
        const std::size_t base = o * sp.len * sp.inner + in;
        double dot = 0.0;
        for (std::size_t k = 0; k < sp.len; ++k) dot += g[base + k * sp.inner] * y[base + k * sp.inner];
        for (std::size_t k = 0; k < sp.len; ++k) {
          const std::size_t i = base + k * sp.inner;
          ga[i] += y[i] * (g[i] - dot);
        }
      }
    }
  });
}

Var mean(const Var& a, int axis) {
  const std::size_t ax = a.value().normalize_axis(axis);
  const AxisSplit sp = split_at(a.shape(), ax);
  Shape os = a.shape();
  os[ax] = 1;
  Tensor out(os, 0.0);
  const auto& in = a.value();
  const double inv = 1.0 / static_cast<double>(sp.len);
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t k = 0; k < sp.len; ++k)
      for (std::size_t i = 0; i < sp.inner; ++i) out[o * sp.inner + i] += in[(o * sp.len + k) * sp.inner + i];
  for (double& x : out.storage()) x *= inv;
  const std::size_t ida = a.id();
  return a.tape().record(std::move(out), needs_grad(a), [=](Tape& tp, const Tensor& g) {
    Tensor& ga = tp.grad(ida);
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t k = 0; k < sp.len; ++k)
        for (std::size_t i = 0; i < sp.inner; ++i) ga[(o * sp.len + k) * sp.inner + i] += g[o * sp.inner + i] * inv;
  });
}

Var mean_pool(const Var& a) {
  if (a.shape().size() != 3) {
    throw DimensionError("mean_pool expects [B, S, D], got " + shape_str(a.shape()));
  }
  return mean(a, 1);
}

Var sum_all(const Var& a) {
  double s = 0.0;
  for (double x : a.value().data()) s += x;
  const std::size_t ida = a.id();
  return a.tape().record(Tensor::scalar(s), needs_grad(a), [=](Tape& tp, const Tensor& g) {
    Tensor& ga = tp.grad(ida);
    for (double& x : ga.storage()) x += g[0];
  });
}

// ---- structural -------------------------------------------------------------------

Var reshape(const Var& a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  const std::size_t ida = a.id();
  return a.tape().record(std::move(out), needs_grad(a), [=](Tape& tp, const Tensor& g) {
    Tensor& ga = tp.grad(ida);
    for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
  });
}

Var concat(const Var& a, const Var& b, int axis) {
  same_tape(a, b);
  const std::size_t ax = a.value().normalize_axis(axis);
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() != sb.size()) throw DimensionError("concat rank mismatch " + shape_str(sa) + " vs " + shape_str(sb));
  for (std::size_t i = 0; i < sa.size(); ++i) {
    if (i != ax && sa[i] != sb[i]) {
      throw DimensionError("concat shape mismatch " + shape_str(sa) + " vs " + shape_str(sb));
    }
  }
  const AxisSplit pa = split_at(sa, ax);
  const AxisSplit pb = split_at(sb, ax);
  Shape os = sa;
  os[ax] = sa[ax] + sb[ax];
  Tensor out(os, 0.0);
  const std::size_t ca = pa.len * pa.inner, cb = pb.len * pb.inner;
  for (std::size_t o = 0; o < pa.outer; ++o) {
    std::copy_n(a.value().data().data() + o * ca, ca, out.data().data() + o * (ca + cb));
    std::copy_n(b.value().data().data() + o * cb, cb, out.data().data() + o * (ca + cb) + ca);
  }
  const std::size_t ida = a.id(), idb = b.id();
  const bool ga = needs_grad(a), gb = needs_grad(b);
  const std::size_t outer = pa.outer;
  return a.tape().record(std::move(out), ga || gb, [=](Tape& tp, const Tensor& g) {
    for (std::size_t o = 0; o < outer; ++o) {
      if (ga) {
        Tensor& gA = tp.grad(ida);
        for (std::size_t i = 0; i < ca; ++i) gA[o * ca + i] += g[o * (ca + cb) + i];
      }
      if (gb) {
        Tensor& gB = tp.grad(idb);
        for (std::size_t i = 0; i < cb; ++i) gB[o * cb + i] += g[o * (ca + cb) + ca + i];
      }
    }
  });
}

Var gather(const Var& a, int axis, const std::vector<std::size_t>& indices) {
  const std::size_t ax = a.value().normalize_axis(axis);
  const AxisSplit sp = split_at(a.shape(), ax);
  for (std::size_t j : indices) {
    if (j >= sp.len) throw DimensionError("gather index " + std::to_string(j) + " out of range for " + shape_str(a.shape()));
  }
  Shape os = a.shape();
  os[ax] = indices.size();
  Tensor out(os, 0.0);
  const auto& in = a.value();
  const std::size_t n = indices.size();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t k = 0; k < n; ++k)
      std::copy_n(in.data().data() + (o * sp.len + indices[k]) * sp.inner, sp.inner,
                  out.data().data() + (o * n + k) * sp.inner);
  const std::size_t ida = a.id();
  return a.tape().record(std::move(out), needs_grad(a), [=](Tape& tp, const Tensor& g) {
    Tensor& ga = tp.grad(ida);
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t k = 0; k < n; ++k)
        for (std::size_t i = 0; i < sp.inner; ++i)
          ga[(o * sp.len + indices[k]) * sp.inner + i] += g[(o * n + k) * sp.inner + i];
  });
}

Var scatter(const Var& a, int axis, const std::vector<std::size_t>& indices, std::size_t size) {
  const std::size_t ax = a.value().normalize_axis(axis);
  const AxisSplit sp = split_at(a.shape(), ax);
  if (indices.size() != sp.len) {
    throw DimensionError("scatter needs one index per slice: " + std::to_string(indices.size()) + " indices for " +
                         shape_str(a.shape()));
  }
  for (std::size_t j : indices) {
    if (j >= size) throw DimensionError("scatter index " + std::to_string(j) + " out of range " + std::to_string(size));
  }
  Shape os = a.shape();
  os[ax] = size;
  Tensor out(os, 0.0);
  const auto& in = a.value();
  const std::size_t n = sp.len;
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t k = 0; k < n; ++k)
      for (std::size_t i = 0; i < sp.inner; ++i)
        out[(o * size + indices[k]) * sp.inner + i] += in[(o * n + k) * sp.inner + i];
  const std::size_t ida = a.id();
  return a.tape().record(std::move(out), needs_grad(a), [=](Tape& tp, const Tensor& g) {
    Tensor& ga = tp.grad(ida);
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t k = 0; k < n; ++k)
        for (std::size_t i = 0; i < sp.inner; ++i)
          ga[(o * n + k) * sp.inner + i] += g[(o * size + indices[k]) * sp.inner + i];
  });
}

// ---- fused ----------------------------------------------------------------------------

Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps) {
  same_tape(x, gain);
  same_tape(x, bias);
  const std::size_t d = x.shape().back();
  if (gain.value().numel() != d || bias.value().numel() != d) {
    throw DimensionError("layer_norm affine parameters must have " + std::to_string(d) + " entries");
  }
  const std::size_t rows = x.value().numel() / d;
  Tensor out(x.shape(), 0.0);
  std::vector<double> xhat(x.value().numel());
  std::vector<double> inv_std(rows);
  const auto& in = x.value();
  const auto& gv = gain.value();
  const auto& bv = bias.value();
  for (std::size_t r = 0; r < rows; ++r) {
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += in[r * d + j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (in[r * d + j] - mu) * (in[r * d + j] - mu);
    var /= static_cast<double>(d);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[r * d + j] = (in[r * d + j] - mu) * inv_std[r];
      out[r * d + j] = xhat[r * d + j] * gv[j] + bv[j];
    }
  }
  const std::size_t idx = x.id(), idg = gain.id(), idb = bias.id();
  const bool gx = needs_grad(x), gg = needs_grad(gain), gb = needs_grad(bias);
  return x.tape().record(std::move(out), gx || gg || gb, [=](Tape& tp, const Tensor& g) {
    const Tensor& gv = tp.value(idg);
    for (std::size_t r = 0; r < rows; ++r) {
      if (gg || gb) {
        for (std::size_t j = 0; j < d; ++j) {
          if (gg) tp.grad(idg)[j] += g[r * d + j] * xhat[r * d + j];
          if (gb) tp.grad(idb)[j] += g[r * d + j];
        }
      }
      if (!gx) continue;
      double mean_g = 0.0, mean_gx = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double gh = g[r * d + j] * gv[j];
        mean_g += gh;
        mean_gx += gh * xhat[r * d + j];
      }
      mean_g /= static_cast<double>(d);
      mean_gx /= static_cast<double>(d);
      Tensor& gX = tp.grad(idx);
      for (std::size_t j = 0; j < d; ++j) {
        const double gh = g[r * d + j] * gv[j];
        gX[r * d + j] += inv_std[r] * (gh - mean_g - xhat[r * d + j] * mean_gx);
      }
    }
  });
}

Var cross_entropy(const Var& logits, std::span<const int> labels) {
  const Shape& s = logits.shape();
  if (s.size() != 2) throw DimensionError("cross_entropy expects [B, C] logits, got " + shape_str(s));
  const std::size_t batch = s[0], classes = s[1];
  if (labels.size() != batch) {
    throw DimensionError("cross_entropy got " + std::to_string(labels.size()) + " labels for batch " +
                         std::to_string(batch));
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= classes) {
      throw DataError("label " + std::to_string(y) + " outside [0, " + std::to_string(classes) + ")");
    }
  }
  Tensor probs = softmax_values(logits.value(), 1);
  double loss = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    // log-softmax directly for accuracy when a probability underflows
    const double* row = logits.value().data().data() + b * classes;
    const double mx = *std::max_element(row, row + classes);
    double lse = 0.0;
    for (std::size_t c = 0; c < classes; ++c) lse += std::exp(row[c] - mx);
    loss -= row[labels[b]] - mx - std::log(lse);
  }
  loss /= static_cast<double>(batch);
  std::vector<int> y(labels.begin(), labels.end());
  const std::size_t idl = logits.id();
  return logits.tape().record(Tensor::scalar(loss), needs_grad(logits),
                              [=, probs = std::move(probs)](Tape& tp, const Tensor& g) {
                                Tensor& gl = tp.grad(idl);
                                const double w = g[0] / static_cast<double>(batch);
                                for (std::size_t b = 0; b < batch; ++b)
                                  for (std::size_t c = 0; c < classes; ++c) {
                                    const double target = static_cast<std::size_t>(y[b]) == c ? 1.0 : 0.0;
                                    gl[b * classes + c] += w * (probs[b * classes + c] - target);
                                  }
                              });
}

// ---- verification --------------------------------------------------------------------------

double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

namespace {

double evaluate(const LossFn& loss) {
  Tape t;
  Var l = loss(t);
  if (l.value().numel() != 1) throw ContractError("gradient check needs a scalar loss, got " + shape_str(l.shape()));
  return l.value()[0];
}

}  // namespace

GradCheckReport finite_difference_check(const LossFn& loss, ParameterStore& store, double step) {
  if (!(step > 0.0)) throw ContractError("finite-difference step must be positive");
  store.zero_grad();
  {
    Tape t;
    Var l = loss(t);
    t.backward(l);
  }
  const double f0 = evaluate(loss);
  const double f1 = evaluate(loss);
  if (std::memcmp(&f0, &f1, sizeof(double)) != 0) {
    throw DeterminismError("loss is not deterministic: repeated evaluation gave different values");
  }

  GradCheckReport report;
  for (std::size_t pi = 0; pi < store.size(); ++pi) {
    Parameter& p = store[pi];
    if (p.frozen) continue;
    for (std::size_t i = 0; i < p.value.numel(); ++i) {
      const double saved = p.value[i];
      p.value[i] = saved + step;
      const double fp = evaluate(loss);
      p.value[i] = saved - step;
      const double fm = evaluate(loss);
      p.value[i] = saved;
      const double numeric = (fp - fm) / (2.0 * step);
      const double analytic = p.grad[i];
      const double err = relative_error(analytic, numeric);
      ++report.entries_checked;
      if (report.worst_parameter.empty() || err > report.max_relative_error) {
        report.max_relative_error = err;
        report.worst_parameter = p.name;
        report.worst_index = i;
        report.worst_analytic = analytic;
        report.worst_numeric = numeric;
      }
    }
  }
  return report;
}

}  // namespace hmmoe
