// Copyright 2026 The HMMoE Authors
// SPDX-License-Identifier: Apache-2.0

#include "hmmoe/layer.hpp"

#include <algorithm>
#include <cstdio>
#include <map>
#include <sstream>
#include <tuple>

#include <json.hpp>

#include "hmmoe/errors.hpp"

namespace hmmoe {

void HmmoeConfig::validate() const {
  if (dim < 2) throw ConfigError("model dimension must be at least 2", "hmmoe.dim");
  if (rank < 1 || rank >= dim) {
    throw ConfigError("bottleneck rank must satisfy 1 <= r < D (r=" + std::to_string(rank) +
                          ", D=" + std::to_string(dim) + ")",
                      "hmmoe.r");
  }
  if (groups.empty()) throw ConfigError("at least one expert group is required", "hmmoe.groups");
  std::size_t min_m = groups.front().experts;
  for (std::size_t g = 0; g < groups.size(); ++g) {
    if (groups[g].experts < 1) {
      throw ConfigError("group needs at least one expert", "hmmoe.groups[" + std::to_string(g) + "].experts");
    }
    min_m = std::min(min_m, groups[g].experts);
  }
  if (top_k < 1 || top_k > min_m) {
    throw ConfigError("top-k must satisfy 1 <= k <= min group size (" + std::to_string(min_m) + "), got " +
                          std::to_string(top_k),
                      "hmmoe.k");
  }
}

std::string HmmoeConfig::describe() const {
  std::ostringstream os;
  for (std::size_t g = 0; g < groups.size(); ++g) {
    if (g) os << '+';
    os << to_string(groups[g].kind) << ':' << groups[g].experts;
  }
  os << "/r" << rank << "/k" << top_k;
  if (share_across_modalities) os << "/shared";
  return os.str();
}

HmmoeConfig default_hmmoe_config(std::size_t dim, std::size_t rank, std::size_t experts, std::size_t top_k) {
  HmmoeConfig c;
  c.dim = dim;
  c.rank = rank;
  c.top_k = top_k;
  c.groups = {{ExpertKind::SingleModal, experts},
              {ExpertKind::CrossAttention, experts},
              {ExpertKind::ChannelAttention, experts}};
  return c;
}

namespace {

StreamParams init_stream(ParameterStore& store, const std::string& prefix, const HmmoeConfig& c, Rng& rng) {
  StreamParams sp;
  sp.global = init_global_router(store, prefix + ".global.w_gr", c.dim, c.groups.size(), rng);
  for (std::size_t g = 0; g < c.groups.size(); ++g) {
    const std::string gp = prefix + ".g" + std::to_string(g);
    sp.local.push_back(init_local_router(store, gp + ".w_lr", c.dim, c.groups[g].experts, rng));
    std::vector<ExpertParams> experts;
    for (std::size_t j = 0; j < c.groups[g].experts; ++j) {
      experts.push_back(
          init_expert(store, gp + ".e" + std::to_string(j), c.groups[g].kind, c.dim, c.rank, rng));
    }
    sp.experts.push_back(std::move(experts));
  }
  return sp;
}

}  // namespace

HmmoeLayer::HmmoeLayer(ParameterStore& store, const std::string& prefix, HmmoeConfig config, Rng& rng)
    : config_(std::move(config)) {
  config_.validate();
  if (config_.share_across_modalities) {
    streams_[0] = init_stream(store, prefix + ".shared", config_, rng);
    streams_[1] = streams_[0];
  } else {
    streams_[0] = init_stream(store, prefix + ".visual", config_, rng);
    streams_[1] = init_stream(store, prefix + ".audio", config_, rng);
  }
}

const StreamParams& HmmoeLayer::stream(Modality m) const { return streams_[m == Modality::Visual ? 0 : 1]; }

Var HmmoeLayer::forward_stream(const Var& self, const Var& other, const StreamParams& sp,
                               RoutingDecision* decision) const {
  const std::size_t batch = self.shape()[0];
  Var group_weights = route_global(self, sp.global);  // [B, G]
  if (decision) {
    decision->k = config_.top_k;
    decision->group_weights = group_weights.value();
  }
  Var out;
  for (std::size_t g = 0; g < config_.groups.size(); ++g) {
    LocalRouting routing = route_local(self, sp.local[g], config_.top_k);
    const auto& experts = sp.experts[g];
    Var group_out = combine_group(routing, [&](std::size_t j, const std::vector<std::size_t>& rows) {
      if (rows.size() == batch) return expert_forward(self, other, experts[j]);
      return expert_forward(gather(self, 0, rows), gather(other, 0, rows), experts[j]);
    });
    Var gw = reshape(gather(group_weights, 1, {g}), {batch, 1, 1});
    Var weighted = mul(group_out, gw);
    out = out.valid() ? add(out, weighted) : weighted;
    if (decision) {
      decision->groups.push_back({routing.probs.value(), std::move(routing.selected), std::move(routing.combine_weights)});
    }
  }
  return out;
}

ModalPair HmmoeLayer::forward(const ModalPair& in, std::vector<RoutingDecision>* decisions,
                              std::optional<std::size_t> layer_index) const {
  const Shape& vs = in.visual.shape();
  const Shape& as = in.audio.shape();
  if (vs.size() != 3 || as.size() != 3 || vs[2] != config_.dim || as[2] != config_.dim) {
    throw DimensionError("HMMoE layer of width " + std::to_string(config_.dim) + " got visual " + shape_str(vs) +
                         " and audio " + shape_str(as));
  }
  if (vs[0] != as[0]) {
    throw DimensionError("batch sizes differ between modalities: " + shape_str(vs) + " vs " + shape_str(as));
  }
  RoutingDecision dv, da;
  dv.layer = da.layer = layer_index;
  dv.modality = Modality::Visual;
  da.modality = Modality::Audio;
  ModalPair out;
  out.visual = forward_stream(in.visual, in.audio, streams_[0], decisions ? &dv : nullptr);
  out.audio = forward_stream(in.audio, in.visual, streams_[1], decisions ? &da : nullptr);
  if (decisions) {
    decisions->push_back(std::move(dv));
    decisions->push_back(std::move(da));
  }
  return out;
}

std::size_t hmmoe_layer_parameter_count(const HmmoeConfig& c) {
  std::size_t per_stream = c.dim * c.groups.size();
  for (const auto& g : c.groups) {
    per_stream += c.dim * g.experts;
    per_stream += g.experts * expert_parameter_count(g.kind, c.dim, c.rank);
  }
  return c.share_across_modalities ? per_stream : 2 * per_stream;
}

// ---- ledger --------------------------------------------------------------------

double ParameterLedger::fraction() const noexcept {
  return total() == 0 ? 0.0 : static_cast<double>(trainable) / static_cast<double>(total());
}

std::string ParameterLedger::to_json() const {
  nlohmann::ordered_json j;
  j["trainable"] = trainable;
  j["frozen"] = frozen;
  j["fraction"] = fraction();
  nlohmann::ordered_json comps = nlohmann::ordered_json::array();
  for (const auto& c : components) {
    comps.push_back({{"component", c.component}, {"trainable", c.trainable}, {"frozen", c.frozen}});
  }
  j["components"] = std::move(comps);
  return j.dump(2);
}

namespace {

std::string component_of(const std::string& name) {
  const auto first = name.find('.');
  if (first == std::string::npos) return name;
  const auto second = name.find('.', first + 1);
  const std::string seg = name.substr(first + 1, second == std::string::npos ? std::string::npos : second - first - 1);
  const bool layer_tag = seg.size() >= 2 && seg[0] == 'l' &&
                         std::all_of(seg.begin() + 1, seg.end(), [](char c) { return c >= '0' && c <= '9'; });
  return layer_tag ? name.substr(0, second) : name.substr(0, first);
}

}  // namespace

ParameterLedger count_parameters(const ParameterStore& store) {
  ParameterLedger ledger;
  std::map<std::string, std::size_t> slot;
  store.for_each([&](const Parameter& p) {
    const std::string comp = component_of(p.name);
    auto it = slot.find(comp);
    if (it == slot.end()) {
      it = slot.emplace(comp, ledger.components.size()).first;
      ledger.components.push_back({comp, 0, 0});
    }
    auto& c = ledger.components[it->second];
    const std::size_t n = p.value.numel();
    if (p.frozen) {
      c.frozen += n;
      ledger.frozen += n;
    } else {
      c.trainable += n;
      ledger.trainable += n;
    }
  });
  return ledger;
}

// ---- utilization -------------------------------------------------------------------

std::string UtilizationTable::to_csv() const {
  std::ostringstream os;
  os << "layer,modality,group,expert_index,frequency\n";
  char buf[64];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%.17g", r.frequency);
    os << r.layer << ',' << to_string(r.modality) << ',' << r.group << ',' << r.expert << ',' << buf << '\n';
  }
  return os.str();
}

UtilizationTable utilization_stats(std::span<const RoutingDecision> decisions) {
  using Key = std::tuple<std::size_t, int, std::size_t>;
  struct Acc {
    std::vector<double> counts;
    double samples = 0.0;
  };
  std::map<Key, Acc> acc;
  for (const auto& d : decisions) {
    if (!d.layer || !d.modality) throw ContractError("routing decision is not tagged with layer and modality");
    for (std::size_t g = 0; g < d.groups.size(); ++g) {
      const auto& gd = d.groups[g];
      Acc& a = acc[{*d.layer, static_cast<int>(*d.modality), g}];
      const std::size_t m = gd.probs.shape()[1];
      if (a.counts.empty()) a.counts.assign(m, 0.0);
      if (a.counts.size() != m) throw ContractError("expert count changed across decisions for one group");
      for (const auto& sel : gd.selected)
        for (std::size_t e : sel) a.counts[e] += 1.0;
      a.samples += static_cast<double>(gd.selected.size());
    }
  }
  UtilizationTable table;
  for (const auto& [key, a] : acc) {
    for (std::size_t e = 0; e < a.counts.size(); ++e) {
      table.rows.push_back({std::get<0>(key), static_cast<Modality>(std::get<1>(key)), std::get<2>(key), e,
                            a.samples > 0 ? a.counts[e] / a.samples : 0.0});
    }
  }
  return table;
}

}  // namespace hmmoe
