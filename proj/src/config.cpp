// Copyright 2026 The HMMoE Authors
// SPDX-License-Identifier: Apache-2.0

#include "hmmoe/config.hpp"

#include <cmath>
#include <set>

#include <json.hpp>

#include "hmmoe/errors.hpp"
#include "hmmoe/io.hpp"

namespace hmmoe {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

std::string join_path(const std::string& base, const std::string& key) { return base.empty() ? key : base + "." + key; }

std::string indexed(const std::string& base, std::size_t i) { return base + "[" + std::to_string(i) + "]"; }

std::size_t as_size(const json& v, const std::string& path) {
  if (!v.is_number_integer()) throw ConfigError("expected a non-negative integer", path);
  if (v.is_number_unsigned()) return v.get<std::size_t>();
  const auto x = v.get<std::int64_t>();
  if (x < 0) throw ConfigError("expected a non-negative integer, got " + std::to_string(x), path);
  return static_cast<std::size_t>(x);
}

std::uint64_t as_u64(const json& v, const std::string& path) { return as_size(v, path); }

double as_double(const json& v, const std::string& path) {
  if (!v.is_number()) throw ConfigError("expected a number", path);
  const double x = v.get<double>();
  if (!std::isfinite(x)) throw ConfigError("expected a finite number", path);
  return x;
}

bool as_bool(const json& v, const std::string& path) {
  if (!v.is_boolean()) throw ConfigError("expected true or false", path);
  return v.get<bool>();
}

std::string as_string(const json& v, const std::string& path) {
  if (!v.is_string()) throw ConfigError("expected a string", path);
  return v.get<std::string>();
}

const json& as_array(const json& v, const std::string& path) {
  if (!v.is_array()) throw ConfigError("expected an array", path);
  return v;
}

// Object view that records which keys were read; finish() rejects the rest.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError("expected an object", path_.empty() ? "<root>" : path_);
  }

  const json* optional(const std::string& key) {
    known_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  const json& required(const std::string& key) {
    const json* v = optional(key);
    if (v == nullptr) throw ConfigError("required field is missing", at(key));
    return *v;
  }

  std::string at(const std::string& key) const { return join_path(path_, key); }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!known_.count(it.key())) throw ConfigError("unknown key", at(it.key()));
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> known_;
};

ExpertKind kind_at(const json& v, const std::string& path) {
  const std::string name = as_string(v, path);
  try {
    return parse_expert_kind(name);
  } catch (const ConfigError& e) {
    throw ConfigError(e.message(), path);
  }
}

std::vector<GroupSpec> parse_groups(const json& v, const std::string& path) {
  std::vector<GroupSpec> groups;
  const json& arr = as_array(v, path);
  for (std::size_t i = 0; i < arr.size(); ++i) {
    Section g(arr[i], indexed(path, i));
    GroupSpec spec;
    spec.kind = kind_at(g.required("kind"), g.at("kind"));
    spec.experts = as_size(g.required("experts"), g.at("experts"));
    g.finish();
    groups.push_back(spec);
  }
  return groups;
}

std::vector<std::size_t> size_list(const json& v, const std::string& path) {
  std::vector<std::size_t> out;
  const json& arr = as_array(v, path);
  for (std::size_t i = 0; i < arr.size(); ++i) out.push_back(as_size(arr[i], indexed(path, i)));
  return out;
}

ModalityAblation parse_modality_ablation(const std::string& name, const std::string& path) {
  if (name == "none") return ModalityAblation::None;
  if (name == "zero_visual") return ModalityAblation::ZeroVisual;
  if (name == "zero_audio") return ModalityAblation::ZeroAudio;
  throw ConfigError("unknown modality ablation '" + name + "' (expected none, zero_visual or zero_audio)", path);
}

void parse_model(Section& root, RunConfig& c) {
  Section m(root.required("model"), "model");
  c.model.layers = as_size(m.required("layers"), "model.layers");
  c.model.dim = as_size(m.required("dim"), "model.dim");
  c.model.classes = as_size(m.required("classes"), "model.classes");
  m.finish();

  Section h(root.required("hmmoe"), "hmmoe");
  HmmoeConfig& hc = c.model.hmmoe;
  hc.dim = c.model.dim;
  hc.rank = as_size(h.required("r"), "hmmoe.r");
  hc.top_k = as_size(h.required("k"), "hmmoe.k");
  if (const json* g = h.optional("groups")) {
    hc.groups = parse_groups(*g, "hmmoe.groups");
  } else {
    hc.groups = {{ExpertKind::SingleModal, 2}, {ExpertKind::CrossAttention, 2}, {ExpertKind::ChannelAttention, 2}};
  }
  if (const json* s = h.optional("share_across_modalities")) {
    hc.share_across_modalities = as_bool(*s, "hmmoe.share_across_modalities");
  }
  h.finish();
}

void parse_task(Section& root, RunConfig& c) {
  SyntheticTaskSpec& t = c.task;
  t.dim = c.model.dim;
  t.classes = c.model.classes;
  const json* tj = root.optional("task");
  if (tj == nullptr) return;
  Section s(*tj, "task");
  if (const json* v = s.optional("batch")) t.batch = as_size(*v, "task.batch");
  if (const json* v = s.optional("seq_v")) t.seq_visual = as_size(*v, "task.seq_v");
  if (const json* v = s.optional("seq_a")) t.seq_audio = as_size(*v, "task.seq_a");
  if (const json* v = s.optional("noise_std")) t.noise_std = as_double(*v, "task.noise_std");
  if (const json* v = s.optional("fusion_rule")) t.rule = parse_fusion_rule(as_string(*v, "task.fusion_rule"));
  if (const json* v = s.optional("train_size")) t.train_size = as_size(*v, "task.train_size");
  if (const json* v = s.optional("test_size")) t.test_size = as_size(*v, "task.test_size");
  if (const json* v = s.optional("seed")) c.task_seed = as_u64(*v, "task.seed");
  if (const json* v = s.optional("modality_ablation")) {
    c.modality_ablation = parse_modality_ablation(as_string(*v, "task.modality_ablation"), "task.modality_ablation");
  }
  s.finish();
}

void parse_training(Section& root, RunConfig& c) {
  TrainingSpec& t = c.training;
  const json* tj = root.optional("training");
  if (tj == nullptr) return;
  Section s(*tj, "training");
  if (const json* v = s.optional("steps")) t.steps = as_size(*v, "training.steps");
  if (const json* v = s.optional("eval_every")) t.eval_every = as_size(*v, "training.eval_every");
  if (const json* v = s.optional("lr")) t.lr = as_double(*v, "training.lr");
  if (const json* v = s.optional("optimizer")) t.optimizer = parse_optimizer(as_string(*v, "training.optimizer"));
  if (const json* v = s.optional("seeds")) {
    t.seeds.clear();
    const json& arr = as_array(*v, "training.seeds");
    for (std::size_t i = 0; i < arr.size(); ++i) t.seeds.push_back(as_u64(arr[i], indexed("training.seeds", i)));
  }
  s.finish();
}

void parse_ablation(Section& root, RunConfig& c) {
  const json* aj = root.optional("ablation");
  if (aj == nullptr) return;
  Section s(*aj, "ablation");
  AblationGrids& g = c.ablation;
  if (const json* v = s.optional("rank")) g.rank = size_list(*v, "ablation.rank");
  if (const json* v = s.optional("expert_count")) g.expert_count = size_list(*v, "ablation.expert_count");
  if (const json* v = s.optional("expert_type")) {
    g.expert_type.clear();
    const json& arr = as_array(*v, "ablation.expert_type");
    for (std::size_t i = 0; i < arr.size(); ++i) {
      const std::string p = indexed("ablation.expert_type", i);
      const json& kinds = as_array(arr[i], p);
      std::vector<ExpertKind> arm;
      for (std::size_t j = 0; j < kinds.size(); ++j) arm.push_back(kind_at(kinds[j], indexed(p, j)));
      g.expert_type.push_back(std::move(arm));
    }
  }
  if (const json* v = s.optional("heterogeneous")) {
    g.heterogeneous.clear();
    const json& arr = as_array(*v, "ablation.heterogeneous");
    for (std::size_t i = 0; i < arr.size(); ++i) {
      const std::string p = indexed("ablation.heterogeneous", i);
      Section a(arr[i], p);
      HeterogeneousArmSpec spec;
      spec.name = as_string(a.required("name"), a.at("name"));
      spec.groups = parse_groups(a.required("groups"), a.at("groups"));
      if (const json* k = a.optional("k")) spec.top_k = as_size(*k, a.at("k"));
      a.finish();
      g.heterogeneous.push_back(std::move(spec));
    }
  }
  s.finish();
}

// Arm models are validated by run_ablation, where the arm name is known;
// here only the grid shape is checked.
void validate_grids(const AblationGrids& g) {
  if (g.rank.empty()) throw ConfigError("grid must not be empty", "ablation.rank");
  if (g.expert_count.empty()) throw ConfigError("grid must not be empty", "ablation.expert_count");
  if (g.expert_type.empty()) throw ConfigError("grid must not be empty", "ablation.expert_type");
  for (std::size_t i = 0; i < g.expert_type.size(); ++i) {
    if (g.expert_type[i].empty()) throw ConfigError("arm lists no groups", indexed("ablation.expert_type", i));
  }
  if (g.heterogeneous.empty()) throw ConfigError("grid must not be empty", "ablation.heterogeneous");
}

ordered_json groups_json(const std::vector<GroupSpec>& groups) {
  ordered_json arr = ordered_json::array();
  for (const auto& g : groups) arr.push_back({{"kind", std::string(to_string(g.kind))}, {"experts", g.experts}});
  return arr;
}

}  // namespace

RunConfig parse_run_config(const std::string& json_text) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("malformed JSON: ") + e.what(), "<root>");
  }
  RunConfig c;
  Section root(doc, "");
  parse_model(root, c);
  parse_task(root, c);
  parse_training(root, c);
  parse_ablation(root, c);
  if (const json* v = root.optional("output_dir")) c.output_dir = as_string(*v, "output_dir");
  root.finish();

  // Validation of every section happens before any compute.
  c.model.validate();
  c.task.validate();
  c.training.validate();
  validate_grids(c.ablation);
  return c;
}

RunConfig load_run_config(const std::string& path) {
  std::string text;
  try {
    text = read_text_file(path);
  } catch (const IoError& e) {
    throw ConfigError(std::string("cannot read config file: ") + e.what(), "<file>");
  }
  return parse_run_config(text);
}

std::string RunConfig::to_json() const {
  ordered_json j;
  j["model"] = {{"layers", model.layers}, {"dim", model.dim}, {"classes", model.classes}};
  j["hmmoe"] = {{"r", model.hmmoe.rank},
                {"k", model.hmmoe.top_k},
                {"groups", groups_json(model.hmmoe.groups)},
                {"share_across_modalities", model.hmmoe.share_across_modalities}};
  ordered_json t = {{"batch", task.batch},
                    {"seq_v", task.seq_visual},
                    {"seq_a", task.seq_audio},
                    {"noise_std", task.noise_std},
                    {"fusion_rule", std::string(to_string(task.rule))},
                    {"train_size", task.train_size},
                    {"test_size", task.test_size}};
  if (task_seed) t["seed"] = *task_seed;
  t["modality_ablation"] = std::string(to_string(modality_ablation));
  j["task"] = std::move(t);
  j["training"] = {{"steps", training.steps},
                   {"eval_every", training.eval_every},
                   {"lr", training.lr},
                   {"optimizer", std::string(to_string(training.optimizer))},
                   {"seeds", training.seeds}};
  ordered_json types = ordered_json::array();
  for (const auto& arm : ablation.expert_type) {
    ordered_json kinds = ordered_json::array();
    for (ExpertKind k : arm) kinds.push_back(std::string(to_string(k)));
    types.push_back(std::move(kinds));
  }
  ordered_json het = ordered_json::array();
  for (const auto& h : ablation.heterogeneous) {
    ordered_json a = {{"name", h.name}, {"groups", groups_json(h.groups)}};
    if (h.top_k) a["k"] = *h.top_k;
    het.push_back(std::move(a));
  }
  j["ablation"] = {{"rank", ablation.rank},
                   {"expert_count", ablation.expert_count},
                   {"expert_type", std::move(types)},
                   {"heterogeneous", std::move(het)}};
  if (!output_dir.empty()) j["output_dir"] = output_dir;
  return j.dump(2);
}

void RunConfig::override_seed(std::uint64_t seed) {
  const std::size_t n = training.seeds.size();
  training.seeds.clear();
  for (std::size_t i = 0; i < n; ++i) training.seeds.push_back(seed + i);
}

RunSpec RunConfig::run_spec(std::uint64_t seed) const {
  RunSpec s;
  s.model = model;
  s.task = task;
  if (task_seed) {
    s.task.seed = *task_seed;
    s.fixed_task_seed = true;
  }
  s.training = training;
  s.seed = seed;
  s.ablation = modality_ablation;
  return s;
}

std::vector<AblationArm> RunConfig::arms(AblationKind kind) const {
  switch (kind) {
    case AblationKind::Rank: return rank_arms(model, ablation.rank);
    case AblationKind::ExpertCount: return expert_count_arms(model, ablation.expert_count);
    case AblationKind::ExpertType: return expert_type_arms(model, ablation.expert_type);
    case AblationKind::Heterogeneous: return heterogeneous_arms(model, ablation.heterogeneous);
  }
  return {};
}

}  // namespace hmmoe
