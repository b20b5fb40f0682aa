// Copyright 2026 The HMMoE Authors
// SPDX-License-Identifier: Apache-2.0

#include "hmmoe/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <numeric>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "hmmoe/errors.hpp"
#include "hmmoe/io.hpp"
#include "hmmoe/rng.hpp"

namespace hmmoe {

using nlohmann::ordered_json;

// ---- synthetic task -------------------------------------------------------------

std::string_view to_string(FusionRule r) { return r == FusionRule::XorLatent ? "xor_latent" : "agreement"; }

FusionRule parse_fusion_rule(std::string_view name) {
  if (name == "xor_latent") return FusionRule::XorLatent;
  if (name == "agreement") return FusionRule::Agreement;
  throw ConfigError("unknown fusion rule '" + std::string(name) + "' (expected xor_latent or agreement)",
                    "task.fusion_rule");
}

int fuse_latents(FusionRule rule, int latent_visual, int latent_audio, std::size_t classes) {
  if (rule == FusionRule::XorLatent) return (latent_visual + latent_audio) % static_cast<int>(classes);
  return latent_visual == latent_audio ? 1 : 0;
}

void SyntheticTaskSpec::validate() const {
  if (classes < 2) throw ConfigError("at least two classes are required", "model.classes");
  if (!(noise_std >= 0.0) || !std::isfinite(noise_std)) throw ConfigError("noise_std must be >= 0", "task.noise_std");
  if (batch < 1) throw ConfigError("batch must be positive", "task.batch");
  if (seq_visual < 1) throw ConfigError("visual sequence length must be positive", "task.seq_v");
  if (seq_audio < 1) throw ConfigError("audio sequence length must be positive", "task.seq_a");
  if (dim < 1) throw ConfigError("dimension must be positive", "model.dim");
  if (train_size < batch) throw ConfigError("train_size must be at least one batch", "task.train_size");
  if (test_size < 1) throw ConfigError("test_size must be positive", "task.test_size");
}

namespace {

Dataset make_split(const SyntheticTaskSpec& spec, std::size_t n, Rng& rng, const std::vector<Tensor>& dirs_v,
                   const std::vector<Tensor>& dirs_a) {
  Dataset d;
  const std::size_t dim = spec.dim;
  d.visual = Tensor({n, spec.seq_visual, dim}, 0.0);
  d.audio = Tensor({n, spec.seq_audio, dim}, 0.0);
  std::uniform_int_distribution<int> latent(0, static_cast<int>(spec.classes) - 1);
  std::normal_distribution<double> noise(0.0, 1.0);
  for (std::size_t i = 0; i < n; ++i) {
    const int zv = latent(rng);
    const int za = latent(rng);
    d.latent_visual.push_back(zv);
    d.latent_audio.push_back(za);
    d.labels.push_back(fuse_latents(spec.rule, zv, za, spec.classes));
    for (std::size_t s = 0; s < spec.seq_visual; ++s)
      for (std::size_t k = 0; k < dim; ++k)
        d.visual[(i * spec.seq_visual + s) * dim + k] = dirs_v[zv][k] + spec.noise_std * noise(rng);
    for (std::size_t s = 0; s < spec.seq_audio; ++s)
      for (std::size_t k = 0; k < dim; ++k)
        d.audio[(i * spec.seq_audio + s) * dim + k] = dirs_a[za][k] + spec.noise_std * noise(rng);
  }
  return d;
}

}  // namespace

TaskData generate_task(const SyntheticTaskSpec& spec) {
  spec.validate();
  Rng dir_rng = make_rng(spec.seed, "task.directions");
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<Tensor> dirs_v, dirs_a;
  for (std::size_t c = 0; c < spec.classes; ++c) {
    Tensor v({spec.dim}, 0.0), a({spec.dim}, 0.0);
    for (double& x : v.storage()) x = normal(dir_rng);
    for (double& x : a.storage()) x = normal(dir_rng);
    dirs_v.push_back(std::move(v));
    dirs_a.push_back(std::move(a));
  }
  Rng train_rng = make_rng(spec.seed, "task.train");
  Rng test_rng = make_rng(spec.seed, "task.test");
  TaskData data;
  data.train = make_split(spec, spec.train_size, train_rng, dirs_v, dirs_a);
  data.test = make_split(spec, spec.test_size, test_rng, dirs_v, dirs_a);
  return data;
}

Batch Dataset::slice(std::size_t begin, std::size_t count) const {
  std::vector<std::size_t> rows(count);
  std::iota(rows.begin(), rows.end(), begin);
  return select(rows);
}

Batch Dataset::select(const std::vector<std::size_t>& rows) const {
  const std::size_t sv = visual.shape()[1], sa = audio.shape()[1], d = visual.shape()[2];
  Batch b{Tensor({rows.size(), sv, d}, 0.0), Tensor({rows.size(), sa, d}, 0.0), {}};
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= size()) throw DimensionError("dataset row " + std::to_string(rows[i]) + " out of range");
    std::copy_n(visual.data().data() + rows[i] * sv * d, sv * d, b.visual.data().data() + i * sv * d);
    std::copy_n(audio.data().data() + rows[i] * sa * d, sa * d, b.audio.data().data() + i * sa * d);
    b.labels.push_back(labels[rows[i]]);
  }
  return b;
}

std::string_view to_string(ModalityAblation a) {
  switch (a) {
    case ModalityAblation::None: return "none";
    case ModalityAblation::ZeroVisual: return "zero_visual";
    case ModalityAblation::ZeroAudio: return "zero_audio";
  }
  return "none";
}

void apply_ablation(Dataset& data, ModalityAblation ablation) {
  if (ablation == ModalityAblation::ZeroVisual) data.visual.fill(0.0);
  if (ablation == ModalityAblation::ZeroAudio) data.audio.fill(0.0);
}

// ---- training -------------------------------------------------------------------------

void TrainingSpec::validate() const {
  if (steps < 1) throw ConfigError("steps must be positive", "training.steps");
  if (eval_every < 1) throw ConfigError("eval_every must be positive", "training.eval_every");
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("learning rate must be finite and >= 0", "training.lr");
  if (seeds.empty()) throw ConfigError("at least one seed is required", "training.seeds");
}

namespace {

std::string fmt_double(double x) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  return buf;
}

}  // namespace

std::string metrics_to_csv(const std::vector<MetricRow>& rows) {
  std::ostringstream os;
  os << "step,split,loss,accuracy\n";
  for (const auto& r : rows) os << r.step << ',' << r.split << ',' << fmt_double(r.loss) << ',' << fmt_double(r.accuracy) << '\n';
  return os.str();
}

Evaluation evaluate(const Model& model, const Dataset& data, std::size_t chunk, bool record_decisions) {
  Evaluation ev;
  const std::size_t n = data.size();
  std::size_t correct = 0;
  double loss_sum = 0.0;
  for (std::size_t begin = 0; begin < n; begin += chunk) {
    const std::size_t count = std::min(chunk, n - begin);
    Batch b = data.slice(begin, count);
    Tape tape;
    Var logits = model.forward(tape, b.visual, b.audio, record_decisions ? &ev.decisions : nullptr);
    Var loss = cross_entropy(logits, b.labels);
    loss_sum += loss.value()[0] * static_cast<double>(count);
    const Tensor& lv = logits.value();
    const std::size_t c = lv.shape()[1];
    for (std::size_t i = 0; i < count; ++i) {
      const double* row = lv.data().data() + i * c;
      const auto pred = static_cast<int>(std::max_element(row, row + c) - row);
      if (pred == b.labels[i]) ++correct;
    }
  }
  ev.loss = loss_sum / static_cast<double>(n);
  ev.accuracy = static_cast<double>(correct) / static_cast<double>(n);
  if (!std::isfinite(ev.loss)) throw NumericError("evaluation loss became non-finite");
  return ev;
}

TrainResult train_run(const RunSpec& spec) {
  spec.model.validate();
  spec.training.validate();
  SyntheticTaskSpec task = spec.task;
  task.dim = spec.model.dim;
  task.classes = spec.model.classes;
  if (!spec.fixed_task_seed) task.seed = derive_seed(spec.seed, "task");
  TaskData data = generate_task(task);
  apply_ablation(data.train, spec.ablation);
  apply_ablation(data.test, spec.ablation);

  Model model = build_model(spec.model, derive_seed(spec.seed, "model"));
  TrainResult result;
  result.seed = spec.seed;
  result.ledger = count_parameters(model.params());
  result.frozen_digest_before = frozen_digest(model.params());

  Optimizer optimizer(OptimizerConfig{spec.training.optimizer});
  Rng batch_rng = make_rng(spec.seed, "batches");
  std::vector<std::size_t> order(data.train.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), batch_rng);
  std::size_t pos = 0;

  const std::size_t probe_n = std::min<std::size_t>(data.train.size(), 512);
  Dataset train_probe;
  {
    Batch b = data.train.slice(0, probe_n);
    train_probe.visual = std::move(b.visual);
    train_probe.audio = std::move(b.audio);
    train_probe.labels = std::move(b.labels);
  }

  const std::size_t bs = task.batch;
  Evaluation last_train, last_test;
  bool evaluated_at_end = false;
  for (std::size_t step = 1; step <= spec.training.steps; ++step) {
    if (pos + bs > order.size()) {
      std::shuffle(order.begin(), order.end(), batch_rng);
      pos = 0;
    }
    std::vector<std::size_t> rows(order.begin() + static_cast<std::ptrdiff_t>(pos),
                                  order.begin() + static_cast<std::ptrdiff_t>(pos + bs));
    pos += bs;
    train_step(model, data.train.select(rows), optimizer, spec.training.lr);
    if (step % spec.training.eval_every == 0) {
      last_train = evaluate(model, train_probe);
      last_test = evaluate(model, data.test);
      result.metrics.push_back({step, "train", last_train.loss, last_train.accuracy});
      result.metrics.push_back({step, "test", last_test.loss, last_test.accuracy});
      evaluated_at_end = step == spec.training.steps;
    }
  }
  if (!evaluated_at_end) last_train = evaluate(model, train_probe);
  last_test = evaluate(model, data.test, 128, true);
  result.final_train_accuracy = last_train.accuracy;
  result.final_test_accuracy = last_test.accuracy;
  result.final_test_loss = last_test.loss;
  result.utilization = utilization_stats(last_test.decisions);
  result.frozen_digest_after = frozen_digest(model.params());
  return result;
}

// ---- ablations --------------------------------------------------------------------------

std::string_view to_string(AblationKind k) {
  switch (k) {
    case AblationKind::ExpertType: return "expert_type";
    case AblationKind::Rank: return "rank";
    case AblationKind::ExpertCount: return "expert_count";
    case AblationKind::Heterogeneous: return "heterogeneous";
  }
  return "unknown";
}

AblationKind parse_ablation_kind(std::string_view name) {
  if (name == "expert_type") return AblationKind::ExpertType;
  if (name == "rank") return AblationKind::Rank;
  if (name == "expert_count") return AblationKind::ExpertCount;
  if (name == "heterogeneous") return AblationKind::Heterogeneous;
  throw ConfigError("unknown ablation kind '" + std::string(name) +
                        "' (expected expert_type, rank, expert_count or heterogeneous)",
                    "kind");
}

std::vector<AblationArm> rank_arms(const ModelConfig& base, const std::vector<std::size_t>& ranks) {
  std::vector<AblationArm> arms;
  for (std::size_t r : ranks) {
    AblationArm a{"r" + std::to_string(r), base};
    a.model.hmmoe.rank = r;
    arms.push_back(std::move(a));
  }
  return arms;
}

std::vector<AblationArm> expert_count_arms(const ModelConfig& base, const std::vector<std::size_t>& counts) {
  std::vector<AblationArm> arms;
  for (std::size_t m : counts) {
    AblationArm a{"M" + std::to_string(m), base};
    for (auto& g : a.model.hmmoe.groups) g.experts = m;
    a.model.hmmoe.top_k = std::min(base.hmmoe.top_k, m);
    arms.push_back(std::move(a));
  }
  return arms;
}

std::vector<AblationArm> expert_type_arms(const ModelConfig& base, const std::vector<std::vector<ExpertKind>>& types) {
  const std::size_t m = base.hmmoe.groups.empty() ? 1 : base.hmmoe.groups.front().experts;
  std::vector<AblationArm> arms;
  for (const auto& kinds : types) {
    AblationArm a{"", base};
    a.model.hmmoe.groups.clear();
    for (ExpertKind k : kinds) {
      if (!a.name.empty()) a.name += '+';
      a.name += std::string(to_string(k));
      a.model.hmmoe.groups.push_back({k, m});
    }
    arms.push_back(std::move(a));
  }
  return arms;
}

std::vector<HeterogeneousArmSpec> default_heterogeneous_arms() {
  return {
      {"3xSingle", {{ExpertKind::SingleModal, 3}}, std::nullopt},
      {"1+1+1",
       {{ExpertKind::SingleModal, 1}, {ExpertKind::CrossAttention, 1}, {ExpertKind::ChannelAttention, 1}},
       std::nullopt},
  };
}

std::vector<AblationArm> heterogeneous_arms(const ModelConfig& base, const std::vector<HeterogeneousArmSpec>& specs) {
  std::vector<AblationArm> arms;
  for (const auto& s : specs) {
    AblationArm a{s.name, base};
    a.model.hmmoe.groups = s.groups;
    std::size_t min_m = s.groups.empty() ? 1 : s.groups.front().experts;
    for (const auto& g : s.groups) min_m = std::min(min_m, g.experts);
    a.model.hmmoe.top_k = s.top_k.value_or(min_m);
    arms.push_back(std::move(a));
  }
  return arms;
}

namespace {

ordered_json ledger_json(const ParameterLedger& l) { return ordered_json::parse(l.to_json()); }

ParameterLedger ledger_from(const ordered_json& j) {
  ParameterLedger l;
  l.trainable = j.at("trainable").get<std::size_t>();
  l.frozen = j.at("frozen").get<std::size_t>();
  for (const auto& c : j.at("components")) {
    l.components.push_back(
        {c.at("component").get<std::string>(), c.at("trainable").get<std::size_t>(), c.at("frozen").get<std::size_t>()});
  }
  return l;
}

bool same_ledger(const ParameterLedger& a, const ParameterLedger& b) {
  if (a.trainable != b.trainable || a.frozen != b.frozen || a.components.size() != b.components.size()) return false;
  for (std::size_t i = 0; i < a.components.size(); ++i) {
    const auto& x = a.components[i];
    const auto& y = b.components[i];
    if (x.component != y.component || x.trainable != y.trainable || x.frozen != y.frozen) return false;
  }
  return true;
}

ordered_json parse_echo(const std::string& text) {
  try {
    return ordered_json::parse(text.empty() ? "{}" : text);
  } catch (const nlohmann::json::exception&) {
    return ordered_json(text);
  }
}

}  // namespace

std::string AblationReport::to_json() const {
  ordered_json j;
  j["kind"] = kind;
  j["config"] = parse_echo(config_echo);
  ordered_json arr = ordered_json::array();
  for (const auto& a : arms) {
    ordered_json per_seed = ordered_json::array();
    for (std::size_t i = 0; i < a.seeds.size(); ++i) {
      per_seed.push_back({{"seed", a.seeds[i]}, {"accuracy", a.accuracies[i]}});
    }
    arr.push_back({{"name", a.name},
                   {"descriptor", a.descriptor},
                   {"per_seed", per_seed},
                   {"mean_accuracy", a.mean},
                   {"std_accuracy", a.stddev},
                   {"ledger", ledger_json(a.ledger)}});
  }
  j["arms"] = std::move(arr);
  return j.dump(2);
}

AblationReport AblationReport::from_json(const std::string& text) {
  AblationReport r;
  try {
    const auto j = ordered_json::parse(text);
    r.kind = j.at("kind").get<std::string>();
    r.config_echo = j.at("config").dump();
    for (const auto& a : j.at("arms")) {
      ArmResult ar;
      ar.name = a.at("name").get<std::string>();
      ar.descriptor = a.at("descriptor").get<std::string>();
      for (const auto& s : a.at("per_seed")) {
        ar.seeds.push_back(s.at("seed").get<std::uint64_t>());
        ar.accuracies.push_back(s.at("accuracy").get<double>());
      }
      ar.mean = a.at("mean_accuracy").get<double>();
      ar.stddev = a.at("std_accuracy").get<double>();
      ar.ledger = ledger_from(a.at("ledger"));
      r.arms.push_back(std::move(ar));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed ablation report: ") + e.what());
  }
  return r;
}

bool AblationReport::same_content(const AblationReport& o) const {
  if (kind != o.kind || parse_echo(config_echo) != parse_echo(o.config_echo) || arms.size() != o.arms.size()) {
    return false;
  }
  for (std::size_t i = 0; i < arms.size(); ++i) {
    const auto& a = arms[i];
    const auto& b = o.arms[i];
    if (a.name != b.name || a.descriptor != b.descriptor || a.seeds != b.seeds || a.accuracies != b.accuracies ||
        a.mean != b.mean || a.stddev != b.stddev || !same_ledger(a.ledger, b.ledger)) {
      return false;
    }
  }
  return true;
}

AblationReport run_ablation(AblationKind kind, const std::vector<AblationArm>& arms, const RunSpec& base,
                            std::size_t workers, const std::string& config_echo) {
  if (arms.empty()) throw ConfigError("ablation grid is empty", "ablation." + std::string(to_string(kind)));
  if (base.training.seeds.size() < 3) throw ConfigError("ablations need at least 3 seeds", "training.seeds");
  base.training.validate();
  for (const auto& arm : arms) {
    try {
      arm.model.validate();
    } catch (const ConfigError& e) {
      throw ConfigError("arm '" + arm.name + "': " + e.message(), e.field());
    }
  }

  const auto& seeds = base.training.seeds;
  const std::size_t jobs = arms.size() * seeds.size();
  std::vector<TrainResult> results(jobs);
  std::vector<std::exception_ptr> errors(jobs);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t j = next++; j < jobs; j = next++) {
      try {
        RunSpec s = base;
        s.model = arms[j / seeds.size()].model;
        s.seed = seeds[j % seeds.size()];
        results[j] = train_run(s);
      } catch (...) {
        errors[j] = std::current_exception();
      }
    }
  };
  const std::size_t n_threads = std::max<std::size_t>(1, std::min(workers, jobs));
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t i = 0; i < n_threads; ++i) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (std::size_t j = 0; j < jobs; ++j) {
    if (!errors[j]) continue;
    const std::string arm = arms[j / seeds.size()].name;
    try {
      std::rethrow_exception(errors[j]);
    } catch (const Error& e) {
      switch (e.kind()) {
        case ErrorKind::Configuration: throw ConfigError("arm '" + arm + "': " + e.what());
        case ErrorKind::Numeric: throw NumericError("arm '" + arm + "': " + e.what());
        default: throw;
      }
    }
  }

  AblationReport report;
  report.kind = std::string(to_string(kind));
  report.config_echo = config_echo;
  for (std::size_t a = 0; a < arms.size(); ++a) {
    ArmResult ar;
    ar.name = arms[a].name;
    ar.descriptor = arms[a].model.hmmoe.describe();
    ar.seeds = seeds;
    for (std::size_t s = 0; s < seeds.size(); ++s) {
      TrainResult& tr = results[a * seeds.size() + s];
      ar.accuracies.push_back(tr.final_test_accuracy);
      if (s == 0) ar.ledger = tr.ledger;
      ar.runs.push_back(std::move(tr));
    }
    const double n = static_cast<double>(ar.accuracies.size());
    ar.mean = std::accumulate(ar.accuracies.begin(), ar.accuracies.end(), 0.0) / n;
    double ss = 0.0;
    for (double x : ar.accuracies) ss += (x - ar.mean) * (x - ar.mean);
    ar.stddev = ar.accuracies.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
    report.arms.push_back(std::move(ar));
  }
  return report;
}

// ---- report emission ----------------------------------------------------------------------

namespace {

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec || !std::filesystem::is_directory(dir)) throw IoError("cannot create output directory", dir);
}

std::string join(const std::string& dir, const std::string& name) {
  return (std::filesystem::path(dir) / name).string();
}

std::string safe_name(const std::string& s) {
  std::string out;
  for (char c : s) {
    const bool ok = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c == '+' ||
                    c == '-' || c == '_' || c == '.';
    out += ok ? c : '_';
  }
  return out;
}

}  // namespace

std::string train_report_json(const TrainResult& result, const std::string& config_echo) {
  ordered_json report;
  report["kind"] = "train";
  report["config"] = parse_echo(config_echo);
  report["seed"] = result.seed;
  report["final_train_accuracy"] = result.final_train_accuracy;
  report["final_test_accuracy"] = result.final_test_accuracy;
  report["final_test_loss"] = result.final_test_loss;
  report["frozen_unchanged"] = result.frozen_digest_before == result.frozen_digest_after;
  report["ledger"] = ledger_json(result.ledger);
  return report.dump(2);
}

void emit_train_reports(const std::string& out_dir, const TrainResult& result, const std::string& config_echo) {
  ensure_dir(out_dir);
  // Render everything before touching the destination.
  const std::string metrics = metrics_to_csv(result.metrics);
  const std::string utilization = result.utilization.to_csv();
  const std::string ledger = result.ledger.to_json();
  const std::string rep = train_report_json(result, config_echo);
  write_file_atomic(join(out_dir, "metrics.csv"), metrics);
  write_file_atomic(join(out_dir, "utilization.csv"), utilization);
  write_file_atomic(join(out_dir, "ledger.json"), ledger);
  write_file_atomic(join(out_dir, "report.json"), rep);
}

void emit_ablation_reports(const std::string& out_dir, const AblationReport& report) {
  ensure_dir(out_dir);
  ordered_json ledgers = ordered_json::object();
  for (const auto& a : report.arms) ledgers[a.name] = ledger_json(a.ledger);
  for (const auto& a : report.arms) {
    for (const auto& run : a.runs) {
      const std::string dir = join(join(join(out_dir, "arms"), safe_name(a.name)), "seed" + std::to_string(run.seed));
      ensure_dir(dir);
      write_file_atomic(join(dir, "metrics.csv"), metrics_to_csv(run.metrics));
      write_file_atomic(join(dir, "utilization.csv"), run.utilization.to_csv());
    }
  }
  write_file_atomic(join(out_dir, "ledger.json"), ledgers.dump(2));
  write_file_atomic(join(out_dir, "report.json"), report.to_json());
}

}  // namespace hmmoe
