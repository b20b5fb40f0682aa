// Copyright 2026 The HMMoE Authors
// SPDX-License-Identifier: Apache-2.0

#include "hmmoe/hmmoe.h"

#include <cstring>
#include <exception>
#include <new>
#include <string>

#include "hmmoe/checkpoint.hpp"
#include "hmmoe/config.hpp"
#include "hmmoe/errors.hpp"
#include "hmmoe/harness.hpp"
#include "hmmoe/model.hpp"
#include "hmmoe/verify.hpp"

struct hmmoe_model {
  hmmoe::Model model;
};

namespace {

thread_local std::string g_error;
thread_local std::string g_error_field;

hmmoe_status fail(hmmoe_status status, const std::string& message, const std::string& field = {}) {
  g_error = message;
  g_error_field = field;
  return status;
}

// Maps every exception escaping the core onto a status code.
template <typename F>
hmmoe_status guarded(F&& f) {
  g_error.clear();
  g_error_field.clear();
  try {
    return f();
  } catch (const hmmoe::ConfigError& e) {
    return fail(HMMOE_CONFIG_ERROR, e.what(), e.field());
  } catch (const hmmoe::Error& e) {
    return fail(HMMOE_RUNTIME_ERROR, e.what());
  } catch (const std::bad_alloc&) {
    return fail(HMMOE_RUNTIME_ERROR, "out of memory");
  } catch (const std::exception& e) {
    return fail(HMMOE_RUNTIME_ERROR, e.what());
  } catch (...) {
    return fail(HMMOE_RUNTIME_ERROR, "unknown failure");
  }
}

// Returns false when the text did not fit.
bool write_text(const std::string& text, char* buffer, size_t capacity, size_t* needed) {
  if (needed != nullptr) *needed = text.size() + 1;
  if (buffer == nullptr || capacity < text.size() + 1) return false;
  std::memcpy(buffer, text.c_str(), text.size() + 1);
  return true;
}

hmmoe::RunConfig load_config(const char* config_path, const char* out_dir, const hmmoe_run_options* options) {
  hmmoe::RunConfig config = hmmoe::load_run_config(config_path);
  if (out_dir != nullptr) config.output_dir = out_dir;
  if (config.output_dir.empty()) throw hmmoe::ConfigError("no output directory given", "output_dir");
  if (options != nullptr && options->has_seed) config.override_seed(options->seed);
  return config;
}

}  // namespace

extern "C" {

const char* hmmoe_version(void) { return "1.0.0"; }

const char* hmmoe_last_error(void) { return g_error.c_str(); }

const char* hmmoe_last_error_field(void) { return g_error_field.c_str(); }

hmmoe_status hmmoe_model_create(const char* config_json, uint64_t seed, hmmoe_model** out) {
  if (config_json == nullptr || out == nullptr) return fail(HMMOE_INVALID_ARGUMENT, "null argument");
  *out = nullptr;
  return guarded([&] {
    const hmmoe::RunConfig config = hmmoe::parse_run_config(config_json);
    *out = new hmmoe_model{hmmoe::build_model(config.model, seed)};
    return HMMOE_OK;
  });
}

void hmmoe_model_destroy(hmmoe_model* model) { delete model; }

size_t hmmoe_model_dim(const hmmoe_model* model) { return model ? model->model.config().dim : 0; }

size_t hmmoe_model_classes(const hmmoe_model* model) { return model ? model->model.config().classes : 0; }

hmmoe_status hmmoe_model_forward(const hmmoe_model* model, const double* visual, size_t seq_visual,
                                 const double* audio, size_t seq_audio, size_t batch, double* logits,
                                 size_t logits_capacity) {
  if (model == nullptr || visual == nullptr || audio == nullptr || logits == nullptr) {
    return fail(HMMOE_INVALID_ARGUMENT, "null argument");
  }
  return guarded([&] {
    const size_t d = model->model.config().dim;
    const size_t c = model->model.config().classes;
    if (logits_capacity < batch * c) {
      return fail(HMMOE_BUFFER_TOO_SMALL, "logits buffer holds " + std::to_string(logits_capacity) + " values, " +
                                              std::to_string(batch * c) + " needed");
    }
    hmmoe::Tensor v({batch, seq_visual, d}, std::vector<double>(visual, visual + batch * seq_visual * d));
    hmmoe::Tensor a({batch, seq_audio, d}, std::vector<double>(audio, audio + batch * seq_audio * d));
    const hmmoe::Tensor out = model->model.logits(v, a);
    std::memcpy(logits, out.data().data(), out.numel() * sizeof(double));
    return HMMOE_OK;
  });
}

hmmoe_status hmmoe_model_ledger_json(const hmmoe_model* model, char* buffer, size_t capacity, size_t* needed) {
  if (model == nullptr) return fail(HMMOE_INVALID_ARGUMENT, "null model");
  return guarded([&] {
    if (!write_text(hmmoe::count_parameters(model->model.params()).to_json(), buffer, capacity, needed)) {
      return fail(HMMOE_BUFFER_TOO_SMALL, "buffer too small for ledger");
    }
    return HMMOE_OK;
  });
}

hmmoe_status hmmoe_model_save(const hmmoe_model* model, const char* path) {
  if (model == nullptr || path == nullptr) return fail(HMMOE_INVALID_ARGUMENT, "null argument");
  return guarded([&] {
    hmmoe::save_checkpoint(model->model.params(), path);
    return HMMOE_OK;
  });
}

hmmoe_status hmmoe_model_load(hmmoe_model* model, const char* path) {
  if (model == nullptr || path == nullptr) return fail(HMMOE_INVALID_ARGUMENT, "null argument");
  return guarded([&] {
    hmmoe::load_checkpoint(model->model.params(), path);
    return HMMOE_OK;
  });
}

hmmoe_status hmmoe_train(const char* config_path, const char* out_dir, const hmmoe_run_options* options,
                         char* summary, size_t capacity, size_t* needed) {
  if (config_path == nullptr) return fail(HMMOE_INVALID_ARGUMENT, "null config path");
  return guarded([&] {
    const hmmoe::RunConfig config = load_config(config_path, out_dir, options);
    const hmmoe::TrainResult result = hmmoe::train_run(config.run_spec(config.training.seeds.front()));
    if (result.frozen_digest_before != result.frozen_digest_after) {
      throw hmmoe::NumericError("backbone parameters changed during training");
    }
    hmmoe::emit_train_reports(config.output_dir, result, config.to_json());
    write_text(hmmoe::train_report_json(result, config.to_json()), summary, capacity, needed);
    return HMMOE_OK;
  });
}

hmmoe_status hmmoe_ablate(const char* config_path, const char* kind, const char* out_dir,
                          const hmmoe_run_options* options, char* summary, size_t capacity, size_t* needed) {
  if (config_path == nullptr || kind == nullptr) return fail(HMMOE_INVALID_ARGUMENT, "null argument");
  return guarded([&] {
    const hmmoe::AblationKind k = hmmoe::parse_ablation_kind(kind);
    const hmmoe::RunConfig config = load_config(config_path, out_dir, options);
    const size_t workers = options != nullptr && options->workers > 0 ? options->workers : 1;
    const hmmoe::AblationReport report = hmmoe::run_ablation(k, config.arms(k), config.run_spec(0), workers,
                                                             config.to_json());
    hmmoe::emit_ablation_reports(config.output_dir, report);
    write_text(report.to_json(), summary, capacity, needed);
    return HMMOE_OK;
  });
}

hmmoe_status hmmoe_verify(const char* scope, char* table, size_t capacity, size_t* needed) {
  if (scope == nullptr) return fail(HMMOE_INVALID_ARGUMENT, "null scope");
  return guarded([&] {
    const hmmoe::VerifySuite suite = hmmoe::parse_verify_suite(scope);
    const hmmoe::Tolerances tol = hmmoe::tolerances_from_env();
    const hmmoe::VerifyReport report = hmmoe::run_verification(suite, tol);
    write_text(report.table(), table, capacity, needed);
    if (!report.all_passed()) {
      return fail(HMMOE_VERIFY_FAILED, std::to_string(report.failures()) + " verification check(s) failed");
    }
    return HMMOE_OK;
  });
}

}  // extern "C"
