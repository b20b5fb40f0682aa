// Copyright 2026 The HMMoE Authors
// SPDX-License-Identifier: Apache-2.0

// Command-line front end. Talks to the library only through hmmoe.h.
// Exit codes: 0 success, 1 verification failure, 2 configuration error,
// 3 runtime or numeric error.

#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "hmmoe/hmmoe.h"

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

int exit_code(hmmoe_status s) {
  switch (s) {
    case HMMOE_OK: return 0;
    case HMMOE_VERIFY_FAILED: return 1;
    case HMMOE_CONFIG_ERROR: return kExitConfig;
    default: return kExitRuntime;
  }
}

int report_failure(hmmoe_status s) {
  std::fprintf(stderr, "hmmoe: %s\n", hmmoe_last_error());
  return exit_code(s);
}

// Run calls cannot be repeated cheaply to fetch a longer text, so the
// buffer is sized for the largest report; oversize text is dropped.
template <typename F>
hmmoe_status with_text(F&& call, std::string& text) {
  std::vector<char> buf(std::size_t{1} << 22, '\0');
  size_t needed = 0;
  const hmmoe_status s = call(buf.data(), buf.size(), &needed);
  text = needed > 0 && needed <= buf.size() ? std::string(buf.data()) : std::string();
  return s;
}

struct RunFlags {
  std::string config;
  std::string out;
  std::uint64_t seed = 0;
  std::size_t workers = 1;
};

void add_run_flags(CLI::App* cmd, RunFlags& f) {
  cmd->add_option("--config", f.config, "JSON run configuration")->required();
  cmd->add_option("--out", f.out, "output directory (overrides output_dir)");
  cmd->add_option("--seed", f.seed, "root seed override");
  cmd->add_option("--workers", f.workers, "ablation worker threads")->check(CLI::PositiveNumber);
}

hmmoe_run_options options_from(const CLI::App* cmd, const RunFlags& f) {
  hmmoe_run_options o{};
  o.has_seed = cmd->count("--seed") > 0 ? 1 : 0;
  o.seed = f.seed;
  o.workers = f.workers;
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Heterogeneous multimodal mixture-of-experts adapters: training, ablations and verification"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(hmmoe_version()));

  RunFlags train_flags;
  CLI::App* train = app.add_subcommand("train", "train one model and write metrics, utilization, ledger and report");
  add_run_flags(train, train_flags);

  RunFlags ablate_flags;
  std::string kind;
  CLI::App* ablate = app.add_subcommand("ablate", "run an ablation grid over several seeds");
  add_run_flags(ablate, ablate_flags);
  ablate->add_option("--kind", kind, "expert_type, rank, expert_count or heterogeneous")->required();

  std::string scope = "all";
  CLI::App* verify = app.add_subcommand("verify", "run the built-in verification suites");
  verify->add_option("scope", scope, "gradcheck, invariants, ledger or all");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  std::string text;
  if (*train) {
    const hmmoe_run_options o = options_from(train, train_flags);
    const char* out = train_flags.out.empty() ? nullptr : train_flags.out.c_str();
    const hmmoe_status s = with_text(
        [&](char* b, size_t c, size_t* n) { return hmmoe_train(train_flags.config.c_str(), out, &o, b, c, n); }, text);
    if (s != HMMOE_OK) return report_failure(s);
    std::printf("%s\n", text.c_str());
    return 0;
  }
  if (*ablate) {
    const hmmoe_run_options o = options_from(ablate, ablate_flags);
    const char* out = ablate_flags.out.empty() ? nullptr : ablate_flags.out.c_str();
    const hmmoe_status s = with_text(
        [&](char* b, size_t c, size_t* n) {
          return hmmoe_ablate(ablate_flags.config.c_str(), kind.c_str(), out, &o, b, c, n);
        },
        text);
    if (s != HMMOE_OK) return report_failure(s);
    std::printf("%s\n", text.c_str());
    return 0;
  }
  const hmmoe_status s =
      with_text([&](char* b, size_t c, size_t* n) { return hmmoe_verify(scope.c_str(), b, c, n); }, text);
  std::fputs(text.c_str(), stdout);
  if (s != HMMOE_OK) return report_failure(s);
  return 0;
}
