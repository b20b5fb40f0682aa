// Copyright 2026 The HMMoE Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace hmmoe {

enum class VerifySuite { GradCheck, Invariants, Ledger, All };

std::string_view to_string(VerifySuite s);
VerifySuite parse_verify_suite(std::string_view name);

struct Tolerances {
  double gradient = 1e-4;  // max relative error against central differences
  double exact = 1e-12;    // forward identities and probability sums
};

/// Defaults, or every tolerance replaced by HMMOE_TOL_OVERRIDE when set.
/// A value that is not a finite number raises ConfigError.
Tolerances tolerances_from_env();

struct CheckResult {
  std::string suite;
  std::string name;
  double value = 0.0;
  std::optional<double> tolerance;  // empty: exact integer or boolean check
  bool passed = false;
  std::string detail;
};

struct VerifyReport {
  std::vector<CheckResult> checks;

  bool all_passed() const;
  std::size_t failures() const;
  double max_value(std::string_view suite) const;
  // One line per check plus a summary line.
  std::string table() const;
};

/// Runs the named suite on built-in micro configurations.
VerifyReport run_verification(VerifySuite suite, const Tolerances& tol = {});

}  // namespace hmmoe
