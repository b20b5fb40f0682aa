// Copyright 2026 The HMMoE Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>

namespace hmmoe {

std::string read_text_file(const std::string& path);

// Writes to a sibling temporary and renames over `path`, so readers never
// observe a partial file. Throws IoError naming the path on failure.
void write_file_atomic(const std::string& path, const std::string& content);

}  // namespace hmmoe
