// Copyright 2026 The HMMoE Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hmmoe/autodiff.hpp"

namespace hmmoe {

// Checkpoint layout:
//   u64 little-endian   header length N
//   N bytes             JSON {"tensors": [{"name", "shape", "frozen", "offset"}, ...]}
//   payload             little-endian float64 values, tensors concatenated in header order
// "offset" is the byte offset of a tensor's first value from the start of the payload.

struct CheckpointEntry {
  std::string name;
  Shape shape;
  bool frozen = false;
  std::uint64_t offset = 0;
  std::vector<double> values;
};

std::vector<unsigned char> encode_checkpoint(const ParameterStore& store);
std::vector<CheckpointEntry> decode_checkpoint(const std::vector<unsigned char>& bytes);

void save_checkpoint(const ParameterStore& store, const std::string& path);
std::vector<CheckpointEntry> read_checkpoint(const std::string& path);

/// Overwrites values in `store` from a checkpoint. Every checkpoint entry must
/// name an existing parameter with identical shape and frozen flag.
void load_checkpoint(ParameterStore& store, const std::string& path);

}  // namespace hmmoe
