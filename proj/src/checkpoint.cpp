// Copyright 2026 The HMMoE Authors
// SPDX-License-Identifier: Apache-2.0

#include "hmmoe/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include <json.hpp>

#include "hmmoe/errors.hpp"
#include "hmmoe/io.hpp"

namespace hmmoe {

namespace {

void put_u64(std::vector<unsigned char>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

std::uint64_t get_u64(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

}  // namespace

std::vector<unsigned char> encode_checkpoint(const ParameterStore& store) {
  nlohmann::json tensors = nlohmann::json::array();
  std::uint64_t offset = 0;
  store.for_each([&](const Parameter& p) {
    tensors.push_back({{"name", p.name}, {"shape", p.value.shape()}, {"frozen", p.frozen}, {"offset", offset}});
    offset += 8 * p.value.numel();
  });
  const std::string header = nlohmann::json{{"tensors", tensors}}.dump();

  std::vector<unsigned char> out;
  out.reserve(8 + header.size() + offset);
  put_u64(out, header.size());
  out.insert(out.end(), header.begin(), header.end());
  store.for_each([&](const Parameter& p) {
    for (double x : p.value.data()) put_u64(out, std::bit_cast<std::uint64_t>(x));
  });
  return out;
}

std::vector<CheckpointEntry> decode_checkpoint(const std::vector<unsigned char>& bytes) {
  if (bytes.size() < 8) throw DataError("checkpoint truncated before header length");
  const std::uint64_t header_len = get_u64(bytes.data());
  if (header_len > bytes.size() - 8) throw DataError("checkpoint header length exceeds file size");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(header_len));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }
  const std::size_t payload = 8 + header_len;
  const std::size_t payload_len = bytes.size() - payload;

  std::vector<CheckpointEntry> entries;
  try {
    for (const auto& t : header.at("tensors")) {
      CheckpointEntry e;
      e.name = t.at("name").get<std::string>();
      e.shape = t.at("shape").get<Shape>();
      e.frozen = t.at("frozen").get<bool>();
      e.offset = t.at("offset").get<std::uint64_t>();
      const std::size_t n = shape_numel(e.shape);
      if (e.offset % 8 != 0 || e.offset > payload_len || n * 8 > payload_len - e.offset) {
        throw DataError("checkpoint tensor '" + e.name + "' payload out of range");
      }
      e.values.resize(n);
      for (std::size_t i = 0; i < n; ++i) {
        e.values[i] = std::bit_cast<double>(get_u64(bytes.data() + payload + e.offset + 8 * i));
      }
      entries.push_back(std::move(e));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed checkpoint header: ") + e.what());
  }
  return entries;
}

void save_checkpoint(const ParameterStore& store, const std::string& path) {
  const auto bytes = encode_checkpoint(store);
  write_file_atomic(path, std::string(bytes.begin(), bytes.end()));
}

std::vector<CheckpointEntry> read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint", path);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

void load_checkpoint(ParameterStore& store, const std::string& path) {
  auto entries = read_checkpoint(path);
  for (const auto& e : entries) {
    if (!store.contains(e.name)) throw DataError("checkpoint parameter '" + e.name + "' not in model");
    const Parameter& p = store.get(e.name);
    if (p.value.shape() != e.shape || p.frozen != e.frozen) {
      throw DataError("checkpoint parameter '" + e.name + "' has shape " + shape_str(e.shape) +
                      " but model expects " + shape_str(p.value.shape()));
    }
  }
  for (auto& e : entries) {
    store.get(e.name).value = Tensor(e.shape, std::move(e.values));
  }
}

}  // namespace hmmoe
