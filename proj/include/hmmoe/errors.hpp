// Copyright 2026 The HMMoE Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace hmmoe {

enum class ErrorKind {
  Dimension,
  EmptySequence,
  Configuration,
  Contract,
  Data,
  Numeric,
  Io,
  Determinism,
};

/// Base of every exception thrown by the library. The kind maps one-to-one
/// onto the C API status codes.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

class DimensionError : public Error {
 public:
  explicit DimensionError(const std::string& what) : Error(ErrorKind::Dimension, what) {}
};

class EmptySequenceError : public Error {
 public:
  explicit EmptySequenceError(const std::string& what) : Error(ErrorKind::EmptySequence, what) {}
};

/// Invalid configuration. `field` carries the dotted path of the offending
/// key when the error comes from a parsed document ("hmmoe.r").
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what, std::string field = {})
      : Error(ErrorKind::Configuration, field.empty() ? what : field + ": " + what),
        field_(std::move(field)),
        message_(what) {}
  const std::string& field() const noexcept { return field_; }
  // The message without the field prefix.
  const std::string& message() const noexcept { return message_; }

 private:
  std::string field_;
  std::string message_;
};

class ContractError : public Error {
 public:
  explicit ContractError(const std::string& what) : Error(ErrorKind::Contract, what) {}
};

class DataError : public Error {
 public:
  explicit DataError(const std::string& what) : Error(ErrorKind::Data, what) {}
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what) : Error(ErrorKind::Numeric, what) {}
};

class IoError : public Error {
 public:
  IoError(const std::string& what, std::string path)
      : Error(ErrorKind::Io, what + ": " + path), path_(std::move(path)) {}
  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};

class DeterminismError : public Error {
 public:
  explicit DeterminismError(const std::string& what) : Error(ErrorKind::Determinism, what) {}
};

}  // namespace hmmoe
