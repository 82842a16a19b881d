// Copyright 2026 The capdetect Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace capdetect {

/// Root of every error raised by the library. Callers that only need to
/// distinguish "our failure" from "anything else" catch this.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not fit the operation.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Axis or element index outside the valid range.
class IndexError : public Error {
 public:
  using Error::Error;
};

/// Caller violated a documented precondition.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf where a finite value is required.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration value (unknown name, duplicate, out of range).
class ConfigError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Data violates a declared invariant. Carries the offending record index
/// when one exists.
class InvariantError : public Error {
 public:
  static constexpr std::size_t kNoRecord = static_cast<std::size_t>(-1);

  explicit InvariantError(const std::string& what, std::size_t record = kNoRecord)
      : Error(record == kNoRecord ? what : "record " + std::to_string(record) + ": " + what),
        record_(record) {}

  std::size_t record() const { return record_; }

 private:
  std::size_t record_;
};

class ParseError : public InvariantError {
 public:
  using InvariantError::InvariantError;
};

/// Serialized file is unreadable. Subclasses tell the caller why.
class FormatError : public Error {
 public:
  using Error::Error;
};

class BadMagicError : public FormatError {
 public:
  using FormatError::FormatError;
};

class VersionMismatchError : public FormatError {
 public:
  using FormatError::FormatError;
};

class TruncatedFileError : public FormatError {
 public:
  using FormatError::FormatError;
};

/// Metric requested over zero samples.
class EmptyEvaluationError : public Error {
 public:
  using Error::Error;
};

}  // namespace capdetect
