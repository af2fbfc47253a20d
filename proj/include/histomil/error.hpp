/*
 * Copyright 2026 The HistoMIL Authors.
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace histomil {

// Base class of every error raised by the library. The CLI maps
// ValidationError subclasses to exit code 2 and everything else to 1.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad user input: malformed files, schema violations, impossible requests.
class ValidationError : public Error {
 public:
  using Error::Error;
};

class EmptyGridError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class StainEstimationFailed : public Error {
 public:
  using Error::Error;
};

class FormatError : public ValidationError {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : ValidationError(what + " (at byte offset " + std::to_string(offset) +
                        ")"),
        offset_(offset) {}
  std::uint64_t offset() const { return offset_; }

 private:
  std::uint64_t offset_;
};

class ParseError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class DuplicateError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class DimensionError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

class MaskedOutError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class StratificationError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class RangeError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class UndefinedMetric : public Error {
 public:
  using Error::Error;
};

class UnsupportedAggregation : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

}  // namespace histomil
