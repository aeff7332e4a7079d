// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace dne {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes that do not fit an operation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf where a finite value is required.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration values (zero heads, indivisible image size, ...).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Caller broke an API precondition (non-scalar backward root, missing
/// cached intermediates, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Malformed file contents.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Task stream inconsistency, e.g. overlapping class sets.
class StreamError : public Error {
 public:
  using Error::Error;
};

}  // namespace dne
