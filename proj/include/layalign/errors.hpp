// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace layalign {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible tensor extents.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A caller broke an operation's precondition (non-scalar loss, index out of range, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Bad user data: out-of-vocabulary ids, malformed corpus records.
class InputError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration, unknown keys, digest mismatches.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values in activations, gradients or losses.
class NumericError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace layalign
