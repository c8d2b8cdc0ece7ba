// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace crnn {

/// Root of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes or feature dimensions disagree.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Argument outside the mathematical domain of a function.
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Malformed or insufficient input data (too-short audio, all-masked batch).
class InputError : public Error {
 public:
  using Error::Error;
};

/// Data files could not be paired or parsed.
class IngestionError : public Error {
 public:
  using Error::Error;
};

/// Data parsed but violates a value constraint (annotation outside [-1, 1]).
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Backward called without a matching forward.
class StateError : public Error {
 public:
  using Error::Error;
};

/// Invalid hyperparameter or configuration value.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Corrupt, truncated or incompatible checkpoint file.
class CheckpointError : public Error {
 public:
  using Error::Error;
};

/// Training produced a non-finite loss.
class NumericalError : public Error {
 public:
  using Error::Error;
};

}  // namespace crnn
