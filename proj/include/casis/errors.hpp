#pragma once

#include <stdexcept>
#include <string>

namespace casis {

/// Tensor shapes disagree; the message names the offending axis.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A module or run configuration is inconsistent.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// An argument is outside its documented domain.
class ArgumentError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// The API was called in a way it does not support (e.g. backward on a non-scalar).
class UsageError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Input data (mask files, images, datasets) violates its format.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Checkpoint cannot be read: bad magic, truncation, CRC mismatch, missing tensor.
class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A loss or gradient became NaN/Inf during training.
class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace casis
