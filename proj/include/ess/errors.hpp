#pragma once

#include <stdexcept>
#include <string>

namespace ess {

// Error hierarchy used across the library. Each leaf class maps to one
// failure category so callers (and tests) can distinguish them.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Incompatible tensor shapes or an empty input where a dimension is required.
struct DimensionError : Error {
  using Error::Error;
};

// Invalid configuration value (unknown mode, non-positive count, bad key).
struct ConfigError : Error {
  using Error::Error;
};

// Out-of-range index (e.g. a target id >= vocabulary size).
struct IndexError : Error {
  using Error::Error;
};

// A call that violates an API contract (non-scalar loss, wrong window size).
struct ContractError : Error {
  using Error::Error;
};

// Non-finite values where finite ones are required (divergence, NaN grads).
struct NumericError : Error {
  using Error::Error;
};

// Malformed persisted artifact (arch file, checkpoint, config file).
struct ParseError : Error {
  using Error::Error;
};

// Unusable input data (empty corpus, empty split).
struct DataError : Error {
  using Error::Error;
};

// Bytes that do not decode as UTF-8 text.
struct EncodingError : DataError {
  using DataError::DataError;
};

}  // namespace ess
