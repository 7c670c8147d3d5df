#pragma once

#include <stdexcept>
#include <string>

namespace metassm {

// Error taxonomy shared by the library, the C surface and the CLI exit codes.
// Keep the categories coarse: callers dispatch on the type, not the message.

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Malformed or inconsistent configuration (bad field, unknown tag, ...).
struct ConfigError : Error {
  using Error::Error;
};

/// Filesystem and serialization failures.
struct IoError : Error {
  using Error::Error;
};

/// Non-finite values, diverging integrations, numerical breakdown.
struct NumericError : Error {
  using Error::Error;
};

/// Contract violations by the caller: shape mismatches, unknown dataset ids,
/// out-of-range requests, double backward, empty batches.
struct UsageError : Error {
  using Error::Error;
};

struct DimensionError : UsageError {
  using UsageError::UsageError;
};

struct LookupError : UsageError {
  using UsageError::UsageError;
};

}  // namespace metassm
