#pragma once

#include <stdexcept>
#include <string>

namespace diagrnn {

// Error taxonomy used across the library. The CLI maps these onto exit
// codes: anything below is a validation/domain failure (exit 1); bad
// command-line syntax is handled separately (exit 2).
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Tensor shapes do not line up for the requested operation.
struct DimensionError : Error {
  using Error::Error;
};

// A configuration value is outside its legal range (K=0, keep_prob>1, ...).
struct ConfigError : Error {
  using Error::Error;
};

// A numeric input is outside the operation's documented domain.
struct DomainError : Error {
  using Error::Error;
};

// The API was called in a way its contract forbids (non-scalar backward,
// ranking with too few completed trials, evaluating an empty split).
struct UsageError : Error {
  using Error::Error;
};

// A file does not conform to its declared format.
struct ParseError : Error {
  using Error::Error;
};

// The data itself is unusable (e.g. a dataset with no active pitches).
struct DataError : Error {
  using Error::Error;
};

}  // namespace diagrnn
