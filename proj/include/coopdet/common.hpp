#pragma once

#include <stdexcept>
#include <string>

namespace coopdet {

inline constexpr const char* kVersion = "0.1.0";

// Error taxonomy. Everything user-facing throws one of these; internal
// invariant violations use assert-style checks that also throw.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Bad caller-supplied argument (out-of-range agent count, empty list, ...).
struct ArgumentError : Error {
  using Error::Error;
};

// Rejection sampling or placement could not satisfy constraints.
struct GenerationError : Error {
  using Error::Error;
};

// Tensor/architecture shape mismatch.
struct ArchitectureError : Error {
  using Error::Error;
};

// Training diverged (NaN loss) or could not proceed.
struct TrainingError : Error {
  using Error::Error;
};

// Dataset / checkpoint / record file problems (version, checksum, schema).
struct LoadError : Error {
  using Error::Error;
};

// Declarative experiment config problems.
struct ConfigError : Error {
  using Error::Error;
};

// Metric preconditions violated (e.g. AP with zero ground-truth boxes).
struct MetricError : Error {
  using Error::Error;
};

inline void check(bool cond, const std::string& msg) {
  if (!cond) throw Error(msg);
}

inline void check_arg(bool cond, const std::string& msg) {
  if (!cond) throw ArgumentError(msg);
}

}  // namespace coopdet
