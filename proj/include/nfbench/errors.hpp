#pragma once

#include <stdexcept>
#include <string>

namespace nfbench {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// A non-finite value appeared during evaluation; carries the node index.
struct NumericalError : Error {
  NumericalError(const std::string& what, long node)
      : Error(what + " (node " + std::to_string(node) + ")"), node_index(node) {}
  long node_index;
};

/// An API contract was violated by the caller.
struct ContractViolation : Error {
  using Error::Error;
};

/// An unknown family, architecture, or off-grid hyperparameter was requested.
struct SpecError : Error {
  using Error::Error;
};

/// A dataset is missing, ill-typed, or inconsistent.
struct DataError : Error {
  using Error::Error;
};

struct InputError : Error {
  using Error::Error;
};

/// An iterative solve failed to reach tolerance.
struct ConvergenceError : Error {
  ConvergenceError(const std::string& what, long iterations, double residual)
      : Error(what + " after " + std::to_string(iterations) +
              " iterations (residual " + std::to_string(residual) + ")"),
        iterations(iterations),
        residual(residual) {}
  long iterations;
  double residual;
};

struct MomentsUnavailable : Error {
  using Error::Error;
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& what, const std::string& key = "")
      : Error(key.empty() ? what : what + " (at \"" + key + "\")"), key_path(key) {}
  std::string key_path;
};

struct TrainingDiverged : Error {
  using Error::Error;
};

struct DegenerateRanks : Error {
  using Error::Error;
};

}  // namespace nfbench
