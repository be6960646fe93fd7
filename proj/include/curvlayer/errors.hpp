#pragma once
#include <stdexcept>
#include <string>

namespace curvlayer {

// Exit codes used by the command line front end.
enum ExitCode {
  kExitOk = 0,
  kExitConfig = 2,     // bad config / malformed input file
  kExitNumerical = 3,  // solver failure, non-finite loss
  kExitPlan = 4,       // no feasible layer plan
};

struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct NumericalError : std::runtime_error {
  explicit NumericalError(const std::string& msg) : std::runtime_error(msg) {}
};

struct PlanError : std::runtime_error {
  explicit PlanError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace curvlayer
