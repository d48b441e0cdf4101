#pragma once

#include <stdexcept>
#include <string>

namespace xbarnas {

// Error categories map onto CLI exit codes: config -> 2, numeric -> 3,
// missing artifact -> 4.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

struct MissingArtifactError : std::runtime_error {
  explicit MissingArtifactError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace xbarnas
