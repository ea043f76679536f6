#pragma once

#include <stdexcept>
#include <string>

namespace specderef {

// Invalid experiment/machine configuration. The CLI maps this to exit code 2.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace specderef
