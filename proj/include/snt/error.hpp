#pragma once

#include <stdexcept>
#include <string>

namespace snt {

// Error taxonomy shared by the library and the CLI exit codes:
// ConfigError/DataError -> 2, NumericError -> 3, CompatError -> 4.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DataError : std::runtime_error {
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

struct NumericError : std::runtime_error {
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

struct CompatError : std::runtime_error {
  explicit CompatError(const std::string& msg) : std::runtime_error(msg) {}
};

struct InternalError : std::logic_error {
  explicit InternalError(const std::string& msg) : std::logic_error(msg) {}
};

}  // namespace snt
