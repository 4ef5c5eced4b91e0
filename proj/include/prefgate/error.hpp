#pragma once

#include <stdexcept>
#include <string>

namespace prefgate {

// Bad input data, bad files, overlength sequences. CLI exit code 2.
struct data_error : std::runtime_error {
  explicit data_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Caller misuse: invalid arguments or configuration. CLI exit code 1.
struct usage_error : std::runtime_error {
  explicit usage_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Non-finite values where finite ones are required. CLI exit code 2.
struct numeric_error : std::runtime_error {
  explicit numeric_error(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace prefgate
