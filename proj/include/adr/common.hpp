// Shared error types and small helpers used across the library.
#pragma once

#include <cmath>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>

namespace adr {

// Bad data fed into an operator (NaN input, shape mismatch, missing file...).
class ValidationError : public std::runtime_error {
 public:
  explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

// A parameter outside its documented range (k out of [1, C], bad split...).
class ParameterError : public std::runtime_error {
 public:
  explicit ParameterError(const std::string& msg) : std::runtime_error(msg) {}
};

// Inconsistent configuration (channel mismatch, incompatible checkpoints...).
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

template <typename... Args>
std::string format_msg(Args&&... args) {
  std::ostringstream os;
  (os << ... << args);
  return os.str();
}

template <typename T>
bool is_finite_value(T v) {
  return std::isfinite(static_cast<double>(v));
}

}  // namespace adr
