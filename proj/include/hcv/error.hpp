#pragma once

#include <stdexcept>
#include <string>

namespace hcv {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed or inconsistent inputs: shape mismatches, bad labels, bad files.
class InvalidInput : public Error {
 public:
  using Error::Error;
};

/// Non-finite values, failed factorizations, degenerate bandwidths.
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// A configuration that cannot be run (field-level message).
class ConfigError : public Error {
 public:
  using Error::Error;
};

namespace detail {

inline void require(bool condition, const std::string& message) {
  if (!condition) throw InvalidInput(message);
}

}  // namespace detail
}  // namespace hcv
