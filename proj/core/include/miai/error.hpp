#pragma once

#include <stdexcept>
#include <string>

namespace miai {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible tensor or distribution extents.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf produced by a primitive, or a numerically invalid input.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Malformed or invalid user-supplied configuration / arguments.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// File system failures and malformed files.
class IoError : public Error {
 public:
  using Error::Error;
};

/// Training produced no finite loss for a whole epoch.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

}  // namespace miai
