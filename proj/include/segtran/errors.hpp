#pragma once

#include <stdexcept>
#include <string>

namespace segtran {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Incompatible tensor extents.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Invalid or inconsistent configuration value.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// API misuse: bad index, value not on the tape, and so on.
class UsageError : public Error {
 public:
  using Error::Error;
};

// Malformed serialized data.
class FormatError : public Error {
 public:
  using Error::Error;
};

// NaN or Inf where finite values are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace segtran
