#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace eres {

/// Base for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Inconsistent tensor shapes handed to an op.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf produced by a forward op or found in a gradient.
class NumericFault : public Error {
 public:
  using Error::Error;
};

/// API used out of order (e.g. backward before forward).
class StateError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration value or unknown key.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// File could not be opened, read or written.
class IoError : public Error {
 public:
  using Error::Error;
};

/// Malformed binary input. Carries the byte offset where parsing stopped.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}

  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

}  // namespace eres
