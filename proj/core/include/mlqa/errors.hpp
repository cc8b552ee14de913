#pragma once

#include <stdexcept>
#include <string>

namespace mlqa {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible tensor extents.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A caller broke an API precondition (non-scalar loss, missing gradient, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Bad user-provided input values (out-of-vocabulary ids, label ranges).
class InputError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf produced, or a statistic is undefined (constant vector correlation).
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration or variant/task pairing.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed file content. Carries the 1-based line number when known.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t line = 0)
      : Error(line == 0 ? what : "line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

/// A file references something that does not exist or does not match.
class IntegrityError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace mlqa
