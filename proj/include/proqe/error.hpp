#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace proqe {

// Base of every exception the library throws. The C API maps subclasses to
// status codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
};

// Malformed input text: TSV lines, token sequences, config files, JSON records.
// `location` is a 1-based line number or a 0-based token position depending on
// the source; 0 when unknown.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t location = 0)
      : Error(what), location_(location) {}
  std::size_t location() const noexcept { return location_; }

 private:
  std::size_t location_;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Structural problems with a query graph (cycles, arity, dangling ids).
class QueryError : public Error {
 public:
  using Error::Error;
};

// Non-finite values during training or inference.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace proqe
