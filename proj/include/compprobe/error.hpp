#pragma once

#include <stdexcept>
#include <string>

namespace compprobe {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed question text. `column` is the 1-based character position at
// which the parser gave up (one past the end for premature end of input).
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t column)
      : Error("parse error at offset " + std::to_string(column) + ": " + what),
        column_(column) {}
  std::size_t column() const { return column_; }

 private:
  std::size_t column_;
};

class ArityError : public Error {
 public:
  using Error::Error;
};

class DivisionByZeroError : public Error {
 public:
  DivisionByZeroError() : Error("division by zero") {}
};

class ExhaustionError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

class VersionError : public FormatError {
 public:
  using FormatError::FormatError;
};

class ChecksumError : public FormatError {
 public:
  using FormatError::FormatError;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class CheckpointError : public Error {
 public:
  using Error::Error;
};

class ConfigMismatchError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

}  // namespace compprobe
