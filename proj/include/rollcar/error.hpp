#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace rollcar {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed input text (bad number, wrong column count).  row is 1-based
// and counts the header as row 1.
class ParseError : public Error {
 public:
  ParseError(std::size_t row, const std::string& what)
      : Error("row " + std::to_string(row) + ": " + what), row_(row) {}
  std::size_t row() const { return row_; }

 private:
  std::size_t row_;
};

class ValidationError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Raised when a chain hits a non-finite or clamped-out quantity.
class NumericalError : public Error {
 public:
  NumericalError(const std::string& what, int chain = -1, long iteration = -1,
                 std::string snapshot = {})
      : Error(what), chain_(chain), iteration_(iteration), snapshot_(std::move(snapshot)) {}
  int chain() const { return chain_; }
  long iteration() const { return iteration_; }
  const std::string& snapshot() const { return snapshot_; }

 private:
  int chain_;
  long iteration_;
  std::string snapshot_;
};

}  // namespace rollcar
