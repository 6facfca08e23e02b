#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace hetfl {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ShapeError : Error {
  using Error::Error;
};

// An Input node had no binding (or a binding of the wrong shape).
struct BindingError : Error {
  using Error::Error;
};

// Non-finite value produced by evaluation or training.
struct NumericError : Error {
  using Error::Error;
};

// Malformed differentiation request: non-scalar root, unreachable name.
struct GraphError : Error {
  using Error::Error;
};

struct ConfigError : Error {
  using Error::Error;
};

struct DomainError : Error {
  DomainError(const std::string& what, std::size_t row, std::size_t column)
      : Error(what + " (row " + std::to_string(row) + ", column " + std::to_string(column) + ")"),
        row(row),
        column(column) {}
  std::size_t row;
  std::size_t column;
};

struct ParseError : Error {
  ParseError(const std::string& what, std::size_t line)
      : Error(what + " at line " + std::to_string(line)), line(line) {}
  std::size_t line;
};

}  // namespace hetfl
