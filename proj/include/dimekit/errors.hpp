#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace dimekit {

/// Bad user-supplied data: malformed files, missing labels, unknown elements.
class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Coincident atoms or zero-length bonds.
class DegenerateGeometryError : public InputError {
 public:
  using InputError::InputError;
};

/// Parse failure carrying the 1-based line number of the offending line.
class ParseError : public InputError {
 public:
  ParseError(std::size_t line, const std::string& what)
      : InputError("line " + std::to_string(line) + ": " + what), line_(line), detail_(what) {}
  std::size_t line() const noexcept { return line_; }
  const std::string& detail() const noexcept { return detail_; }

 private:
  std::size_t line_;
  std::string detail_;
};

/// Caller broke an API precondition (shape mismatch, index out of range, ...).
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

inline void expects(bool cond, const char* what) {
  if (!cond) throw ContractViolation(what);
}

}  // namespace dimekit
