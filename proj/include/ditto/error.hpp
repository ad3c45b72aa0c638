#pragma once

#include <stdexcept>
#include <string>

namespace ditto {

enum class ErrorCode {
  InvalidArgument,
  NonFinite,
  ShapeMismatch,
  Overflow,
  ScaleMismatch,
  MissingPrevious,
  ContextChanged,
  Capacity,
  CyclicGraph,
  Format,
  Io,
  Incompatible,
  InvariantViolation,
};

const char* to_string(ErrorCode code);

// Single exception type for the library; the CLI maps `code()` onto exit codes.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace ditto
