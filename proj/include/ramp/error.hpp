#pragma once

#include <stdexcept>
#include <string>

namespace ramp {

/// Error categories surfaced across the library. The CLI maps each kind to a
/// distinct exit code.
enum class ErrorKind {
  dimension,
  index,
  contract,
  capacity,
  numeric,
  precondition,
  parse,
  validation,
  lookup,
  integrity,
  io,
  config,
};

const char* to_string(ErrorKind kind) noexcept;

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] void fail(ErrorKind kind, const std::string& what);

}  // namespace ramp
