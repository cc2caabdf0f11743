#pragma once

#include <stdexcept>
#include <string>

namespace fxmm {

// Category of a reported failure. CLI maps every category to a nonzero
// exit code with a one-line message; tests match on it.
enum class ErrorKind {
  shape,    // tensor extents inconsistent with an operation
  config,   // invalid configuration value or key
  index,    // id/index out of range
  parse,    // malformed input file
  io,       // filesystem / serialization failure
  state,    // operation not valid in the current mode
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

inline Error shape_error(const std::string& msg) { return Error(ErrorKind::shape, msg); }
inline Error config_error(const std::string& msg) { return Error(ErrorKind::config, msg); }
inline Error index_error(const std::string& msg) { return Error(ErrorKind::index, msg); }
inline Error parse_error(const std::string& msg) { return Error(ErrorKind::parse, msg); }
inline Error io_error(const std::string& msg) { return Error(ErrorKind::io, msg); }
inline Error state_error(const std::string& msg) { return Error(ErrorKind::state, msg); }

}  // namespace fxmm
