#pragma once

#include <stdexcept>
#include <string>

namespace gaitq {

enum class ErrorKind {
  Shape,       // tensor dimensions disagree
  Validation,  // bad argument or configuration
  Numeric,     // overflow, NaN, non-positive variance
  Io,          // file access or malformed input
};

/// Single exception type for the library. The kind drives CLI exit codes.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) {
  throw Error(kind, what);
}

inline void require(bool cond, ErrorKind kind, const std::string& what) {
  if (!cond) fail(kind, what);
}

}  // namespace gaitq
