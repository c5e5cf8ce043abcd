#ifndef FISHERPRUNE_ERROR_HPP
#define FISHERPRUNE_ERROR_HPP

#include <stdexcept>
#include <string>

namespace fisherprune {

enum class ErrorKind {
  Shape,      // tensor extents disagree
  Schema,     // malformed model / config / report document
  Data,       // unreadable or inconsistent dataset
  Numerical,  // non-finite loss, solver failure, degenerate statistics
  Usage,      // bad arguments to an operation or the CLI
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

/// CLI exit code for an error kind: 2 usage, 3 data, 4 numerical.
inline int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Usage:
      return 2;
    case ErrorKind::Numerical:
      return 4;
    default:
      return 3;
  }
}

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) {
  throw Error(kind, what);
}

inline void require(bool cond, ErrorKind kind, const std::string& what) {
  if (!cond) fail(kind, what);
}

}  // namespace fisherprune

#endif  // FISHERPRUNE_ERROR_HPP
