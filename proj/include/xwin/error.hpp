#pragma once

#include <stdexcept>
#include <string>

namespace xwin {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed input arguments (bad shapes, out-of-range parameters).
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// File decode / encode failures.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Non-finite activations or losses.
class NumericalError : public Error {
 public:
  using Error::Error;
};

inline void require(bool cond, const std::string& what) {
  if (!cond) throw InvalidArgument(what);
}

}  // namespace xwin
