#pragma once

#include <stdexcept>
#include <string>

namespace mergeadapt {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shapes, fingerprints or lengths that do not line up.
class StructuralError : public Error {
 public:
  using Error::Error;
};

/// A precondition on an argument value was violated.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// A numeric routine produced a non-finite or otherwise unusable value.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Malformed artifact on disk (JSON / JSONL / CSV).
class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace mergeadapt
