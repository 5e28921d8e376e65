#pragma once

#include <stdexcept>
#include <string>

namespace buckle {

// Base of every error raised by the library. The CLI maps subclasses to exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ArgumentError : public Error {
 public:
  using Error::Error;
};

class GenerationError : public Error {
 public:
  using Error::Error;
};

class PreconditionError : public Error {
 public:
  using Error::Error;
};

// Inverted elements, exhausted step halvings, non-finite losses.
class NumericalError : public Error {
 public:
  using Error::Error;
};

// |max u_x| == |min u_x|, or no lateral deflection before the step cap.
class AmbiguousSampleError : public Error {
 public:
  using Error::Error;
};

class UnsupportedRepresentationError : public Error {
 public:
  using Error::Error;
};

class EmptyStructureError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

// Invalid or inconsistent pipeline configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Missing or stale output of an earlier pipeline stage.
class UpstreamError : public Error {
 public:
  using Error::Error;
};

}  // namespace buckle
