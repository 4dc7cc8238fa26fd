#pragma once

#include <stdexcept>
#include <string>

namespace vitdf {

/// Base of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class DataError : public Error {
 public:
  using Error::Error;
};

/// Raised by the optimizer when a gradient holds NaN/Inf; no parameter is touched.
class NonFiniteGradientError : public Error {
 public:
  NonFiniteGradientError(std::string parameter)
      : Error("non-finite gradient for parameter '" + parameter + "'"), parameter_(std::move(parameter)) {}

  const std::string& parameter() const noexcept { return parameter_; }

 private:
  std::string parameter_;
};

}  // namespace vitdf
