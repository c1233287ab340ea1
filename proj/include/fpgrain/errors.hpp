#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace fpgrain {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A documented precondition of an operation was not met by the caller.
class PreconditionError : public Error {
 public:
  using Error::Error;
};

/// One of the modelling assumptions A1-A4 is violated by the inputs.
class AssumptionError : public Error {
 public:
  AssumptionError(std::string assumption, const std::string& what)
      : Error(assumption + ": " + what), assumption_(std::move(assumption)) {}
  const std::string& assumption() const noexcept { return assumption_; }

 private:
  std::string assumption_;
};

/// A numerical procedure failed (singular solve, non-convergence, ...).
class NumericalError : public Error {
 public:
  using Error::Error;
};

}  // namespace fpgrain
