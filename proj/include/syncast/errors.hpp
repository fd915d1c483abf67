#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace syncast {

// Base class for every error raised by the library. The CLI maps these to exit code 1.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Violated precondition on an argument (shape, range, count).
class ParameterError : public Error {
 public:
  using Error::Error;
};

// Malformed file header or document.
class FormatError : public Error {
 public:
  using Error::Error;
};

// Data content violates an invariant (non-finite values, out of range).
class DataError : public Error {
 public:
  using Error::Error;
};

// Non-finite value produced during training or sampling.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Inconsistent run configuration (missing stage, wrong role marker, empty archive).
class ConfigError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Failure inside one pipeline stage; what() starts with the stage name.
class StageError : public Error {
 public:
  StageError(std::string stage, const std::string& message)
      : Error(stage + ": " + message), stage_(std::move(stage)) {}
  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

}  // namespace syncast
