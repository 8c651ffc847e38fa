#pragma once

#include <stdexcept>
#include <string>

namespace vprop {

/// Process exit codes used by the command-line driver.
enum class ExitCode : int { kOk = 0, kValidation = 1, kProtocol = 2, kTraining = 3 };

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual ExitCode exit_code() const noexcept { return ExitCode::kValidation; }
};

/// Bad input values or shapes handed to an operation.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Tensor/parameter shape disagreement.
class DimensionError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

/// Operation called in the wrong lifecycle state (e.g. backward before forward).
class StateError : public Error {
 public:
  using Error::Error;
};

/// Unknown preset or malformed configuration file.
class ConfigError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class KinematicsError : public Error {
 public:
  using Error::Error;
};

/// Checkpoint or dataset could not be read back.
class LoadError : public Error {
 public:
  using Error::Error;
};

/// Data-split misuse: a split consumed by the wrong training stage, or overlapping splits.
class ProtocolError : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const noexcept override { return ExitCode::kProtocol; }
};

/// Non-finite loss or gradient during optimization.
class TrainingError : public Error {
 public:
  using Error::Error;
  ExitCode exit_code() const noexcept override { return ExitCode::kTraining; }
};

}  // namespace vprop
