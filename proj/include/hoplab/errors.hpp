// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace hoplab {

// Exit codes of the command-line tool. Every error type below maps onto one.
enum class ExitCode : int {
    ok = 0,
    failure = 1,
    config = 2,
    data = 3,
    numeric = 4,
};

class Error : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
    virtual ExitCode exit_code() const noexcept { return ExitCode::failure; }
};

class ConfigError : public Error {
  public:
    using Error::Error;
    ExitCode exit_code() const noexcept override { return ExitCode::config; }
};

// Data-side failures: malformed files, unknown ids, out-of-range indices.
class DataError : public Error {
  public:
    using Error::Error;
    ExitCode exit_code() const noexcept override { return ExitCode::data; }
};

class LookupError : public DataError { using DataError::DataError; };
class IndexError : public DataError { using DataError::DataError; };
class ParseError : public DataError { using DataError::DataError; };
class SamplingError : public DataError { using DataError::DataError; };
class CheckpointError : public DataError { using DataError::DataError; };
class IoError : public DataError { using DataError::DataError; };
class PlanError : public DataError { using DataError::DataError; };
class LengthError : public DataError { using DataError::DataError; };
class PreconditionError : public DataError { using DataError::DataError; };
class UndefinedStatisticError : public DataError { using DataError::DataError; };

class NumericError : public Error {
  public:
    using Error::Error;
    ExitCode exit_code() const noexcept override { return ExitCode::numeric; }
};

class ShapeError : public NumericError { using NumericError::NumericError; };
class DegenerateAttentionError : public NumericError { using NumericError::NumericError; };

class TrainingError : public NumericError {
  public:
    TrainingError(const std::string& what, long step) : NumericError(what), step_(step) {}
    long step() const noexcept { return step_; }

  private:
    long step_;
};

}  // namespace hoplab
