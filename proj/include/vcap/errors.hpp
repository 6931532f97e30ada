#pragma once

#include <stdexcept>
#include <string>

namespace vcap {

// Data / file-format problems. The CLI maps these to exit code 2.
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct FormatError : DataError {
  using DataError::DataError;
};

struct LengthError : DataError {
  using DataError::DataError;
};

struct ValueError : DataError {
  using DataError::DataError;
};

struct IoError : DataError {
  using DataError::DataError;
};

struct ShapeError : DataError {
  using DataError::DataError;
};

// Non-finite loss or gradient. Exit code 3.
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Bad command line. Exit code 1.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace vcap
