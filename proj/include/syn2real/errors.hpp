#pragma once

#include <stdexcept>
#include <string>

namespace s2r {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Invalid configuration values (bad ranges, empty palettes, unknown layers).
struct ConfigError : Error {
  using Error::Error;
};

// Problems with datasets on disk or in memory (missing files, empty sets).
struct DataError : Error {
  using Error::Error;
};

// Malformed dataset layout: bad manifest, image/mask mismatch, bad class ids.
struct FormatError : DataError {
  using DataError::DataError;
};

// Tensor/array dimensions do not satisfy an operation's contract.
struct ShapeError : DataError {
  using DataError::DataError;
};

// Requested spatial size is out of range (patch larger than image, etc.).
struct SizeError : DataError {
  using DataError::DataError;
};

struct IndexError : DataError {
  using DataError::DataError;
};

struct LengthError : DataError {
  using DataError::DataError;
};

// Raised when a training loss becomes non-finite; training is aborted after
// writing a diagnostic checkpoint.
struct TrainingDiverged : Error {
  using Error::Error;
};

}  // namespace s2r
