#pragma once

#include <stdexcept>
#include <string>

namespace madan {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor extents that do not fit the operation.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf or otherwise unusable numeric state.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Caller broke a documented precondition.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Dataset content problems (empty sets, bad labels, too few samples).
class DataError : public Error {
 public:
  using Error::Error;
};

/// Malformed binary or text file content.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Filesystem failures; the message carries the path.
class IoError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration keys or values.
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace madan
