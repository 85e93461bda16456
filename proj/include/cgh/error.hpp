#pragma once

#include <stdexcept>
#include <string>

namespace cgh {

// Error classes map onto CLI exit codes (see tools/cgh.cpp).

/// Invalid configuration or precondition violated by the caller.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Physical formula evaluated outside its domain (e.g. pitch <= wavelength/2).
class DomainError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

/// Tensor or field dimensions that do not agree.
class DimensionError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

/// File system or decoding failure.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed weight file. The message starts with a stable tag
/// ("bad magic", "version mismatch", "truncated", "checksum", "dimension").
class FormatError : public IoError {
 public:
  using IoError::IoError;
};

/// NaN/Inf encountered where finite values are required.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace cgh
