#pragma once

#include <stdexcept>
#include <string>

namespace docground {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed, missing or inconsistent input data (files, records, references).
class DataError : public Error {
 public:
  using Error::Error;
};

/// Invalid parameters or incompatible combinations of artifacts.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values or diverging optimisation.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace docground
