#pragma once

#include <stdexcept>
#include <string>

namespace gridfill {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor or batch shapes disagree.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Invalid parameters or configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed or inconsistent data on disk or in memory.
class DataError : public Error {
 public:
  using Error::Error;
};

/// A denoiser backend (local or remote) failed.
class BackendError : public Error {
 public:
  using Error::Error;
};

/// Loss or parameters became non-finite.
class NumericalError : public Error {
 public:
  using Error::Error;
};

}  // namespace gridfill
