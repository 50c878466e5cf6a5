#pragma once

#include <stdexcept>
#include <string>

namespace srlvae {

// Base for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad user-supplied configuration: unknown keys, missing paths, invalid budgets.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Tensor shape or resolution mismatch.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Non-finite values, divergence, or other numerical failure during a run.
class NumericError : public Error {
 public:
  using Error::Error;
};

}  // namespace srlvae
