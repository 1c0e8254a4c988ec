#pragma once

#include <stdexcept>
#include <string>

namespace d2p {

// Error categories map one-to-one onto CLI exit codes (see cli.hpp).
enum class ErrorKind {
  kUsage,          // bad flags, bad configuration values
  kData,           // missing/corrupt input files
  kNumeric,        // NaN, divergence
  kShape,          // dimension mismatches inside the tensor engine
  kContract,       // violated preconditions of an API call
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& what) : Error(ErrorKind::kShape, what) {}
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what)
      : Error(ErrorKind::kNumeric, what) {}
};

class ContractError : public Error {
 public:
  explicit ContractError(const std::string& what)
      : Error(ErrorKind::kContract, what) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(ErrorKind::kUsage, what) {}
};

class DataError : public Error {
 public:
  explicit DataError(const std::string& what) : Error(ErrorKind::kData, what) {}
};

}  // namespace d2p
