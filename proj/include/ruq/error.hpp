#pragma once

#include <stdexcept>
#include <string>

namespace ruq {

// Failure categories; the CLI maps each one to its own exit code.
enum class ErrorKind { config, data, numeric, io };

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(ErrorKind::config, what) {}
};

class DataError : public Error {
 public:
  explicit DataError(const std::string& what) : Error(ErrorKind::data, what) {}
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what) : Error(ErrorKind::numeric, what) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error(ErrorKind::io, what) {}
};

/// Tensor extents do not conform for a primitive.
class ShapeError : public NumericError {
 public:
  explicit ShapeError(const std::string& what) : NumericError(what) {}
};

/// Input outside a primitive's domain (log of a non-positive value, ...).
class DomainError : public NumericError {
 public:
  explicit DomainError(const std::string& what) : NumericError(what) {}
};

}  // namespace ruq
