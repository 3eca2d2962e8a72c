#pragma once

#include <stdexcept>
#include <string>

namespace griddet {

// Error categories map one-to-one onto CLI exit codes.
enum class ErrorKind { kConfig = 2, kData = 3, kInternal = 4 };

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, std::string category, const std::string& what)
      : std::runtime_error(what), kind_(kind), category_(std::move(category)) {}

  ErrorKind kind() const { return kind_; }
  const std::string& category() const { return category_; }

 private:
  ErrorKind kind_;
  std::string category_;
};

// Malformed bytes or syntax in an input file.
class FormatError : public Error {
 public:
  explicit FormatError(const std::string& what) : Error(ErrorKind::kData, "format", what) {}
};

// Well-formed input whose values break a domain invariant.
class ValidationError : public Error {
 public:
  explicit ValidationError(const std::string& what)
      : Error(ErrorKind::kData, "validation", what) {}
};

// Bad configuration: unknown keys, inconsistent channels, missing resources.
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error(ErrorKind::kConfig, "config", what) {}
};

class InvariantError : public Error {
 public:
  explicit InvariantError(const std::string& what)
      : Error(ErrorKind::kInternal, "invariant", what) {}
};

}  // namespace griddet
