#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace rmc {

// Every failure raised by the library derives from Error and carries a short
// machine-readable kind so the CLI can emit a structured error record.
class Error : public std::runtime_error {
 public:
  Error(std::string_view kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  std::string_view kind() const noexcept { return kind_; }

 private:
  std::string_view kind_;
};

// Mismatched tensor extents.
class DimensionError : public Error {
 public:
  explicit DimensionError(const std::string& m) : Error("dimension", m) {}
};

// A caller violated a documented precondition.
class ContractError : public Error {
 public:
  explicit ContractError(const std::string& m) : Error("contract", m) {}
};

// Invalid configuration value.
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& m) : Error("config", m) {}
};

class IndexError : public Error {
 public:
  explicit IndexError(const std::string& m) : Error("index", m) {}
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& m) : Error("numeric", m) {}
};

class InputError : public Error {
 public:
  explicit InputError(const std::string& m) : Error("input", m) {}
};

class ParseError : public Error {
 public:
  explicit ParseError(const std::string& m) : Error("parse", m) {}
};

class GenerationError : public Error {
 public:
  explicit GenerationError(const std::string& m) : Error("generation", m) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& m) : Error("io", m) {}
};

// A pipeline step ran before the artifact it consumes was produced.
class DependencyError : public Error {
 public:
  explicit DependencyError(const std::string& m) : Error("dependency", m) {}
};

// Ratio metric with a zero denominator.
class UndefinedMetricError : public Error {
 public:
  explicit UndefinedMetricError(const std::string& m) : Error("undefined_metric", m) {}
};

}  // namespace rmc
