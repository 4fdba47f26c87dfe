#pragma once

#include <stdexcept>
#include <string>

namespace tokenswap {

// Base for every error raised by the library. `kind()` is a short stable
// identifier used in the CLI's machine-parsable error line.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& message)
      : std::runtime_error(message), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

class DimensionError : public Error {
 public:
  explicit DimensionError(const std::string& m) : Error("dimension", m) {}
};

class ParameterError : public Error {
 public:
  explicit ParameterError(const std::string& m) : Error("parameter", m) {}
};

class OutOfBoundsError : public Error {
 public:
  explicit OutOfBoundsError(const std::string& m) : Error("out_of_bounds", m) {}
};

class VocabularyError : public Error {
 public:
  explicit VocabularyError(const std::string& m) : Error("vocabulary", m) {}
};

class NonFiniteError : public Error {
 public:
  explicit NonFiniteError(const std::string& m) : Error("non_finite", m) {}
};

class DisjointnessError : public Error {
 public:
  explicit DisjointnessError(const std::string& m) : Error("disjointness", m) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& m) : Error("io", m) {}
};

class FormatError : public Error {
 public:
  explicit FormatError(const std::string& m) : Error("format", m) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& m) : Error("config", m) {}
};

}  // namespace tokenswap
