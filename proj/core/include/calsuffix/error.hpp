#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace calsuffix {

// Base for every error the library raises. Callers that only care about
// "something went wrong" catch this; the CLI maps subclasses to exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Every vocabulary column is masked, so no suffix token can be chosen.
class AllForbidden : public Error {
 public:
  AllForbidden() : Error("forbid mask excludes every token") {}
};

class UnknownToken : public Error {
 public:
  UnknownToken(const std::string& text, std::size_t offset);
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

class SchemaError : public Error {
 public:
  SchemaError(std::size_t line, const std::string& what);
  // 1-based line in the source file.
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

class InsufficientData : public Error {
 public:
  using Error::Error;
};

class LengthExceeded : public Error {
 public:
  LengthExceeded(std::size_t length, std::size_t limit);
};

class FitFailed : public Error {
 public:
  FitFailed(double accuracy, double floor);
  double accuracy() const { return accuracy_; }

 private:
  double accuracy_;
};

class NonFiniteLoss : public Error {
 public:
  using Error::Error;
};

class VocabularyGap : public Error {
 public:
  using Error::Error;
};

class MismatchedRuns : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Configuration problems detected before any compute starts.
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace calsuffix
