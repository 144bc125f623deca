#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace ctxrefine {

// Base for every error raised by the library. Item-level failures inside a
// batch are caught and recorded; these only escape from whole-run operations.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ValidationError : public Error {
 public:
  using Error::Error;
};

class IngestError : public Error {
 public:
  IngestError(const std::string& what, std::size_t line)
      : Error(line ? what + " (line " + std::to_string(line) + ")" : what), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class TemplateError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class StageOrderError : public Error {
 public:
  using Error::Error;
};

class BudgetExceeded : public Error {
 public:
  using Error::Error;
};

// Transient backend failure that persisted through every retry.
class TransportError : public Error {
 public:
  TransportError(const std::string& what, int attempts)
      : Error(what + " after " + std::to_string(attempts) + " attempt(s)"), attempts_(attempts) {}
  int attempts() const noexcept { return attempts_; }

 private:
  int attempts_;
};

// Non-retryable rejection (HTTP 4xx other than 408/429).
class PermanentError : public Error {
 public:
  PermanentError(const std::string& what, int status) : Error(what), status_(status) {}
  int status() const noexcept { return status_; }

 private:
  int status_;
};

// The backend answered but the payload is unusable.
class ProtocolError : public Error {
 public:
  using Error::Error;
};

}  // namespace ctxrefine
