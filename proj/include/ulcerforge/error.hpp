#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace ulcerforge {

// Machine-parsable failure category; the CLI prints it verbatim.
enum class ErrorKind {
  Config,
  Dimension,
  Index,
  Usage,
  Numeric,
  Io,
  Parse,
  NotFound,
  Conflict,
};

std::string_view to_string(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& m) : Error(ErrorKind::Config, m) {}
};

class DimensionError : public Error {
 public:
  explicit DimensionError(const std::string& m) : Error(ErrorKind::Dimension, m) {}
};

class IndexError : public Error {
 public:
  explicit IndexError(const std::string& m) : Error(ErrorKind::Index, m) {}
};

class UsageError : public Error {
 public:
  explicit UsageError(const std::string& m) : Error(ErrorKind::Usage, m) {}
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& m) : Error(ErrorKind::Numeric, m) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& m) : Error(ErrorKind::Io, m) {}
};

class ParseError : public Error {
 public:
  explicit ParseError(const std::string& m) : Error(ErrorKind::Parse, m) {}
};

class NotFoundError : public Error {
 public:
  explicit NotFoundError(const std::string& m) : Error(ErrorKind::NotFound, m) {}
};

class ConflictError : public Error {
 public:
  explicit ConflictError(const std::string& m) : Error(ErrorKind::Conflict, m) {}
};

}  // namespace ulcerforge
