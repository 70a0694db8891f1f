#pragma once

#include <stdexcept>
#include <string>

namespace maxstyle {

// Every error carries a short machine-parsable code; the CLI prints it as the
// line prefix ("E_DIM: ...").
class Error : public std::runtime_error {
 public:
  Error(std::string code, const std::string& what)
      : std::runtime_error(what), code_(std::move(code)) {}
  const std::string& code() const noexcept { return code_; }

 private:
  std::string code_;
};

class DimensionError : public Error {
 public:
  explicit DimensionError(const std::string& what) : Error("E_DIM", what) {}
};

class ValidationError : public Error {
 public:
  explicit ValidationError(const std::string& what) : Error("E_VALIDATION", what) {}
};

class ConfigurationError : public Error {
 public:
  explicit ConfigurationError(const std::string& what) : Error("E_CONFIG", what) {}
};

class LookupError : public Error {
 public:
  explicit LookupError(const std::string& what) : Error("E_LOOKUP", what) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error("E_IO", what) {}
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what) : Error("E_NAN", what) {}
};

}  // namespace maxstyle
