#pragma once

#include <stdexcept>
#include <string>

namespace saliprune {

/// Base class for all library errors. `exit_code()` maps onto the CLI's
/// exit status convention.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what, int code = 1) : std::runtime_error(what), code_(code) {}
  int exit_code() const { return code_; }

 private:
  int code_;
};

class InvalidParameter : public Error {
 public:
  explicit InvalidParameter(const std::string& what) : Error("invalid parameter: " + what, 2) {}
};

class ShapeMismatch : public Error {
 public:
  explicit ShapeMismatch(const std::string& what) : Error("shape mismatch: " + what, 2) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error("config error: " + what, 2) {}
};

class PrerequisiteError : public Error {
 public:
  explicit PrerequisiteError(const std::string& what) : Error("missing prerequisite: " + what, 3) {}
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what) : Error("numeric failure: " + what, 4) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error("io error: " + what, 1) {}
};

}  // namespace saliprune
