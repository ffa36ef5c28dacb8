#pragma once

#include <stdexcept>
#include <string>

namespace pepr {

// Bad input or configuration. The CLI maps this to exit status 1.
class ValidationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Failure while doing valid work (I/O, divergence). Exit status 2.
class RuntimeFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public RuntimeFailure {
 public:
  IoError(const std::string& what, std::string path)
      : RuntimeFailure(what + ": " + path), path_(std::move(path)) {}
  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};

// Raised when a loss or gradient becomes non-finite during training.
class DivergenceError : public RuntimeFailure {
 public:
  using RuntimeFailure::RuntimeFailure;
};

inline void require(bool ok, const std::string& message) {
  if (!ok) throw ValidationError(message);
}

}  // namespace pepr
