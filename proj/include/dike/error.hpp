#pragma once

#include <stdexcept>
#include <string>

namespace dike {

enum class ErrorKind {
  Dimension,      // shape/extent mismatch
  Config,         // invalid configuration or precondition
  Data,           // malformed or missing data (annotations, datasets)
  Factorization,  // matrix not SPD, singular system
  Divergence,     // non-finite loss during optimization
  Io,             // file read/write failure
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, std::string message)
      : std::runtime_error(std::move(message)), kind_(kind) {}
  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

}  // namespace dike
