#pragma once

#include <stdexcept>
#include <string>

namespace anc {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual const char* kind() const noexcept { return "error"; }
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "invalid-argument"; }
};

class IoError : public Error {
 public:
  IoError(const std::string& what, std::string path)
      : Error(what + ": " + path), path_(std::move(path)) {}
  const std::string& path() const noexcept { return path_; }
  const char* kind() const noexcept override { return "io-error"; }

 private:
  std::string path_;
};

class FormatError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "format-error"; }
};

class NumericError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "numeric-error"; }
};

class GenerationError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "generation-error"; }
};

}  // namespace anc
