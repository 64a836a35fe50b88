#pragma once

#include <stdexcept>
#include <string>

namespace gama {

// Base for every error raised by the library. The CLI maps each kind onto an
// exit code, so new kinds must be added to tools/gama.cpp as well.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class ValidationError : public Error {
 public:
  using Error::Error;
};

class ContractError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

class InternalError : public Error {
 public:
  using Error::Error;
};

class ExternalServiceError : public Error {
 public:
  using Error::Error;
};

// Errors that keep the offending raw text around for diagnostics.
class RawTextError : public Error {
 public:
  RawTextError(const std::string& what, std::string raw)
      : Error(what), raw_(std::move(raw)) {}
  const std::string& raw() const noexcept { return raw_; }

 private:
  std::string raw_;
};

class SynthesisError : public RawTextError {
 public:
  using RawTextError::RawTextError;
};

class ParseError : public RawTextError {
 public:
  using RawTextError::RawTextError;
};

}  // namespace gama
