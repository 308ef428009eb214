#pragma once

#include <stdexcept>
#include <string>

namespace stnyolo {

/// Base for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes or model geometry that do not fit together.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A value outside its documented domain (out-of-range box, non-finite theta, ...).
class ValueError : public Error {
 public:
  using Error::Error;
};

/// Filesystem or decoding failures.
class IoError : public Error {
 public:
  using Error::Error;
};

/// Malformed text input; carries the 1-based line number.
class ParseError : public Error {
 public:
  ParseError(int line, const std::string& what)
      : Error("line " + std::to_string(line) + ": " + what), line_(line), detail_(what) {}
  /// "<source>:<line>: what"
  ParseError(const std::string& source, int line, const std::string& what)
      : Error(source + ":" + std::to_string(line) + ": " + what), line_(line), detail_(what) {}
  int line() const { return line_; }
  const std::string& detail() const { return detail_; }

 private:
  int line_;
  std::string detail_;
};

}  // namespace stnyolo
