#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace sptn {

/// Base class of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shape mismatch between an argument and what the operation expects.
class DimensionError : public Error {
 public:
  DimensionError(const std::string& what, long expected, long actual)
      : Error(what + ": expected " + std::to_string(expected) + ", got " +
              std::to_string(actual)),
        expected_(expected),
        actual_(actual) {}

  long expected() const noexcept { return expected_; }
  long actual() const noexcept { return actual_; }

 private:
  long expected_;
  long actual_;
};

/// An argument violates a documented precondition.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// A value left the domain where the operation is defined (non-finite input,
/// point outside the range of a nonlinearity, ...).
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Evaluation was requested on a circuit that has not passed validation.
class NotValidated : public Error {
 public:
  NotValidated() : Error("circuit has not been validated") {}
};

/// The circuit contains a construct that breaks closed-form inference.
class NotTractable : public Error {
 public:
  NotTractable(const std::string& what, std::uint32_t node)
      : Error(what), node_(node) {}

  /// Offending node index.
  std::uint32_t node() const noexcept { return node_; }

 private:
  std::uint32_t node_;
};

/// An explicit mixture expansion would exceed the configured component cap.
class ExpansionCapExceeded : public Error {
 public:
  ExpansionCapExceeded(std::uint64_t required, std::uint64_t cap)
      : Error("mixture expansion needs " + std::to_string(required) +
              " components, cap is " + std::to_string(cap)),
        required_(required),
        cap_(cap) {}

  std::uint64_t required() const noexcept { return required_; }
  std::uint64_t cap() const noexcept { return cap_; }

 private:
  std::uint64_t required_;
  std::uint64_t cap_;
};

/// Malformed input file (CSV or model JSON).
class ParseError : public Error {
 public:
  using Error::Error;
};

/// File could not be opened, read or written.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace sptn
