#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace klp {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed input data. Carries the 1-based line number when the input is
/// line-delimited (0 when unknown).
class ParseError : public Error {
public:
    ParseError(const std::string& what, std::size_t line = 0)
        : Error(line ? "line " + std::to_string(line) + ": " + what : what), line_(line) {}

    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

/// Input is well-formed but violates a domain invariant.
class ValidationError : public Error {
public:
    using Error::Error;
};

/// Arithmetic precondition failure (zero vectors, dimension mismatch, ...).
class NumericError : public Error {
public:
    using Error::Error;
};

}  // namespace klp
