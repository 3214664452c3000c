#pragma once

#include <stdexcept>
#include <string>

namespace protoreg {

// Shape or argument contract violated by the caller.
class InvalidArgument : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Anything that went wrong talking to the filesystem or decoding a file.
class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class MalformedHeader : public IoError {
public:
    using IoError::IoError;
};

class UnsupportedDatatype : public IoError {
public:
    using IoError::IoError;
};

class TruncatedPayload : public IoError {
public:
    using IoError::IoError;
};

// Raised when an objective term evaluates to NaN/Inf during optimization.
class NumericalError : public std::runtime_error {
public:
    NumericalError(std::string term, const std::string& what)
        : std::runtime_error(what), term_(std::move(term)) {}

    const std::string& term() const noexcept { return term_; }

private:
    std::string term_;
};

}  // namespace protoreg
