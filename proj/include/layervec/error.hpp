#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace layervec {

// Error categories map one-to-one onto CLI exit codes (see tools/main.cpp).
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// A numeric argument was outside the operation's domain.
class DomainError : public Error {
public:
    using Error::Error;
};

// Input files or in-memory values don't match the expected format/shape.
class FormatError : public Error {
public:
    using Error::Error;
};

class ParseError : public FormatError {
public:
    ParseError(const std::string& what, std::size_t offset)
        : FormatError(what + " (at byte " + std::to_string(offset) + ")"), offset_(offset) {}

    std::size_t offset() const noexcept { return offset_; }

private:
    std::size_t offset_;
};

// NaN/Inf encountered during optimization, training, or sampling.
class NumericError : public Error {
public:
    NumericError(const std::string& what, long step)
        : Error(what + " (step " + std::to_string(step) + ")"), step_(step) {}

    long step() const noexcept { return step_; }

private:
    long step_;
};

} // namespace layervec
