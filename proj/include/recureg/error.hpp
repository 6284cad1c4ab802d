// Exception types shared by every recureg module.
#pragma once

#include <stdexcept>
#include <string>

namespace recureg {

// Base class; everything the library throws derives from this.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Operand shapes disagree or violate a size precondition.
class ShapeError : public Error {
public:
    using Error::Error;
};

// A value violates a domain invariant (non-finite data, bad parameter, ...).
class ValueError : public Error {
public:
    using Error::Error;
};

// Malformed or truncated file.
class FormatError : public Error {
public:
    enum class Kind { BadMagic, BadVersion, BadHeader, DimOverflow, Truncated, Io };

    FormatError(Kind kind, const std::string &what) : Error(what), kind_(kind) {}

    Kind kind() const noexcept { return kind_; }

private:
    Kind kind_;
};

// Training produced a non-finite loss.
class DivergenceError : public Error {
public:
    using Error::Error;
};

} // namespace recureg
