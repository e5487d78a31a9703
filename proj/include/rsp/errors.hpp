#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace rsp {

// Base for every error raised by the engine.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Tensor extents that disagree with what an operation expects.
class ShapeError : public Error {
public:
    using Error::Error;
};

// Malformed user input: descriptor JSON, annotations, CLI values.
class InputError : public Error {
public:
    using Error::Error;
};

// Binary archive could not be decoded. Carries the byte offset of the fault.
class FormatError : public InputError {
public:
    FormatError(const std::string& what, std::size_t offset)
        : InputError(what + " (at byte offset " + std::to_string(offset) + ")")
        , offset_(offset) {}

    std::size_t offset() const noexcept { return offset_; }

private:
    std::size_t offset_;
};

// Numerical dead end during attribution (dead layer, no supporting evidence).
class AttributionError : public Error {
public:
    using Error::Error;
};

} // namespace rsp
