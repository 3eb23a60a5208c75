#pragma once

#include <stdexcept>
#include <string>

namespace simulflow {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Extents that cannot be combined by the requested operation.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// A forward op produced NaN/Inf from finite inputs, or a loss went non-finite.
class NumericError : public Error {
public:
    using Error::Error;
};

/// Misuse of the differentiation tape (double backward, non-scalar loss, ...).
class TapeError : public Error {
public:
    using Error::Error;
};

/// Invalid configuration values or unknown names.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Malformed or corrupted on-disk data. `kind` names the failure class.
class FormatError : public Error {
public:
    enum class Kind {
        bad_magic,
        truncated,
        unknown_dtype,
        bad_header,
        bad_maxval,
        bad_mask_value,
        crc_mismatch,
        name_mismatch,
        io,
    };

    FormatError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}

    Kind kind() const noexcept { return kind_; }

private:
    Kind kind_;
};

inline const char* to_string(FormatError::Kind kind) {
    switch (kind) {
    case FormatError::Kind::bad_magic: return "bad magic";
    case FormatError::Kind::truncated: return "truncated";
    case FormatError::Kind::unknown_dtype: return "unknown dtype";
    case FormatError::Kind::bad_header: return "bad header";
    case FormatError::Kind::bad_maxval: return "bad maxval";
    case FormatError::Kind::bad_mask_value: return "bad mask value";
    case FormatError::Kind::crc_mismatch: return "crc mismatch";
    case FormatError::Kind::name_mismatch: return "name mismatch";
    case FormatError::Kind::io: return "io";
    }
    return "unknown";
}

} // namespace simulflow
