#pragma once

#include <stdexcept>
#include <string>

namespace morvit {

/// Base of every exception thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Incompatible tensor shapes or invalid geometry.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// Malformed input file, bad record, I/O failure.
class DataError : public Error {
public:
    using Error::Error;
};

/// Invalid configuration value or unknown config key.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// NaN/Inf detected where finite values are required.
class NumericError : public Error {
public:
    using Error::Error;
};

} // namespace morvit
