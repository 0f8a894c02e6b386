#pragma once

#include <stdexcept>
#include <string>

namespace ctxmeta {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ShapeMismatch : public Error {
public:
    using Error::Error;
};

class DimensionMismatch : public Error {
public:
    using Error::Error;
};

class NonFiniteValue : public Error {
public:
    using Error::Error;
};

class NotScalar : public Error {
public:
    using Error::Error;
};

class InvalidRange : public Error {
public:
    using Error::Error;
};

class DegenerateVariance : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

}  // namespace ctxmeta
