/**
 * @file errors.hpp
 * @brief Exception types shared across the library.
 */

#pragma once

#include <stdexcept>
#include <string>

namespace pivotsoil {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Newton iteration of the implicit step did not converge.
class NonConvergence : public Error {
public:
    NonConvergence(const std::string& what, double last_increment, int iterations)
        : Error(what), last_increment_(last_increment), iterations_(iterations) {}

    double last_increment() const { return last_increment_; }
    int iterations() const { return iterations_; }

private:
    double last_increment_;
    int iterations_;
};

class InvalidState : public Error {
public:
    using Error::Error;
};

class DegenerateScaling : public Error {
public:
    using Error::Error;
};

class SectorMismatch : public Error {
public:
    using Error::Error;
};

class SingularSystem : public Error {
public:
    using Error::Error;
};

class TooFewSamples : public Error {
public:
    using Error::Error;
};

class MissingWeather : public Error {
public:
    using Error::Error;
};

class DegenerateRange : public Error {
public:
    using Error::Error;
};

/// Malformed or inconsistent configuration input.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Malformed or unusable data files (measurements, weather).
class DataError : public Error {
public:
    using Error::Error;
};

}  // namespace pivotsoil
