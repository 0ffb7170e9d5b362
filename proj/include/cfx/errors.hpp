#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace cfx {

// Root of every error the library raises. The CLI maps ConfigError (and its
// children) to exit code 2 and everything else to exit code 3.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class ShapeError : public ConfigError {
public:
    using ConfigError::ConfigError;
};

class DomainError : public ConfigError {
public:
    using ConfigError::ConfigError;
};

class NumericError : public Error {
public:
    NumericError(const std::string& what, std::size_t step)
        : Error(what + " (step " + std::to_string(step) + ")"), step_(step) {}
    explicit NumericError(const std::string& what) : Error(what) {}
    std::size_t step() const { return step_; }

private:
    std::size_t step_ = 0;
};

class TrainingError : public Error {
public:
    TrainingError(const std::string& what, std::size_t step)
        : Error(what + " at step " + std::to_string(step)), step_(step) {}
    std::size_t step() const { return step_; }

private:
    std::size_t step_;
};

class IntegrityError : public Error {
public:
    IntegrityError(const std::string& what, std::size_t position)
        : Error(what + " at byte " + std::to_string(position)), position_(position) {}
    std::size_t position() const { return position_; }

private:
    std::size_t position_;
};

class VersionError : public Error {
public:
    using Error::Error;
};

}  // namespace cfx
