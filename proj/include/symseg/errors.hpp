#pragma once

#include <stdexcept>
#include <string>

namespace symseg {

/// Bad user input: malformed config, shape mismatch, value out of range.
/// The CLI maps these to exit code 2.
class ValidationError : public std::invalid_argument {
public:
    explicit ValidationError(const std::string& msg) : std::invalid_argument(msg) {}
};

class ConfigError : public ValidationError {
public:
    explicit ConfigError(const std::string& msg) : ValidationError(msg) {}
};

class RegistryError : public ValidationError {
public:
    explicit RegistryError(const std::string& msg) : ValidationError(msg) {}
};

/// Failure while running: I/O problems, training divergence. CLI exit code 1.
class RuntimeFailure : public std::runtime_error {
public:
    explicit RuntimeFailure(const std::string& msg) : std::runtime_error(msg) {}
};

/// Non-finite loss during training; carries the step at which it happened.
class DivergenceError : public RuntimeFailure {
public:
    DivergenceError(const std::string& msg, int epoch, int step)
        : RuntimeFailure(msg + " (epoch " + std::to_string(epoch) + ", step " +
                         std::to_string(step) + ")"),
          epoch(epoch),
          step(step) {}
    int epoch;
    int step;
};

/// A regression fit has no defined answer (single-class outcome, constant response).
class UndefinedFitError : public RuntimeFailure {
public:
    explicit UndefinedFitError(const std::string& msg) : RuntimeFailure(msg) {}
};

}  // namespace symseg
