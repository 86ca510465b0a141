#pragma once

#include <stdexcept>
#include <string>

namespace kpdepth {

/// Inconsistent inputs or invalid parameters, detected before any compute.
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// A loss or gradient became non-finite during evaluation.
class NumericalError : public std::runtime_error {
public:
    NumericalError(std::string component, const std::string& what)
        : std::runtime_error(what), component_(std::move(component)) {}

    const std::string& component() const noexcept { return component_; }

private:
    std::string component_;
};

/// File read/write failure; the message carries the path.
class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

} // namespace kpdepth
