#pragma once

#include <stdexcept>
#include <string>

namespace spikedistill {

// Shape or axis disagreement between tensors / layers.
class ShapeError : public std::runtime_error {
public:
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed caller input: bad labels, empty sequences, unsorted streams, ...
class InputError : public std::runtime_error {
public:
    explicit InputError(const std::string& msg) : std::runtime_error(msg) {}
};

// API misuse: non-scalar backward, profiling before a pass completed, ...
class ContractError : public std::logic_error {
public:
    explicit ContractError(const std::string& msg) : std::logic_error(msg) {}
};

// Invalid or inconsistent run configuration.
class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

} // namespace spikedistill
