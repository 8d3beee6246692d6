#pragma once

#include <stdexcept>
#include <string>

namespace specfed {

// Violated call contract (bad shapes, missing gradients, misuse of the API).
class ContractError : public std::logic_error {
public:
    explicit ContractError(const std::string& what) : std::logic_error(what) {}
};

// Shape disagreement between operands; message names both shapes.
class DimensionError : public ContractError {
public:
    explicit DimensionError(const std::string& what) : ContractError(what) {}
};

// Invalid user-facing configuration (CLI config file, out-of-range knobs).
// `key_path` identifies the offending entry, e.g. "federation.lambda".
class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(std::string key_path, const std::string& what)
        : std::runtime_error(key_path + ": " + what), key_path_(std::move(key_path)) {}
    const std::string& key_path() const { return key_path_; }

private:
    std::string key_path_;
};

class EmptyBankError : public std::runtime_error {
public:
    EmptyBankError() : std::runtime_error("knowledge bank is empty") {}
};

}  // namespace specfed
