#pragma once

#include <stdexcept>
#include <string>

namespace unmix {

// Bad or inconsistent run configuration (CLI exit code 2).
class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Missing/corrupt datasets or checkpoints (CLI exit code 3).
class DataError : public std::runtime_error {
public:
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace unmix
