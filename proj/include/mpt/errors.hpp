#pragma once

#include <stdexcept>
#include <string>

namespace mpt {

struct DimensionError : std::runtime_error {
    explicit DimensionError(const std::string& msg) : std::runtime_error("dimension error: " + msg) {}
};

struct VocabularyError : std::runtime_error {
    explicit VocabularyError(const std::string& msg) : std::runtime_error("vocabulary error: " + msg) {}
};

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error("configuration error: " + msg) {}
};

struct ContractError : std::runtime_error {
    explicit ContractError(const std::string& msg) : std::runtime_error("contract error: " + msg) {}
};

struct CheckpointError : std::runtime_error {
    explicit CheckpointError(const std::string& msg) : std::runtime_error("checkpoint error: " + msg) {}
};

struct LengthError : std::runtime_error {
    explicit LengthError(const std::string& msg) : std::runtime_error("length error: " + msg) {}
};

struct DivergedRunError : std::runtime_error {
    DivergedRunError(const std::string& msg, long step)
        : std::runtime_error("diverged at step " + std::to_string(step) + ": " + msg), step(step) {}
    long step;
};

struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error("I/O error: " + msg) {}
};

}  // namespace mpt
