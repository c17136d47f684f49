#pragma once

#include <stdexcept>
#include <string>

namespace rled {

// Shape or dimension mismatch between tensors / layer configs.
class ShapeError : public std::runtime_error {
public:
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid or inconsistent configuration values.
class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// File-system level failures (missing files, unreadable formats).
class IoError : public std::runtime_error {
public:
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

// Checkpoint parsing failures, with the failure class preserved so callers
// can distinguish a damaged file from a wrong-model file.
class CheckpointError : public std::runtime_error {
public:
    enum class Kind { corrupt_header, truncated, version_mismatch, config_mismatch };

    CheckpointError(Kind kind, const std::string& msg)
        : std::runtime_error(msg), kind_(kind) {}

    Kind kind() const { return kind_; }

private:
    Kind kind_;
};

// Raised when training hits a non-finite loss.
class TrainingError : public std::runtime_error {
public:
    explicit TrainingError(const std::string& msg) : std::runtime_error(msg) {}
};

// Raised by grad_check when an evaluation is non-finite.
class OracleError : public std::runtime_error {
public:
    explicit OracleError(const std::string& msg) : std::runtime_error(msg) {}
};

} // namespace rled
