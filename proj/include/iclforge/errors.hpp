#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace iclforge {

// Shape/dimension violations (matmul mismatch, bad raster size, label out of range).
struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad bytes in a binary file; carries the offset of the first bad byte.
struct FormatError : std::runtime_error {
    FormatError(const std::string& msg, std::uint64_t at)
        : std::runtime_error(msg + " (offset " + std::to_string(at) + ")"), offset(at) {}
    std::uint64_t offset;
};

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Non-finite values where finite ones are required (loss, grads, activations).
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// Episode construction cannot satisfy the requested recipe.
struct RecipeError : std::runtime_error {
    explicit RecipeError(const std::string& msg) : std::runtime_error(msg) {}
};

// Evaluation suite violates its format contract.
struct EvalError : std::runtime_error {
    explicit EvalError(const std::string& msg) : std::runtime_error(msg) {}
};

struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

// A content fingerprint disagrees with the one recorded alongside the data.
struct HashMismatchError : std::runtime_error {
    explicit HashMismatchError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace iclforge
