#ifndef MVTN_ERRORS_HPP
#define MVTN_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace mvtn {

// Shape disagreement between tensors (e.g. matmul inner dims).
struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid configuration value (schedule divisibility, head counts, ...).
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Caller broke an API precondition (empty dataset, non-scalar loss, ...).
struct ContractError : std::runtime_error {
    explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};

// Out-of-range index (class labels, token positions).
struct IndexError : std::runtime_error {
    explicit IndexError(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed file content; carries the byte offset where parsing failed.
struct FormatError : std::runtime_error {
    FormatError(const std::string& msg, std::size_t byte_offset)
        : std::runtime_error(msg + " (at byte " + std::to_string(byte_offset) + ")"),
          offset(byte_offset) {}
    std::size_t offset;
};

// Filesystem problem (missing file, unwritable directory).
struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace mvtn

#endif  // MVTN_ERRORS_HPP
