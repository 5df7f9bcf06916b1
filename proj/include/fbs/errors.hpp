#pragma once

#include <stdexcept>
#include <string>

namespace fbs {

// Shape or index violations: rank mismatch, out-of-range index, bad extent.
struct ShapeError : std::invalid_argument {
    explicit ShapeError(const std::string& what) : std::invalid_argument(what) {}
};

// Contract violations on values: bad density, label out of range, invalid config.
struct ValueError : std::invalid_argument {
    explicit ValueError(const std::string& what) : std::invalid_argument(what) {}
};

// Malformed external data: truncated dataset files, corrupt checkpoints,
// unparseable network spec text.
struct FormatError : std::runtime_error {
    explicit FormatError(const std::string& what) : std::runtime_error(what) {}
};

// Filesystem failures: missing paths, unreadable or unwritable files.
struct IoError : std::runtime_error {
    explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

// Non-finite values detected where the pipeline requires finite arithmetic.
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace fbs
