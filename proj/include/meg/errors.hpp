#pragma once

#include <stdexcept>
#include <string>

namespace meg {

// Bad caller input: mismatched dimensions, out-of-range arguments.
struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct ApexError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct ConfigError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// backward() called on a tape that was already consumed.
struct StaleGraphError : std::logic_error {
    using std::logic_error::logic_error;
};

// Evaluation-protocol violations (e.g. LOSO with a single subject).
struct ProtocolError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Metrics requested on an empty confusion matrix.
struct MetricsError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Manifest / config file contents that do not parse or validate.
struct ParseError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Checkpoint directories that fail validation (size mismatch, unknown names).
struct CheckpointError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

} // namespace meg
