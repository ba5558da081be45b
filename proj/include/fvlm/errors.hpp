#pragma once

#include <stdexcept>
#include <string>

namespace fvlm {

// Shape or size mismatch between tensors / buffers.
struct DimensionError : std::runtime_error {
    explicit DimensionError(const std::string& what) : std::runtime_error(what) {}
};

// Non-finite value where a finite one is required, or a degenerate numeric input.
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

// Caller violated an API precondition (bad argument, unknown name, malformed record).
struct ContractError : std::runtime_error {
    explicit ContractError(const std::string& what) : std::runtime_error(what) {}
};

// Unreadable or corrupt serialized artifact (checkpoint, corpus, image).
struct CorruptionError : std::runtime_error {
    explicit CorruptionError(const std::string& what) : std::runtime_error(what) {}
};

// Serialized artifact from an incompatible format version.
struct MigrationError : std::runtime_error {
    explicit MigrationError(const std::string& what) : std::runtime_error(what) {}
};

// Remote service (dialogue generator) unreachable or misbehaving after retry.
struct TransportError : std::runtime_error {
    explicit TransportError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace fvlm
