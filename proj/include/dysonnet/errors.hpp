#pragma once

#include <stdexcept>
#include <string>

namespace dyson {

// Bad arguments: indices out of range, mismatched sizes, unsupported shapes.
struct DomainError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Non-finite values, singular systems, solver breakdown.
struct NumericalError : std::runtime_error {
    explicit NumericalError(const std::string& what, int layer = -1)
        : std::runtime_error(layer >= 0 ? what + " (layer " + std::to_string(layer) + ")" : what),
          layer_index(layer) {}
    int layer_index;
};

// Problem too large for the dense/exhaustive code paths.
struct ResourceError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Stale or mismatched cached state; always a programming error upstream.
struct InvariantError : std::logic_error {
    using std::logic_error::logic_error;
};

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline void require(bool ok, const std::string& msg) {
    if (!ok) throw DomainError(msg);
}

} // namespace dyson
