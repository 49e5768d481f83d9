#pragma once

#include <stdexcept>
#include <string>

namespace aggvpr {

/// Shape disagreement between tensors (reports both shapes in the message).
struct DimError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// A caller violated an API precondition.
struct ContractError : std::logic_error {
    using std::logic_error::logic_error;
};

/// Input data is unusable (empty manifest, too few points, ...).
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Malformed file content.
struct ParseError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Structurally valid file that violates schema constraints.
struct SchemaError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Non-finite values where finite ones are required.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Filesystem failure.
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace aggvpr
