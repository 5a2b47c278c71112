#pragma once

#include <stdexcept>
#include <string>

namespace changedet {

/// Violated precondition or shape contract of a library operation.
struct ContractViolation : std::invalid_argument {
    explicit ContractViolation(const std::string& msg) : std::invalid_argument(msg) {}
};

/// Input pair cannot be treated as co-registered (extent/band mismatch).
struct RegistrationError : std::runtime_error {
    explicit RegistrationError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Color-mapping fit has fewer samples than unknowns.
struct InsufficientSamplesError : std::runtime_error {
    explicit InsufficientSamplesError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Color-mapping fit produced a non-finite normal system.
struct DegenerateInputError : std::runtime_error {
    explicit DegenerateInputError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Weight archive missing or mismatching a required parameter.
struct WeightLoadError : std::runtime_error {
    explicit WeightLoadError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Raster decode/encode failure.
struct FormatError : std::runtime_error {
    explicit FormatError(const std::string& msg) : std::runtime_error(msg) {}
};

/// File-system failure, carries the offending path in the message.
struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace changedet
