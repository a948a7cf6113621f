#pragma once

#include <stdexcept>
#include <string>

namespace minereg {

// Process exit codes used by the command-line front end.
enum class ExitCode : int { ok = 0, config = 2, data = 3, numeric = 4 };

// Invalid shapes, parameters, or option combinations.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Malformed or truncated files and inconsistent datasets.
struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// NaN/Inf produced by a computation.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// API misuse, e.g. backward() on a non-scalar.
struct UsageError : std::logic_error {
    using std::logic_error::logic_error;
};

} // namespace minereg
