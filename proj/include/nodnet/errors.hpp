#pragma once

#include <stdexcept>
#include <string>

namespace nodnet {

// File/format problems: bad magic, truncated payloads, unknown element
// types, size mismatches. CLI maps these to exit code 2.
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Non-finite values where the numeric contract forbids them (losses,
// gradients). CLI maps these to exit code 3.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace nodnet
