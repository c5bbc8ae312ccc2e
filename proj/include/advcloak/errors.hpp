#pragma once

#include <stdexcept>
#include <string>

namespace advcloak {

// Error taxonomy mirrored by CLI exit codes:
//   PreconditionError -> 2, NumericError -> 3, IoError -> 4.
struct PreconditionError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace advcloak
