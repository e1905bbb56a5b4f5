#pragma once

#include <stdexcept>

namespace fyseg {

// Malformed or inconsistent input data (files, headers, mismatched pairs).
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Non-finite values or a failed numeric verification.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace fyseg
