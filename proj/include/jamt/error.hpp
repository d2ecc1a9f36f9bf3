#pragma once

#include <stdexcept>
#include <string>

namespace jamt {

// Base class for all toolkit errors.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Tensor shape / rank contract violations.
struct ShapeError : Error {
    using Error::Error;
};

// Invalid argument values (bad ranges, empty inputs, malformed sequences).
struct ValueError : Error {
    using Error::Error;
};

// NaN/Inf encountered where finite values are required.
struct NumericError : Error {
    using Error::Error;
};

// Training produced a non-finite loss.
struct DivergenceError : NumericError {
    using NumericError::NumericError;
};

// Configuration problems: unknown keys, unparsable values, inconsistent settings.
struct ConfigError : Error {
    using Error::Error;
};

// File system problems: missing files, unreadable or malformed binary data.
struct IoError : Error {
    using Error::Error;
};

}  // namespace jamt
