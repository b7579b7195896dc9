#pragma once

#include <stdexcept>
#include <string>

namespace psgm {

/// Base class for all library errors.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// A pivot of a symmetric factorization fell below the positive-definiteness
/// tolerance (singular or indefinite input, e.g. a LUT Gram with empty bins).
struct NotPositiveDefinite : Error {
    using Error::Error;
};

struct DimensionMismatch : Error {
    using Error::Error;
};

/// An iterative spectral estimate did not stabilize within the iteration cap.
struct NoConvergence : Error {
    using Error::Error;
};

struct EmptyBatch : Error {
    using Error::Error;
};

/// Requested an operation a basis family does not support (e.g. derivatives
/// of piecewise-constant indicators).
struct UnsupportedFamily : Error {
    using Error::Error;
};

struct DegenerateSamples : Error {
    using Error::Error;
};

struct WrongProcessTag : Error {
    using Error::Error;
};

struct SingularMatrix : Error {
    using Error::Error;
};

struct SingularB : Error {
    using Error::Error;
};

/// The relative positive-definiteness requirement x^T B^{-1} A x > 0 failed.
struct NotAdmissible : Error {
    using Error::Error;
};

/// An iterate picked up a NaN/inf entry; the step size is too large or the
/// preconditioner is inadmissible.
struct NonFiniteUpdate : Error {
    using Error::Error;
};

struct ZeroOracle : Error {
    using Error::Error;
};

struct ConfigError : Error {
    using Error::Error;
};

}  // namespace psgm
