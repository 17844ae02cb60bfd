#pragma once

#include <stdexcept>
#include <string>

namespace fuseclin {

/// Base class for all errors raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Input data is malformed or violates a documented invariant.
class DataError : public Error {
public:
    using Error::Error;
};

/// A caller-side precondition does not hold (bad arguments, missing upstream artifact).
class PreconditionError : public Error {
public:
    using Error::Error;
};

/// The requested operation needs a capability the component does not have
/// (e.g. Grad-CAM on a non-differentiable feature extractor).
class CapabilityError : public Error {
public:
    using Error::Error;
};

/// Numerical failure during an iterative procedure.
class NumericError : public Error {
public:
    using Error::Error;
};

}  // namespace fuseclin
