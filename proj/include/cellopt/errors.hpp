#pragma once

#include <stdexcept>
#include <string>

namespace cellopt {

/// Base class for all errors raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

/// Malformed text input; carries the 1-based line number (0 if unknown).
class ParseError : public Error {
public:
    ParseError(const std::string& what, int line)
        : Error(line > 0 ? "line " + std::to_string(line) + ": " + what : what), line_(line) {}
    int line() const noexcept { return line_; }

private:
    int line_;
};

/// Structurally valid input that violates a mesh or field invariant.
class ValidationError : public Error {
public:
    using Error::Error;
};

class ResourceError : public Error {
public:
    using Error::Error;
};

/// Raised when a deformation produces a non-positive Jacobian determinant or
/// a collapsed interface tangent.
class DegenerateDeformation : public Error {
public:
    using Error::Error;
};

class SolverError : public Error {
public:
    SolverError(const std::string& what, double diagnostic = 0.0)
        : Error(what), diagnostic_(diagnostic) {}
    /// Relative residual or pivot estimate that triggered the failure.
    double diagnostic() const noexcept { return diagnostic_; }

private:
    double diagnostic_;
};

class LineSearchFailure : public Error {
public:
    using Error::Error;
};

/// Inconsistent BFGS history (a stored curvature pair is not positive).
class HistoryCorruption : public Error {
public:
    using Error::Error;
};

class ContractViolation : public Error {
public:
    using Error::Error;
};

} // namespace cellopt
