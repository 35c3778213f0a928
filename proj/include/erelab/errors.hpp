#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace erelab {

/// Base class of every error thrown by this library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// The symmetric factorization certificate failed: the matrix handed to an
/// SPD solve is not positive definite within the pivot floor. Under H2 the
/// Riccati bracket must satisfy R(s,s)+D'(P1+P2'NP2)D >= delta*I, so this
/// error signals either a model violation or a diverged iterate.
class NotPositiveDefinite : public Error {
public:
    using Error::Error;
};

/// An eigenvalue iteration exhausted its budget.
class NoConvergence : public Error {
public:
    using Error::Error;
};

/// An integrated field left the finite range (entry above the blow-up
/// threshold or non-finite). Carries the first offending node.
class OverflowError : public Error {
public:
    OverflowError(const std::string& msg, double time, std::ptrdiff_t node)
        : Error(msg), time_(time), node_(node) {}

    double time() const { return time_; }
    std::ptrdiff_t node() const { return node_; }

private:
    double time_ = 0.0;
    std::ptrdiff_t node_ = -1;
};

/// The Picard window shrank below its floor without geometric residual decay.
class NoContraction : public Error {
public:
    using Error::Error;
};

/// A problem file could not be parsed; the message names the offending field.
class ParseError : public Error {
public:
    using Error::Error;
};

/// A function was evaluated outside its admissible domain.
class DomainError : public Error {
public:
    using Error::Error;
};

/// A Monte Carlo run excluded more paths than the exclusion budget allows.
class TooManyExclusions : public Error {
public:
    using Error::Error;
};

} // namespace erelab
