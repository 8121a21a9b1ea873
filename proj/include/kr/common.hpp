#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace kr {

/// Thrown when an input violates an operation precondition.
struct invalid_input : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// Thrown when a computed object violates a model invariant
/// (e.g. a transport map that is not monotone).
struct invariant_violation : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw invalid_input(msg);
}

inline double sqr(double x) { return x * x; }

/// Kahan-free fixed-order sum; accumulation order is the vector order,
/// so results are reproducible across runs and thread counts.
inline double sum(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s;
}

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double max_abs(const std::vector<double>& v) {
    double m = 0.0;
    for (double x : v) m = std::max(m, std::abs(x));
    return m;
}

/// Sentinel reported for quantities that are unbounded in the continuum
/// limit (e.g. sup|f''| of an exact step function).
inline double unbounded_marker() { return std::numeric_limits<double>::infinity(); }

} // namespace kr
