#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "kr/common.hpp"

namespace kr {

/// Uniform 1D grid on [lo, hi] with n nodes, spacing h = (hi-lo)/(n-1).
struct Grid1D {
    double lo = 0.0;
    double hi = 1.0;
    int n = 2;

    Grid1D() = default;
    Grid1D(double lo_, double hi_, int n_) : lo(lo_), hi(hi_), n(n_) {
        require(lo < hi, "Grid1D: lo must be < hi");
        require(n >= 2, "Grid1D: need at least 2 nodes");
    }

    double h() const { return (hi - lo) / (n - 1); }
    double node(int i) const { return lo + i * h(); }

    std::vector<double> nodes() const {
        std::vector<double> xs(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) xs[static_cast<std::size_t>(i)] = node(i);
        return xs;
    }

    /// Trapezoid quadrature weights (h at interior nodes, h/2 at ends).
    std::vector<double> trap_weights() const {
        std::vector<double> w(static_cast<std::size_t>(n), h());
        w.front() *= 0.5;
        w.back() *= 0.5;
        return w;
    }

    bool same_as(const Grid1D& o, double tol = 1e-12) const {
        return n == o.n && std::abs(lo - o.lo) <= tol && std::abs(hi - o.hi) <= tol;
    }
};

inline double trapezoid(const Grid1D& g, const std::vector<double>& v) {
    double s = 0.0;
    const double h = g.h();
    for (int i = 0; i + 1 < g.n; ++i)
        s += 0.5 * h * (v[static_cast<std::size_t>(i)] + v[static_cast<std::size_t>(i) + 1]);
    return s;
}

/// Probability density sampled at grid nodes. Nonnegative, unit trapezoid mass.
struct Density1D {
    Grid1D grid;
    std::vector<double> values;

    Density1D() = default;
    Density1D(Grid1D g, std::vector<double> v) : grid(g), values(std::move(v)) {
        require(values.size() == static_cast<std::size_t>(grid.n),
                "Density1D: value count must match grid");
        for (double x : values) require(x >= 0.0, "Density1D: negative density value");
        double m = trapezoid(grid, values);
        require(m > 0.0, "Density1D: zero total mass");
        if (std::abs(m - 1.0) > 1e-9)
            for (double& x : values) x /= m;
    }

    double mass() const { return trapezoid(grid, values); }
};

/// Cumulative distribution function at grid nodes; nondecreasing, F(lo)=0, F(hi)=1.
struct Cdf1D {
    Grid1D grid;
    std::vector<double> values;
};

/// Cumulative trapezoid integral of the density, clamped monotone with
/// endpoints pinned to 0 and 1.
inline Cdf1D cdf(const Density1D& d) {
    const auto& g = d.grid;
    std::vector<double> F(static_cast<std::size_t>(g.n), 0.0);
    const double h = g.h();
    for (int i = 1; i < g.n; ++i) {
        std::size_t k = static_cast<std::size_t>(i);
        F[k] = F[k - 1] + 0.5 * h * (d.values[k - 1] + d.values[k]);
    }
    double total = F.back();
    for (double& x : F) x /= total;
    for (std::size_t k = 1; k < F.size(); ++k) F[k] = std::max(F[k], F[k - 1]);
    for (double& x : F) x = std::min(std::max(x, 0.0), 1.0);
    F.front() = 0.0;
    F.back() = 1.0;
    return Cdf1D{g, std::move(F)};
}

/// Piecewise-linear inverse of the CDF. Flat CDF segments resolve to the
/// left endpoint of the segment, making the quantile left-continuous.
inline double quantile(const Cdf1D& c, double u) {
    require(u >= 0.0 && u <= 1.0, "quantile: u outside [0,1]");
    const auto& F = c.values;
    if (u <= F.front()) return c.grid.lo;
    if (u >= F.back()) {
        // left endpoint of the terminal flat segment
        std::size_t k = F.size() - 1;
        while (k > 0 && F[k - 1] >= F.back()) --k;
        return c.grid.node(static_cast<int>(k));
    }
    // first index with F[idx] >= u
    auto it = std::lower_bound(F.begin(), F.end(), u);
    std::size_t idx = static_cast<std::size_t>(it - F.begin());
    if (F[idx] == u) {
        // left endpoint of any flat run at value u
        while (idx > 0 && F[idx - 1] == u) --idx;
        return c.grid.node(static_cast<int>(idx));
    }
    std::size_t i0 = idx - 1;
    double c0 = F[i0], c1 = F[idx];
    double t = (u - c0) / (c1 - c0);
    return c.grid.node(static_cast<int>(i0)) + t * c.grid.h();
}

/// Gaussian kernel density estimate at grid nodes, renormalized to unit
/// trapezoid mass on [lo, hi]. Boundary mass is folded by the global
/// renormalization, not by reflection. Samples are accumulated in sorted
/// order so the result is independent of input permutation.
inline Density1D density_from_samples(std::vector<double> samples, const Grid1D& grid,
                                      double bandwidth) {
    require(!samples.empty(), "density_from_samples: empty sample");
    require(bandwidth > 0.0, "density_from_samples: bandwidth must be positive");
    std::sort(samples.begin(), samples.end());
    std::vector<double> v(static_cast<std::size_t>(grid.n), 0.0);
    const double inv2b2 = 1.0 / (2.0 * bandwidth * bandwidth);
    for (int i = 0; i < grid.n; ++i) {
        const double x = grid.node(i);
        double acc = 0.0;
        for (double s : samples) acc += std::exp(-(x - s) * (x - s) * inv2b2);
        v[static_cast<std::size_t>(i)] = acc;
    }
    return Density1D(grid, std::move(v));
}

/// Density of a normal(m, s^2) truncated to the grid interval.
inline Density1D truncated_normal(const Grid1D& grid, double m, double s) {
    require(s > 0.0, "truncated_normal: sigma must be positive");
    std::vector<double> v(static_cast<std::size_t>(grid.n));
    for (int i = 0; i < grid.n; ++i) {
        double z = (grid.node(i) - m) / s;
        v[static_cast<std::size_t>(i)] = std::exp(-0.5 * z * z);
    }
    return Density1D(grid, std::move(v));
}

inline Density1D uniform_density(const Grid1D& grid) {
    return Density1D(grid, std::vector<double>(static_cast<std::size_t>(grid.n), 1.0));
}

/// Trapezoid mean of x under the density.
inline double density_mean(const Density1D& d) {
    std::vector<double> xv(static_cast<std::size_t>(d.grid.n));
    for (int i = 0; i < d.grid.n; ++i)
        xv[static_cast<std::size_t>(i)] = d.grid.node(i) * d.values[static_cast<std::size_t>(i)];
    return trapezoid(d.grid, xv);
}

} // namespace kr
