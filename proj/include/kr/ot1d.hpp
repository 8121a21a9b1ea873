#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <vector>

#include "kr/grid.hpp"

namespace kr {

/// Optimal transport map sampled at source-grid nodes.
/// Monotone nondecreasing (cyclical monotonicity in 1D).
struct TransportMap1D {
    Grid1D grid;                // source domain
    std::vector<double> values; // T at nodes

    TransportMap1D() = default;
    TransportMap1D(Grid1D g, std::vector<double> v, double mono_tol = 1e-10)
        : grid(g), values(std::move(v)) {
        require(values.size() == static_cast<std::size_t>(grid.n),
                "TransportMap1D: value count must match grid");
        for (std::size_t i = 1; i < values.size(); ++i)
            if (values[i] < values[i - 1] - mono_tol)
                throw invariant_violation("TransportMap1D: not cyclically monotone");
        // absorb roundoff-scale dips
        for (std::size_t i = 1; i < values.size(); ++i)
            values[i] = std::max(values[i], values[i - 1]);
    }
};

inline bool is_monotone(const std::vector<double>& v, double tol = 0.0) {
    for (std::size_t i = 1; i < v.size(); ++i)
        if (v[i] < v[i - 1] - tol) return false;
    return true;
}

/// Centered Kantorovich potential on a grid: values phi and derivative phi'.
/// For potentials built from maps, deriv = id - T and values integrate deriv
/// with the constant fixed by the reference measure.
struct Potential1D {
    Grid1D grid;
    std::vector<double> values;
    std::vector<double> deriv;
};

/// phi'' at nodes by central first differences of phi' (one-sided at ends).
inline std::vector<double> second_derivative(const Potential1D& p) {
    const double h = p.grid.h();
    const auto& d = p.deriv;
    std::vector<double> s(d.size());
    for (std::size_t i = 1; i + 1 < d.size(); ++i) s[i] = (d[i + 1] - d[i - 1]) / (2.0 * h);
    s.front() = (d[1] - d[0]) / h;
    s.back() = (d[d.size() - 1] - d[d.size() - 2]) / h;
    return s;
}

/// T(x) = Q_target(F_source(x)) at every source node: the closed-form 1D
/// optimal transport map as a quantile composition.
inline TransportMap1D ot_map(const Density1D& source, const Density1D& target,
                             bool align = false) {
    if (!source.grid.same_as(target.grid) && !align)
        throw invalid_input("ot_map: mismatched domains (pass align to allow)");
    Cdf1D Fs = cdf(source);
    Cdf1D Ft = cdf(target);
    std::vector<double> T(static_cast<std::size_t>(source.grid.n));
    for (int i = 0; i < source.grid.n; ++i)
        T[static_cast<std::size_t>(i)] = quantile(Ft, Fs.values[static_cast<std::size_t>(i)]);
    return TransportMap1D(source.grid, std::move(T));
}

/// Quadratic Wasserstein distance via quantile quadrature on a fixed
/// 2048-point uniform u-grid (midpoint rule).
inline double w2(const Density1D& a, const Density1D& b) {
    constexpr int kU = 2048;
    Cdf1D Fa = cdf(a);
    Cdf1D Fb = cdf(b);
    double acc = 0.0;
    for (int k = 0; k < kU; ++k) {
        double u = (k + 0.5) / kU;
        acc += sqr(quantile(Fa, u) - quantile(Fb, u));
    }
    return std::sqrt(acc / kU);
}

/// Builds the centered potential from a monotone map: deriv = id - T,
/// values = cumulative trapezoid of deriv shifted so that the integral
/// against the reference measure vanishes.
inline Potential1D potential_from_map(const TransportMap1D& map, const Density1D& reference) {
    require(reference.grid.same_as(map.grid), "potential_from_map: reference grid mismatch");
    if (!is_monotone(map.values, 1e-10))
        throw invariant_violation("potential_from_map: not cyclically monotone");
    const auto& g = map.grid;
    const double h = g.h();
    std::vector<double> deriv(static_cast<std::size_t>(g.n));
    for (int i = 0; i < g.n; ++i)
        deriv[static_cast<std::size_t>(i)] = g.node(i) - map.values[static_cast<std::size_t>(i)];
    std::vector<double> vals(static_cast<std::size_t>(g.n), 0.0);
    for (int i = 1; i < g.n; ++i) {
        std::size_t k = static_cast<std::size_t>(i);
        vals[k] = vals[k - 1] + 0.5 * h * (deriv[k - 1] + deriv[k]);
    }
    // center: int phi d(reference) = 0
    auto w = g.trap_weights();
    double c = 0.0;
    for (std::size_t k = 0; k < vals.size(); ++k) c += vals[k] * reference.values[k] * w[k];
    for (double& x : vals) x -= c;
    return Potential1D{g, std::move(vals), std::move(deriv)};
}

namespace detail {

/// Piecewise-linear interpolation of (xs, ys) with xs sorted nondecreasing;
/// queries below/above the range clamp to the end values. Ties in xs give
/// the left value (consistent with left-continuous quantiles).
inline double interp_sorted(const std::vector<double>& xs, const std::vector<double>& ys,
                            double q) {
    if (q <= xs.front()) return ys.front();
    if (q >= xs.back()) return ys.back();
    auto it = std::lower_bound(xs.begin(), xs.end(), q);
    std::size_t idx = static_cast<std::size_t>(it - xs.begin());
    if (xs[idx] == q) {
        while (idx > 0 && xs[idx - 1] == q) --idx;
        return ys[idx];
    }
    std::size_t i0 = idx - 1;
    double dx = xs[idx] - xs[i0];
    if (dx <= 0.0) return ys[i0];
    double t = (q - xs[i0]) / dx;
    return ys[i0] + t * (ys[idx] - ys[i0]);
}

/// Converts a CDF known at grid nodes into a density: central differences
/// in the interior, one-sided at the ends, clamped nonnegative, renormalized.
inline Density1D density_from_cdf_values(const Grid1D& g, std::vector<double> F) {
    for (std::size_t k = 1; k < F.size(); ++k) F[k] = std::max(F[k], F[k - 1]);
    F.front() = 0.0;
    F.back() = 1.0;
    const double h = g.h();
    std::vector<double> d(F.size());
    for (std::size_t i = 1; i + 1 < F.size(); ++i) d[i] = (F[i + 1] - F[i - 1]) / (2.0 * h);
    d.front() = (F[1] - F[0]) / h;
    d.back() = (F[F.size() - 1] - F[F.size() - 2]) / h;
    for (double& x : d) x = std::max(x, 0.0);
    return Density1D(g, std::move(d));
}

} // namespace detail

/// Density of T_# reference via the CDF change of variables
/// F_out(T(x)) = F_ref(x): differentiating the composition gives
/// d_out(y) = d_ref(x(y)) * x'(y) with x(.) the piecewise-linear inverse
/// of the map. Exact for the identity and for affine maps. Flat map
/// segments concentrate mass; the renormalization absorbs what the grid
/// cannot represent.
inline Density1D pushforward(const Density1D& reference, const TransportMap1D& map) {
    require(reference.grid.same_as(map.grid), "pushforward: grid mismatch");
    const auto& g = reference.grid;
    const double tol = 1e-9 * (g.hi - g.lo);
    for (double t : map.values)
        if (t < g.lo - tol || t > g.hi + tol)
            throw invalid_input("pushforward: map leaves the domain");
    const auto& T = map.values;
    const double h = g.h();
    const double min_dt = 1e-12 * (g.hi - g.lo);
    const double snap = 1e-12 * (g.hi - g.lo);
    std::vector<double> d(static_cast<std::size_t>(g.n), 0.0);
    for (int i = 0; i < g.n; ++i) {
        double y = g.node(i);
        if (y < T.front() - snap || y > T.back() + snap) continue;
        y = std::min(std::max(y, T.front()), T.back());
        auto it = std::lower_bound(T.begin(), T.end(), y);
        std::size_t idx = static_cast<std::size_t>(it - T.begin());
        double dref, slope;
        if (T[idx] == y) {
            while (idx > 0 && T[idx - 1] == y) --idx; // leftmost tie
            dref = reference.values[idx];
            if (idx + 1 < T.size() && T[idx + 1] > y + min_dt)
                slope = h / (T[idx + 1] - y);
            else if (idx > 0 && y - T[idx - 1] > min_dt)
                slope = h / (y - T[idx - 1]);
            else {
                // flat run: the inverse jumps; spread the run's width
                std::size_t r = idx;
                while (r + 1 < T.size() && T[r + 1] <= y + min_dt) ++r;
                double dt = r + 1 < T.size() ? T[r + 1] - y : min_dt;
                slope = h * static_cast<double>(r + 1 - idx) / std::max(dt, min_dt);
            }
        } else {
            std::size_t i0 = idx - 1;
            double dt = T[idx] - T[i0];
            double t = (y - T[i0]) / std::max(dt, min_dt);
            dref = reference.values[i0] + t * (reference.values[idx] - reference.values[i0]);
            slope = h / std::max(dt, min_dt);
        }
        d[static_cast<std::size_t>(i)] = std::max(dref * slope, 0.0);
    }
    double m = trapezoid(g, d);
    if (m <= 0.0) throw invariant_violation("pushforward: degenerate image");
    return Density1D(g, std::move(d));
}

/// Wasserstein barycenter by quantile averaging: the barycenter quantile
/// is the weighted mean of the input quantiles, realized as the
/// pushforward of the first density through the weighted mean transport
/// map T = sum_j w_j T_{ds_0 -> ds_j}. Exact when all inputs coincide.
inline Density1D barycenter(const std::vector<Density1D>& ds,
                            const std::vector<double>* weights = nullptr) {
    require(!ds.empty(), "barycenter: empty list");
    std::vector<double> w;
    if (weights) {
        require(weights->size() == ds.size(), "barycenter: weight count mismatch");
        double s = 0.0;
        for (double x : *weights) s += x;
        require(std::abs(s - 1.0) <= 1e-9, "barycenter: weights must sum to 1");
        w = *weights;
    } else {
        w.assign(ds.size(), 1.0 / static_cast<double>(ds.size()));
    }
    const Grid1D g = ds.front().grid;
    for (const auto& d : ds)
        require(d.grid.same_as(g), "barycenter: densities must share one grid");

    Cdf1D F0 = cdf(ds.front());
    std::vector<double> T(static_cast<std::size_t>(g.n), 0.0);
    for (std::size_t j = 0; j < ds.size(); ++j) {
        Cdf1D Fj = cdf(ds[j]);
        for (int i = 0; i < g.n; ++i)
            T[static_cast<std::size_t>(i)] +=
                w[j] * quantile(Fj, F0.values[static_cast<std::size_t>(i)]);
    }
    for (std::size_t i = 1; i < T.size(); ++i) T[i] = std::max(T[i], T[i - 1]);
    return pushforward(ds.front(), TransportMap1D(g, std::move(T)));
}

/// Affine support alignment tau mapping the density's interval onto
/// [c, d]: the pushforward of the density under tau, on the target grid.
inline Density1D affine_align(const Density1D& d, const Grid1D& target) {
    const double a = d.grid.lo, b = d.grid.hi;
    const double c = target.lo, e = target.hi;
    const double scale = (e - c) / (b - a);
    std::vector<double> v(static_cast<std::size_t>(target.n));
    for (int i = 0; i < target.n; ++i) {
        double y = target.node(i);
        double x = a + (y - c) / scale; // tau^{-1}
        x = std::min(std::max(x, a), b);
        // change of variables: density divides by |tau'|
        double fx = detail::interp_sorted(d.grid.nodes(), d.values, x);
        v[static_cast<std::size_t>(i)] = fx / scale;
    }
    return Density1D(target, std::move(v));
}

} // namespace kr
