#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "kr/common.hpp"

namespace kr {

/// Uniform tensor grid on [x0,x1] x [y0,y1]; values are stored row-major
/// with index i*ny + j for node (x_i, y_j).
struct Grid2D {
    double x0 = 0.0, x1 = 1.0, y0 = 0.0, y1 = 1.0;
    int nx = 2, ny = 2;

    Grid2D() = default;
    Grid2D(double x0_, double x1_, double y0_, double y1_, int nx_, int ny_)
        : x0(x0_), x1(x1_), y0(y0_), y1(y1_), nx(nx_), ny(ny_) {
        require(x0 < x1 && y0 < y1, "Grid2D: empty extent");
        require(nx >= 2 && ny >= 2, "Grid2D: need at least 2 nodes per axis");
    }

    double hx() const { return (x1 - x0) / (nx - 1); }
    double hy() const { return (y1 - y0) / (ny - 1); }
    double nodex(int i) const { return x0 + i * hx(); }
    double nodey(int j) const { return y0 + j * hy(); }
    std::size_t size() const { return static_cast<std::size_t>(nx) * static_cast<std::size_t>(ny); }
    std::size_t idx(int i, int j) const {
        return static_cast<std::size_t>(i) * static_cast<std::size_t>(ny) +
               static_cast<std::size_t>(j);
    }

    /// Tensor trapezoid cell weights.
    std::vector<double> cell_weights() const {
        std::vector<double> w(size());
        for (int i = 0; i < nx; ++i) {
            double wx = (i == 0 || i == nx - 1) ? 0.5 * hx() : hx();
            for (int j = 0; j < ny; ++j) {
                double wy = (j == 0 || j == ny - 1) ? 0.5 * hy() : hy();
                w[idx(i, j)] = wx * wy;
            }
        }
        return w;
    }

    bool same_as(const Grid2D& o, double tol = 1e-12) const {
        return nx == o.nx && ny == o.ny && std::abs(x0 - o.x0) <= tol &&
               std::abs(x1 - o.x1) <= tol && std::abs(y0 - o.y0) <= tol &&
               std::abs(y1 - o.y1) <= tol;
    }
};

struct Density2D {
    Grid2D grid;
    std::vector<double> values;

    Density2D() = default;
    Density2D(Grid2D g, std::vector<double> v) : grid(g), values(std::move(v)) {
        require(values.size() == grid.size(), "Density2D: value count must match grid");
        for (double x : values) require(x >= 0.0, "Density2D: negative density value");
        auto w = grid.cell_weights();
        double m = 0.0;
        for (std::size_t k = 0; k < values.size(); ++k) m += values[k] * w[k];
        require(m > 0.0, "Density2D: zero total mass");
        if (std::abs(m - 1.0) > 1e-9)
            for (double& x : values) x /= m;
    }

    double mass() const {
        auto w = grid.cell_weights();
        double m = 0.0;
        for (std::size_t k = 0; k < values.size(); ++k) m += values[k] * w[k];
        return m;
    }
};

/// Potential with its gradient field (central differences inside,
/// one-sided at the edges).
struct Potential2D {
    Grid2D grid;
    std::vector<double> values;
    std::vector<double> gx; // d/dx
    std::vector<double> gy; // d/dy
};

inline void fill_gradient(Potential2D& p) {
    const auto& g = p.grid;
    p.gx.assign(g.size(), 0.0);
    p.gy.assign(g.size(), 0.0);
    for (int i = 0; i < g.nx; ++i) {
        for (int j = 0; j < g.ny; ++j) {
            std::size_t k = g.idx(i, j);
            if (i == 0)
                p.gx[k] = (p.values[g.idx(1, j)] - p.values[g.idx(0, j)]) / g.hx();
            else if (i == g.nx - 1)
                p.gx[k] = (p.values[g.idx(i, j)] - p.values[g.idx(i - 1, j)]) / g.hx();
            else
                p.gx[k] = (p.values[g.idx(i + 1, j)] - p.values[g.idx(i - 1, j)]) / (2 * g.hx());
            if (j == 0)
                p.gy[k] = (p.values[g.idx(i, 1)] - p.values[g.idx(i, 0)]) / g.hy();
            else if (j == g.ny - 1)
                p.gy[k] = (p.values[g.idx(i, j)] - p.values[g.idx(i, j - 1)]) / g.hy();
            else
                p.gy[k] = (p.values[g.idx(i, j + 1)] - p.values[g.idx(i, j - 1)]) / (2 * g.hy());
        }
    }
}

/// Map field: target position per node.
struct VectorField2D {
    Grid2D grid;
    std::vector<double> tx;
    std::vector<double> ty;
};

/// Separable Gaussian filter with sigma measured in cells, 'nearest'
/// boundary handling; used for histogram smoothing at ingestion.
inline std::vector<double> gaussian_filter2d(const Grid2D& g, const std::vector<double>& v,
                                             double sigma_cells) {
    if (sigma_cells <= 0.0) return v;
    int radius = std::max(1, static_cast<int>(std::ceil(4.0 * sigma_cells)));
    std::vector<double> kern(static_cast<std::size_t>(2 * radius + 1));
    double s = 0.0;
    for (int t = -radius; t <= radius; ++t) {
        double x = std::exp(-0.5 * sqr(t / sigma_cells));
        kern[static_cast<std::size_t>(t + radius)] = x;
        s += x;
    }
    for (double& x : kern) x /= s;

    std::vector<double> tmp(g.size(), 0.0), out(g.size(), 0.0);
    for (int i = 0; i < g.nx; ++i)
        for (int j = 0; j < g.ny; ++j) {
            double acc = 0.0;
            for (int t = -radius; t <= radius; ++t) {
                int ii = std::min(std::max(i + t, 0), g.nx - 1);
                acc += kern[static_cast<std::size_t>(t + radius)] * v[g.idx(ii, j)];
            }
            tmp[g.idx(i, j)] = acc;
        }
    for (int i = 0; i < g.nx; ++i)
        for (int j = 0; j < g.ny; ++j) {
            double acc = 0.0;
            for (int t = -radius; t <= radius; ++t) {
                int jj = std::min(std::max(j + t, 0), g.ny - 1);
                acc += kern[static_cast<std::size_t>(t + radius)] * tmp[g.idx(i, jj)];
            }
            out[g.idx(i, j)] = acc;
        }
    return out;
}

/// Uniform density on a disk, rasterized with 4x4 subsampled cell-area
/// anti-aliasing, normalized to unit mass.
inline Density2D disk_density(const Grid2D& g, double cx, double cy, double radius) {
    require(radius > 0.0, "disk_density: radius must be positive");
    std::vector<double> v(g.size(), 0.0);
    const int ss = 4;
    for (int i = 0; i < g.nx; ++i) {
        for (int j = 0; j < g.ny; ++j) {
            int inside = 0;
            for (int a = 0; a < ss; ++a)
                for (int b = 0; b < ss; ++b) {
                    double x = g.nodex(i) + ((a + 0.5) / ss - 0.5) * g.hx();
                    double y = g.nodey(j) + ((b + 0.5) / ss - 0.5) * g.hy();
                    if (sqr(x - cx) + sqr(y - cy) <= sqr(radius)) ++inside;
                }
            v[g.idx(i, j)] = static_cast<double>(inside) / (ss * ss);
        }
    }
    return Density2D(g, std::move(v));
}

/// 2D histogram of sample points smoothed by a Gaussian filter and
/// renormalized (the ingestion path for raw bivariate samples).
inline Density2D density_from_samples_2d(const std::vector<std::pair<double, double>>& samples,
                                         const Grid2D& g, double sigma_cells) {
    require(!samples.empty(), "density_from_samples_2d: empty sample");
    std::vector<double> counts(g.size(), 0.0);
    for (const auto& [x, y] : samples) {
        int i = static_cast<int>(std::round((x - g.x0) / g.hx()));
        int j = static_cast<int>(std::round((y - g.y0) / g.hy()));
        i = std::min(std::max(i, 0), g.nx - 1);
        j = std::min(std::max(j, 0), g.ny - 1);
        counts[g.idx(i, j)] += 1.0;
    }
    auto sm = gaussian_filter2d(g, counts, sigma_cells);
    return Density2D(g, std::move(sm));
}

inline std::pair<double, double> center_of_mass(const Density2D& d) {
    auto w = d.grid.cell_weights();
    double mx = 0.0, my = 0.0;
    for (int i = 0; i < d.grid.nx; ++i)
        for (int j = 0; j < d.grid.ny; ++j) {
            std::size_t k = d.grid.idx(i, j);
            mx += d.grid.nodex(i) * d.values[k] * w[k];
            my += d.grid.nodey(j) * d.values[k] * w[k];
        }
    return {mx, my};
}

} // namespace kr
