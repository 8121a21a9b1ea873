#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "kr/grid2d.hpp"
#include "kr/params.hpp"
#include "kr/parallel.hpp"

namespace kr {

/// Hard cap for the brute-force c-transform (O(N^2) node pairs).
inline constexpr int kMaxGrid2DNodes = 64 * 64;

/// Exact c-transform on the grid: phi^c(y) = min_x ||x-y||^2/2 - phi(x),
/// minimized over all source nodes for each target node.
inline Potential2D c_transform(const Potential2D& phi, const Grid2D& target) {
    const Grid2D& s = phi.grid;
    require(static_cast<int>(s.size()) <= kMaxGrid2DNodes &&
                static_cast<int>(target.size()) <= kMaxGrid2DNodes,
            "c_transform: grid too large");
    Potential2D out;
    out.grid = target;
    out.values.assign(target.size(), 0.0);
    parallel_for(static_cast<std::size_t>(target.nx), [&](std::size_t ii) {
        int i = static_cast<int>(ii);
        double y1 = target.nodex(i);
        for (int j = 0; j < target.ny; ++j) {
            double y2 = target.nodey(j);
            double best = std::numeric_limits<double>::infinity();
            for (int a = 0; a < s.nx; ++a) {
                double dx = s.nodex(a) - y1;
                double half_dx2 = 0.5 * dx * dx;
                const double* col = phi.values.data() + s.idx(a, 0);
                for (int b = 0; b < s.ny; ++b) {
                    double dy = s.nodey(b) - y2;
                    double v = half_dx2 + 0.5 * dy * dy - col[b];
                    if (v < best) best = v;
                }
            }
            out.values[target.idx(i, j)] = best;
        }
    });
    fill_gradient(out);
    return out;
}

namespace detail2d {

/// c-transform that also records the minimizing source node per target
/// node (the matching map S of the dual ascent).
inline void c_transform_argmin(const std::vector<double>& phi, const Grid2D& g,
                               std::vector<double>& out, std::vector<int>& arg) {
    out.assign(g.size(), 0.0);
    arg.assign(g.size(), 0);
    parallel_for(static_cast<std::size_t>(g.nx), [&](std::size_t ii) {
        int i = static_cast<int>(ii);
        double y1 = g.nodex(i);
        for (int j = 0; j < g.ny; ++j) {
            double y2 = g.nodey(j);
            double best = std::numeric_limits<double>::infinity();
            int bestk = 0;
            for (int a = 0; a < g.nx; ++a) {
                double dx = g.nodex(a) - y1;
                double half_dx2 = 0.5 * dx * dx;
                const double* col = phi.data() + g.idx(a, 0);
                for (int b = 0; b < g.ny; ++b) {
                    double dy = g.nodey(b) - y2;
                    double v = half_dx2 + 0.5 * dy * dy - col[b];
                    if (v < best) {
                        best = v;
                        bestk = static_cast<int>(g.idx(a, b));
                    }
                }
            }
            out[g.idx(i, j)] = best;
            arg[g.idx(i, j)] = bestk;
        }
    });
}

/// Orthonormal DCT-II matrix for the Neumann Poisson solve.
inline std::vector<double> dct_matrix(int n) {
    std::vector<double> C(static_cast<std::size_t>(n) * static_cast<std::size_t>(n));
    for (int k = 0; k < n; ++k) {
        double s = k == 0 ? std::sqrt(1.0 / n) : std::sqrt(2.0 / n);
        for (int i = 0; i < n; ++i)
            C[static_cast<std::size_t>(k) * n + i] =
                s * std::cos(std::numbers::pi * (i + 0.5) * k / n);
    }
    return C;
}

/// Solves -lap u = G with Neumann boundary (G mean-zero) by diagonalizing
/// in the cosine basis; grids are small enough for dense transforms.
struct PoissonSolver {
    Grid2D grid;
    std::vector<double> Cx, Cy; // DCT matrices
    std::vector<double> inv_eig;

    explicit PoissonSolver(const Grid2D& g) : grid(g) {
        Cx = dct_matrix(g.nx);
        Cy = dct_matrix(g.ny);
        inv_eig.assign(g.size(), 0.0);
        for (int k = 0; k < g.nx; ++k) {
            double lx = sqr(2.0 * std::sin(std::numbers::pi * k / (2.0 * g.nx))) / sqr(g.hx());
            for (int l = 0; l < g.ny; ++l) {
                double ly =
                    sqr(2.0 * std::sin(std::numbers::pi * l / (2.0 * g.ny))) / sqr(g.hy());
                double lam = lx + ly;
                inv_eig[grid.idx(k, l)] = lam > 0.0 ? 1.0 / lam : 0.0;
            }
        }
    }

    std::vector<double> solve(const std::vector<double>& G) const {
        const int nx = grid.nx, ny = grid.ny;
        std::vector<double> t1(grid.size(), 0.0), t2(grid.size(), 0.0);
        // t1 = Cx * G (transform rows of x)
        for (int k = 0; k < nx; ++k)
            for (int i = 0; i < nx; ++i) {
                double c = Cx[static_cast<std::size_t>(k) * nx + i];
                if (c == 0.0) continue;
                const double* src = G.data() + grid.idx(i, 0);
                double* dst = t1.data() + grid.idx(k, 0);
                for (int j = 0; j < ny; ++j) dst[j] += c * src[j];
            }
        // t2 = t1 * Cy^T (transform y), scale, then invert transforms
        for (int i = 0; i < nx; ++i)
            for (int l = 0; l < ny; ++l) {
                double acc = 0.0;
                const double* row = t1.data() + grid.idx(i, 0);
                const double* cl = Cy.data() + static_cast<std::size_t>(l) * ny;
                for (int j = 0; j < ny; ++j) acc += row[j] * cl[j];
                t2[grid.idx(i, l)] = acc * inv_eig[grid.idx(i, l)];
            }
        std::fill(t1.begin(), t1.end(), 0.0);
        // t1 = Cx^T * t2
        for (int i = 0; i < nx; ++i)
            for (int k = 0; k < nx; ++k) {
                double c = Cx[static_cast<std::size_t>(k) * nx + i];
                if (c == 0.0) continue;
                const double* src = t2.data() + grid.idx(k, 0);
                double* dst = t1.data() + grid.idx(i, 0);
                for (int j = 0; j < ny; ++j) dst[j] += c * src[j];
            }
        std::vector<double> u(grid.size(), 0.0);
        for (int i = 0; i < nx; ++i)
            for (int j = 0; j < ny; ++j) {
                double acc = 0.0;
                const double* row = t1.data() + grid.idx(i, 0);
                for (int l = 0; l < ny; ++l)
                    acc += row[l] * Cy[static_cast<std::size_t>(l) * ny + j];
                u[grid.idx(i, j)] = acc;
            }
        return u;
    }
};

/// Bilinear mass splat at arbitrary positions; positions outside the hull
/// are clamped (counted if a counter is supplied).
inline std::vector<double> splat(const Grid2D& g, const std::vector<double>& masses,
                                 const std::vector<double>& px, const std::vector<double>& py,
                                 int* clamped = nullptr) {
    std::vector<double> out(g.size(), 0.0);
    for (std::size_t k = 0; k < masses.size(); ++k) {
        double fx = (px[k] - g.x0) / g.hx();
        double fy = (py[k] - g.y0) / g.hy();
        if (fx < 0.0 || fx > g.nx - 1 || fy < 0.0 || fy > g.ny - 1) {
            if (clamped) ++(*clamped);
            fx = std::min(std::max(fx, 0.0), static_cast<double>(g.nx - 1));
            fy = std::min(std::max(fy, 0.0), static_cast<double>(g.ny - 1));
        }
        int i0 = std::min(static_cast<int>(fx), g.nx - 2);
        int j0 = std::min(static_cast<int>(fy), g.ny - 2);
        double ax = fx - i0, ay = fy - j0;
        out[g.idx(i0, j0)] += masses[k] * (1 - ax) * (1 - ay);
        out[g.idx(i0 + 1, j0)] += masses[k] * ax * (1 - ay);
        out[g.idx(i0, j0 + 1)] += masses[k] * (1 - ax) * ay;
        out[g.idx(i0 + 1, j0 + 1)] += masses[k] * ax * ay;
    }
    return out;
}

inline double bilinear(const Grid2D& g, const std::vector<double>& v, double x, double y) {
    double fx = std::min(std::max((x - g.x0) / g.hx(), 0.0), static_cast<double>(g.nx - 1));
    double fy = std::min(std::max((y - g.y0) / g.hy(), 0.0), static_cast<double>(g.ny - 1));
    int i0 = std::min(static_cast<int>(fx), g.nx - 2);
    int j0 = std::min(static_cast<int>(fy), g.ny - 2);
    double ax = fx - i0, ay = fy - j0;
    return v[g.idx(i0, j0)] * (1 - ax) * (1 - ay) + v[g.idx(i0 + 1, j0)] * ax * (1 - ay) +
           v[g.idx(i0, j0 + 1)] * (1 - ax) * ay + v[g.idx(i0 + 1, j0 + 1)] * ax * ay;
}

} // namespace detail2d

struct OtSolution2D {
    Potential2D phi;      // centered against mu
    VectorField2D map;    // T(x) = x - grad phi(x)
    double w2 = 0.0;      // sqrt(2 * dual value)
    std::vector<double> dual_trace;
    bool support_overlap_warning = false;
    bool stalled = false; // dual improvement below 1e-12 before iters ran out
};

/// Semi-dual ascent for the quadratic-cost transport between grid
/// densities. Alternates Sobolev-preconditioned ascent steps on the
/// source-side potential and its c-transform on the target side
/// (back-and-forth), with backtracking so the dual value never decreases.
inline OtSolution2D ot_solve_2d(const Density2D& mu, const Density2D& nu, int iters = 60,
                                double step0 = 1.0) {
    require(mu.grid.same_as(nu.grid), "ot_solve_2d: grids must match");
    const Grid2D& g = mu.grid;
    require(static_cast<int>(g.size()) <= kMaxGrid2DNodes, "ot_solve_2d: grid too large");
    auto w = g.cell_weights();

    double overlap = 0.0;
    for (std::size_t k = 0; k < g.size(); ++k) overlap += std::min(mu.values[k], nu.values[k]) * w[k];

    std::vector<double> mu_mass(g.size()), nu_mass(g.size());
    for (std::size_t k = 0; k < g.size(); ++k) {
        mu_mass[k] = mu.values[k] * w[k];
        nu_mass[k] = nu.values[k] * w[k];
    }
    // argmin positions as coordinates
    std::vector<double> nodex(g.size()), nodey(g.size());
    for (int i = 0; i < g.nx; ++i)
        for (int j = 0; j < g.ny; ++j) {
            nodex[g.idx(i, j)] = g.nodex(i);
            nodey[g.idx(i, j)] = g.nodey(j);
        }

    detail2d::PoissonSolver poisson(g);
    std::vector<double> phi(g.size(), 0.0), phic, tmp;
    std::vector<int> arg;

    auto dual = [&](const std::vector<double>& f) {
        detail2d::c_transform_argmin(f, g, tmp, arg);
        double J = 0.0;
        for (std::size_t k = 0; k < g.size(); ++k)
            J += f[k] * mu_mass[k] + tmp[k] * nu_mass[k];
        return J;
    };

    auto ascend = [&](std::vector<double>& f, const std::vector<double>& own_mass,
                      const std::vector<double>& other_mass, double& step, double J0) {
        // gradient of J at f: own - S_# other, S the c-transform matching
        detail2d::c_transform_argmin(f, g, phic, arg);
        std::vector<double> spx(g.size()), spy(g.size());
        for (std::size_t k = 0; k < g.size(); ++k) {
            spx[k] = nodex[static_cast<std::size_t>(arg[k])];
            spy[k] = nodey[static_cast<std::size_t>(arg[k])];
        }
        std::vector<double> pushed = detail2d::splat(g, other_mass, spx, spy);
        std::vector<double> G(g.size());
        for (std::size_t k = 0; k < g.size(); ++k) G[k] = (own_mass[k] - pushed[k]) / w[k];
        std::vector<double> u = poisson.solve(G);
        double J = J0;
        std::vector<double> cand(g.size());
        while (step > 1e-11) {
            for (std::size_t k = 0; k < g.size(); ++k) cand[k] = f[k] + step * u[k];
            detail2d::c_transform_argmin(cand, g, tmp, arg);
            double Jn = 0.0;
            for (std::size_t k = 0; k < g.size(); ++k)
                Jn += cand[k] * own_mass[k] + tmp[k] * other_mass[k];
            if (Jn >= J) {
                f = cand;
                step = std::min(step * 1.3, 1e3);
                return Jn;
            }
            step *= 0.5;
        }
        return J;
    };

    OtSolution2D sol;
    sol.support_overlap_warning = overlap < 1e-9;
    double J = dual(phi);
    sol.dual_trace.push_back(J);
    double step_phi = step0, step_psi = step0;
    for (int it = 0; it < iters; ++it) {
        double J1 = ascend(phi, mu_mass, nu_mass, step_phi, J);
        // target side: psi = phi^c, then flip back (double c-transform
        // can only raise the dual)
        detail2d::c_transform_argmin(phi, g, phic, arg);
        std::vector<double> psi = phic;
        double J2 = 0.0;
        {
            detail2d::c_transform_argmin(psi, g, tmp, arg);
            for (std::size_t k = 0; k < g.size(); ++k)
                J2 += psi[k] * nu_mass[k] + tmp[k] * mu_mass[k];
        }
        J2 = ascend(psi, nu_mass, mu_mass, step_psi, J2);
        detail2d::c_transform_argmin(psi, g, phic, arg);
        phi = phic;
        double Jn = dual(phi);
        if (Jn < J1) { // numerical guard; the flip should not lose value
            Jn = J1;
        }
        double impr = Jn - J;
        J = Jn;
        sol.dual_trace.push_back(J);
        if (impr < 1e-12 * std::max(std::abs(J), 1e-12) && it > 2) {
            sol.stalled = it + 1 < iters;
            break;
        }
    }

    // center against mu and build outputs
    double c = 0.0;
    for (std::size_t k = 0; k < g.size(); ++k) c += phi[k] * mu_mass[k];
    for (double& v : phi) v -= c;
    sol.phi.grid = g;
    sol.phi.values = std::move(phi);
    fill_gradient(sol.phi);
    sol.map.grid = g;
    sol.map.tx.assign(g.size(), 0.0);
    sol.map.ty.assign(g.size(), 0.0);
    for (std::size_t k = 0; k < g.size(); ++k) {
        sol.map.tx[k] = nodex[k] - sol.phi.gx[k];
        sol.map.ty[k] = nodey[k] - sol.phi.gy[k];
    }
    sol.w2 = std::sqrt(std::max(2.0 * J, 0.0));
    return sol;
}

/// Mass splatting pushforward: each cell's mass lands at its mapped
/// position with bilinear weights; the result is renormalized.
inline Density2D pushforward_2d(const Density2D& reference, const VectorField2D& field,
                                int* clamped = nullptr) {
    require(reference.grid.same_as(field.grid), "pushforward_2d: grid mismatch");
    const Grid2D& g = reference.grid;
    auto w = g.cell_weights();
    std::vector<double> masses(g.size());
    for (std::size_t k = 0; k < g.size(); ++k) masses[k] = reference.values[k] * w[k];
    std::vector<double> out_mass = detail2d::splat(g, masses, field.tx, field.ty, clamped);
    std::vector<double> dens(g.size());
    for (std::size_t k = 0; k < g.size(); ++k) dens[k] = out_mass[k] / w[k];
    return Density2D(g, std::move(dens));
}

/// Fixed-point barycenter iteration: push the iterate through the mean of
/// the maps to the inputs until the mean displacement field is small.
inline Density2D barycenter_2d(const std::vector<Density2D>& ds, int iters = 8,
                               int inner_iters = 40, double tol_cells = 0.25) {
    require(!ds.empty(), "barycenter_2d: empty list");
    require(ds.size() <= 16, "barycenter_2d: too many densities for desk scale");
    const Grid2D& g = ds.front().grid;
    for (const auto& d : ds) require(d.grid.same_as(g), "barycenter_2d: grid mismatch");
    Density2D omega = ds.front();
    if (ds.size() == 1) return omega;
    const double cell = std::min(g.hx(), g.hy());
    for (int it = 0; it < iters; ++it) {
        VectorField2D mean;
        mean.grid = g;
        mean.tx.assign(g.size(), 0.0);
        mean.ty.assign(g.size(), 0.0);
        std::vector<VectorField2D> maps(ds.size());
        parallel_for(ds.size(), [&](std::size_t j) {
            maps[j] = ot_solve_2d(omega, ds[j], inner_iters).map;
        });
        for (std::size_t j = 0; j < ds.size(); ++j)
            for (std::size_t k = 0; k < g.size(); ++k) {
                mean.tx[k] += maps[j].tx[k] / static_cast<double>(ds.size());
                mean.ty[k] += maps[j].ty[k] / static_cast<double>(ds.size());
            }
        double sup = 0.0;
        for (int i = 0; i < g.nx; ++i)
            for (int j2 = 0; j2 < g.ny; ++j2) {
                std::size_t k = g.idx(i, j2);
                if (omega.values[k] <= 1e-6) continue;
                sup = std::max(sup, std::hypot(mean.tx[k] - g.nodex(i),
                                               mean.ty[k] - g.nodey(j2)));
            }
        if (sup <= tol_cells * cell) break;
        omega = pushforward_2d(omega, mean);
    }
    return omega;
}

/// The sign-aware composition in two dimensions: values compose the
/// integrated f with phi, the gradient field is scaled per node by
/// f'(+-phi).
inline Potential2D circledcirc_2d(const StepParams& f, const Potential2D& phi) {
    const double z1 = f.knots.front(), zK = f.knots.back();
    const double tol = 1e-12 * std::max(1.0, zK - z1);
    for (double v : phi.values)
        if (v < z1 - tol || v > zK + tol || -v < z1 - tol || -v > zK + tol)
            throw invalid_input("circledcirc_2d: knot span too small");
    const double s = f.sign == Sign::plus ? 1.0 : -1.0;
    Potential2D out;
    out.grid = phi.grid;
    out.values.resize(phi.values.size());
    out.gx.resize(phi.values.size());
    out.gy.resize(phi.values.size());
    for (std::size_t k = 0; k < phi.values.size(); ++k) {
        double t = s * phi.values[k];
        double scale = f.fprime(t);
        out.values[k] = s * f.fvalue(t);
        out.gx[k] = scale * phi.gx[k];
        out.gy[k] = scale * phi.gy[k];
    }
    return out;
}

/// Two-dimensional training sample with cached transport quantities.
struct Dataset2D {
    Grid2D grid;
    std::vector<Density2D> responses;
    std::vector<std::vector<Density2D>> predictors; // n x p
    Density2D nu_bar;
    std::vector<Density2D> mu_bars;
    std::vector<std::vector<Potential2D>> potentials; // n x p

    std::size_t n() const { return responses.size(); }
    std::size_t p() const { return mu_bars.size(); }
};

inline Dataset2D make_dataset_2d(std::vector<Density2D> responses,
                                 std::vector<std::vector<Density2D>> predictors,
                                 int bary_iters = 6, int ot_iters = 60) {
    require(!responses.empty(), "make_dataset_2d: no records");
    const std::size_t n = responses.size();
    const std::size_t p = predictors.empty() ? 0 : predictors.front().size();
    require(predictors.size() == n, "make_dataset_2d: row count mismatch");
    Dataset2D d;
    d.grid = responses.front().grid;
    d.responses = std::move(responses);
    d.predictors = std::move(predictors);
    d.nu_bar = barycenter_2d(d.responses, bary_iters, ot_iters);
    for (std::size_t j = 0; j < p; ++j) {
        std::vector<Density2D> col;
        for (std::size_t i = 0; i < n; ++i) col.push_back(d.predictors[i][j]);
        d.mu_bars.push_back(barycenter_2d(col, bary_iters, ot_iters));
    }
    d.potentials.assign(n, {});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < p; ++j)
            d.potentials[i].push_back(ot_solve_2d(d.mu_bars[j], d.predictors[i][j], ot_iters).phi);
    return d;
}

struct FitConfig2D {
    double step_size = 0.0; // 0 = auto from the linearized quadratic form
    int max_iters = 40;
    int inner_ot_iters = 40;
    double tol = 1e-8;
    std::size_t knots = 8;
    SignConfig delta; // empty = all plus
};

struct FitResult2D {
    std::vector<StepParams> step_params;
    std::vector<double> loss_trace; // exact Wasserstein loss per iteration
    std::vector<std::string> warnings;
};

/// Projected gradient descent on theta for two-dimensional data with
/// distributional predictors only. Each iteration recomputes the model
/// pushforwards, solves the residual transport problems, and integrates
/// the level-set-binned gradient of Theorem-style form
///   -(2/n) sum_i int <Delta_i, grad phi_i^j> 1{+-phi <= z_l} d nu_bar.
inline FitResult2D fit_2d(const Dataset2D& data, const FitConfig2D& cfg) {
    const std::size_t n = data.n(), p = data.p();
    require(p >= 1, "fit_2d: need at least one distributional predictor");
    const Grid2D& g = data.grid;
    auto w = g.cell_weights();
    SignConfig delta = cfg.delta.empty() ? SignConfig(p, Sign::plus) : cfg.delta;
    require(delta.size() == p, "fit_2d: sign config arity mismatch");

    // knots per predictor spanning observed +-phi
    std::vector<std::vector<double>> knots(p);
    for (std::size_t j = 0; j < p; ++j) {
        double M = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            for (double v : data.potentials[i][j].values) M = std::max(M, std::abs(v));
        knots[j] = padded_knots(-M, M, cfg.knots);
    }
    const std::size_t K = cfg.knots;

    // level indices and gradient-dot tables
    std::vector<std::vector<std::vector<std::uint16_t>>> lev(
        p, std::vector<std::vector<std::uint16_t>>(n));
    for (std::size_t j = 0; j < p; ++j) {
        const double s = delta[j] == Sign::plus ? 1.0 : -1.0;
        for (std::size_t i = 0; i < n; ++i) {
            lev[j][i].resize(g.size());
            for (std::size_t k = 0; k < g.size(); ++k) {
                double t = s * data.potentials[i][j].values[k];
                lev[j][i][k] = static_cast<std::uint16_t>(
                    std::lower_bound(knots[j].begin(), knots[j].end(), t) - knots[j].begin());
            }
        }
    }

    // mass weight of the reference
    std::vector<double> omega(g.size());
    for (std::size_t k = 0; k < g.size(); ++k) omega[k] = data.nu_bar.values[k] * w[k];

    // step size from the linearized quadratic form (indicator design)
    std::vector<std::vector<double>> theta(p, std::vector<double>(K, 0.0));
    double lambda_est = 0.0;
    {
        // power iteration on H v = (2/n) sum_i D_i' W D_i v using the level
        // structure; D columns are <grad phi, grad phi> weighted indicators
        std::vector<double> v(p * K, 0.3), Hv(p * K, 0.0);
        for (int it = 0; it < 15; ++it) {
            std::fill(Hv.begin(), Hv.end(), 0.0);
            for (std::size_t i = 0; i < n; ++i) {
                // a_i(x) = sum_{j,l} v_{jl} 1{lev_ij <= l} gphi_ij(x)
                std::vector<double> ax(g.size(), 0.0), ay(g.size(), 0.0);
                for (std::size_t j = 0; j < p; ++j) {
                    std::vector<double> suf(K + 1, 0.0);
                    for (std::size_t l = K; l-- > 0;) suf[l] = suf[l + 1] + v[j * K + l];
                    // prefix of v: value at level m is sum_{l >= m} v_l
                    for (std::size_t k = 0; k < g.size(); ++k) {
                        double coef = suf[lev[j][i][k]];
                        ax[k] += coef * data.potentials[i][j].gx[k];
                        ay[k] += coef * data.potentials[i][j].gy[k];
                    }
                }
                for (std::size_t j = 0; j < p; ++j) {
                    std::vector<double> acc(K + 1, 0.0);
                    for (std::size_t k = 0; k < g.size(); ++k)
                        acc[lev[j][i][k]] += omega[k] * (ax[k] * data.potentials[i][j].gx[k] +
                                                         ay[k] * data.potentials[i][j].gy[k]);
                    double run = 0.0;
                    for (std::size_t l = 0; l < K; ++l) {
                        run += acc[l];
                        Hv[j * K + l] += 2.0 / static_cast<double>(n) * run;
                    }
                }
            }
            double nrm = std::sqrt(dot(Hv, Hv));
            if (nrm <= 0.0) break;
            lambda_est = nrm;
            for (std::size_t r = 0; r < v.size(); ++r) v[r] = Hv[r] / nrm;
        }
    }
    double step = cfg.step_size > 0.0
                      ? cfg.step_size
                      : (lambda_est > 0.0 ? 0.9 / (2.0 * lambda_est) : 0.1);

    FitResult2D res;
    std::vector<double> prev_loss_trace;
    for (int it = 0; it < cfg.max_iters; ++it) {
        // forward: intercept grids, model maps, pushforwards, residuals
        std::vector<std::vector<double>> fgx(n, std::vector<double>(g.size(), 0.0));
        std::vector<std::vector<double>> fgy(n, std::vector<double>(g.size(), 0.0));
        for (std::size_t j = 0; j < p; ++j) {
            std::vector<double> suf(K + 1, 0.0);
            for (std::size_t l = K; l-- > 0;) suf[l] = suf[l + 1] + theta[j][l];
            std::vector<double> mean_gx(g.size(), 0.0), mean_gy(g.size(), 0.0);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t k = 0; k < g.size(); ++k) {
                    double coef = suf[lev[j][i][k]];
                    double vx = coef * data.potentials[i][j].gx[k];
                    double vy = coef * data.potentials[i][j].gy[k];
                    fgx[i][k] += vx;
                    fgy[i][k] += vy;
                    mean_gx[k] += vx / static_cast<double>(n);
                    mean_gy[k] += vy / static_cast<double>(n);
                }
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t k = 0; k < g.size(); ++k) {
                    fgx[i][k] -= mean_gx[k];
                    fgy[i][k] -= mean_gy[k];
                }
        }
        // residual gradients Delta_i and the exact loss
        std::vector<std::vector<double>> Rx(n, std::vector<double>(g.size(), 0.0));
        std::vector<std::vector<double>> Ry(n, std::vector<double>(g.size(), 0.0));
        std::vector<double> losses(n, 0.0);
        std::vector<char> stall_flags(n, 0);
        parallel_for(n, [&](std::size_t i) {
            VectorField2D Ti;
            Ti.grid = g;
            Ti.tx.resize(g.size());
            Ti.ty.resize(g.size());
            for (int a = 0; a < g.nx; ++a)
                for (int b = 0; b < g.ny; ++b) {
                    std::size_t k = g.idx(a, b);
                    Ti.tx[k] = g.nodex(a) - fgx[i][k];
                    Ti.ty[k] = g.nodey(b) - fgy[i][k];
                }
            Density2D pushed = pushforward_2d(data.nu_bar, Ti);
            OtSolution2D resid = ot_solve_2d(pushed, data.responses[i], cfg.inner_ot_iters);
            if (resid.stalled) stall_flags[i] = 1;
            losses[i] = sqr(resid.w2);
            for (std::size_t k = 0; k < g.size(); ++k) {
                Rx[i][k] = detail2d::bilinear(g, resid.phi.gx, Ti.tx[k], Ti.ty[k]);
                Ry[i][k] = detail2d::bilinear(g, resid.phi.gy, Ti.tx[k], Ti.ty[k]);
            }
        });
        res.loss_trace.push_back(sum(losses) / static_cast<double>(n));
        std::vector<double> mRx(g.size(), 0.0), mRy(g.size(), 0.0);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t k = 0; k < g.size(); ++k) {
                mRx[k] += Rx[i][k] / static_cast<double>(n);
                mRy[k] += Ry[i][k] / static_cast<double>(n);
            }
        // gradient and projected step
        for (std::size_t j = 0; j < p; ++j) {
            std::vector<double> acc(K + 1, 0.0);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t k = 0; k < g.size(); ++k)
                    acc[lev[j][i][k]] +=
                        omega[k] * ((Rx[i][k] - mRx[k]) * data.potentials[i][j].gx[k] +
                                    (Ry[i][k] - mRy[k]) * data.potentials[i][j].gy[k]);
            double run = 0.0;
            for (std::size_t l = 0; l < K; ++l) {
                run += acc[l];
                double grad = -2.0 / static_cast<double>(n) * run;
                double& t = theta[j][l];
                t -= step * grad;
                t = delta[j] == Sign::plus ? std::max(t, 0.0) : std::min(t, 0.0);
            }
        }
        bool any_stall = false;
        for (char c : stall_flags) any_stall |= (c != 0);
        if (any_stall && res.warnings.empty())
            res.warnings.push_back("inner transport solve stalled before convergence");
        if (res.loss_trace.size() >= 2) {
            double prev = res.loss_trace[res.loss_trace.size() - 2];
            double cur = res.loss_trace.back();
            if (std::abs(prev - cur) < cfg.tol * std::max(prev, 1e-12) && it > 3) break;
        }
    }
    for (std::size_t j = 0; j < p; ++j)
        res.step_params.emplace_back(knots[j], theta[j], delta[j], 0.0);
    return res;
}

} // namespace kr
