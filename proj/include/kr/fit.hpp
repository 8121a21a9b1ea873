#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "kr/model.hpp"

namespace kr {

struct FitConfig {
    double step_size = 0.0; // 0 = auto: 0.9 / L with L from power iteration
    int max_iters = 20000;
    double tol = 1e-12;                        // relative loss decrease
    std::vector<SignConfig> sign_configs;      // empty = all 2^p
    std::vector<double> project_rho_box;       // optional per-k cap on sum(vartheta)
    std::size_t knots_f = 100;                 // knots per distributional predictor
    std::size_t knots_psi = 100;               // knots per scalar covariate
};

struct FitResult {
    ModelSpec model;
    std::vector<double> loss_trace; // winning delta, nonincreasing
    SignConfig chosen_delta;
    std::vector<std::pair<SignConfig, double>> per_delta_losses;
    double grad_norm_final = 0.0;
    std::vector<std::string> warnings;
};

/// Componentwise projection onto the sign cone of delta (theta blocks) and
/// the nonnegative orthant (vartheta blocks), with an optional cap on each
/// sum(vartheta_k) realized as the Euclidean projection onto
/// {v >= 0, sum v <= cap}.
inline void project(std::vector<std::vector<double>>& theta,
                    std::vector<std::vector<double>>& vartheta, const SignConfig& delta,
                    const std::vector<double>& rho_box = {}) {
    for (std::size_t j = 0; j < theta.size(); ++j)
        for (double& t : theta[j])
            t = delta[j] == Sign::plus ? std::max(t, 0.0) : std::min(t, 0.0);
    for (std::size_t k = 0; k < vartheta.size(); ++k) {
        auto& v = vartheta[k];
        for (double& x : v) x = std::max(x, 0.0);
        if (k < rho_box.size() && rho_box[k] > 0.0) {
            double cap = rho_box[k];
            double s = 0.0;
            for (double x : v) s += x;
            if (s > cap + 1e-15 * std::max(1.0, cap)) {
                // project onto the scaled simplex {x >= 0, sum x = cap}
                std::vector<double> srt = v;
                std::sort(srt.begin(), srt.end(), std::greater<double>());
                double csum = 0.0, tau = 0.0;
                for (std::size_t i = 0; i < srt.size(); ++i) {
                    csum += srt[i];
                    double t = (csum - cap) / static_cast<double>(i + 1);
                    if (i + 1 == srt.size() || srt[i + 1] <= t) {
                        tau = t;
                        break;
                    }
                }
                for (double& x : v) x = std::max(x - tau, 0.0);
            }
        }
    }
}

namespace detail {

/// Exact quadratic representation of the fitting objective for one sign
/// configuration: J(u) = u'Hu + 2g'u + c0 over the stacked parameter
/// vector u = [theta_1.. theta_p, vartheta_1.. vartheta_q]. Intercepts are
/// linear in theta and are folded into H and g, so recomputing them every
/// iteration is implicit.
struct QuadraticForm {
    std::size_t p = 0, q = 0, Kf = 0, Kp = 0;
    std::vector<double> H; // d x d row-major
    std::vector<double> g; // d
    double c0 = 0.0;
    std::vector<std::vector<double>> f_knots;  // per predictor
    std::vector<double> psi_knots;

    std::size_t dim() const { return p * Kf + q * Kp; }

    double loss(const std::vector<double>& u) const {
        const std::size_t d = dim();
        double quad = 0.0, lin = 0.0;
        for (std::size_t r = 0; r < d; ++r) {
            double hu = 0.0;
            const double* row = H.data() + r * d;
            for (std::size_t c = 0; c < d; ++c) hu += row[c] * u[c];
            quad += u[r] * hu;
            lin += g[r] * u[r];
        }
        return quad + 2.0 * lin + c0;
    }

    void grad(const std::vector<double>& u, std::vector<double>& out) const {
        const std::size_t d = dim();
        out.assign(d, 0.0);
        for (std::size_t r = 0; r < d; ++r) {
            double hu = 0.0;
            const double* row = H.data() + r * d;
            for (std::size_t c = 0; c < d; ++c) hu += row[c] * u[c];
            out[r] = 2.0 * (hu + g[r]);
        }
    }

    /// Largest eigenvalue of H by power iteration (fixed seed vector).
    double power_lambda(int iters = 20) const {
        const std::size_t d = dim();
        std::vector<double> v(d), w(d);
        for (std::size_t i = 0; i < d; ++i) v[i] = 1.0 + 0.001 * static_cast<double>(i % 7);
        double lam = 1.0;
        for (int it = 0; it < iters; ++it) {
            for (std::size_t r = 0; r < d; ++r) {
                double s = 0.0;
                const double* row = H.data() + r * d;
                for (std::size_t c = 0; c < d; ++c) s += row[c] * v[c];
                w[r] = s;
            }
            double nrm = std::sqrt(dot(w, w));
            if (nrm <= 0.0) return 0.0;
            lam = nrm;
            for (std::size_t i = 0; i < d; ++i) v[i] = w[i] / nrm;
        }
        return lam;
    }
};

/// Shared per-dataset precomputation reused across sign configurations.
struct FitWorkspace {
    std::size_t n = 0, p = 0, q = 0, m = 0;
    std::vector<double> omega;                    // trap weight * nu_bar density
    std::vector<std::vector<double>> f_knots;     // per predictor
    std::vector<double> psi_knots;
    std::vector<std::size_t> psi_x0;              // first node index with x >= z_l
    std::vector<double> phi_absmax;               // per predictor
};

inline FitWorkspace make_workspace(const Dataset& data, const FitConfig& cfg) {
    FitWorkspace ws;
    ws.n = data.n();
    ws.p = data.p();
    ws.q = data.q();
    ws.m = static_cast<std::size_t>(data.grid.n);
    ws.omega = data.grid.trap_weights();
    for (std::size_t x = 0; x < ws.m; ++x) ws.omega[x] *= data.nu_bar.values[x];
    ws.phi_absmax.assign(ws.p, 0.0);
    for (std::size_t j = 0; j < ws.p; ++j) {
        double M = 0.0;
        for (std::size_t i = 0; i < ws.n; ++i)
            for (double v : data.potentials[i][j].values) M = std::max(M, std::abs(v));
        ws.phi_absmax[j] = M;
        ws.f_knots.push_back(padded_knots(-M, M, cfg.knots_f));
    }
    if (ws.q > 0) {
        ws.psi_knots.resize(cfg.knots_psi);
        for (std::size_t l = 0; l < cfg.knots_psi; ++l)
            ws.psi_knots[l] = data.grid.lo + (data.grid.hi - data.grid.lo) *
                                                 static_cast<double>(l) /
                                                 static_cast<double>(cfg.knots_psi - 1);
        ws.psi_x0.resize(cfg.knots_psi);
        for (std::size_t l = 0; l < cfg.knots_psi; ++l) {
            std::size_t x0 = 0;
            while (x0 < ws.m && data.grid.node(static_cast<int>(x0)) < ws.psi_knots[l]) ++x0;
            ws.psi_x0[l] = x0;
        }
    }
    return ws;
}

/// Assembles H, g, c0 for one sign configuration. Uses the level-index
/// structure of the step basis: B_{ijl}(x) = phi'_{ij}(x) 1{l >= m_ij(x)},
/// so Gram blocks reduce to 2D prefix sums over level-bucket corners.
inline QuadraticForm assemble(const Dataset& data, const FitWorkspace& ws,
                              const SignConfig& delta) {
    const std::size_t n = ws.n, p = ws.p, q = ws.q, m = ws.m;
    const std::size_t Kf = p > 0 ? ws.f_knots.front().size() : 0;
    const std::size_t Kp = q > 0 ? ws.psi_knots.size() : 0;
    QuadraticForm Q;
    Q.p = p;
    Q.q = q;
    Q.Kf = Kf;
    Q.Kp = Kp;
    Q.f_knots = ws.f_knots;
    Q.psi_knots = ws.psi_knots;
    const std::size_t d = Q.dim();
    Q.H.assign(d * d, 0.0);
    Q.g.assign(d, 0.0);

    // c_i(x) = b_i(x) + (sum_k zhat_i^k) x   (identity part of psi')
    std::vector<std::vector<double>> c(n, std::vector<double>(m));
    std::vector<double> cbar(m, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        double zs = 0.0;
        for (std::size_t k = 0; k < q; ++k) zs += data.z_hat[i][k];
        for (std::size_t x = 0; x < m; ++x) {
            c[i][x] = data.response_disp[i][x] + zs * data.grid.node(static_cast<int>(x));
            cbar[x] += c[i][x];
        }
    }
    for (double& v : cbar) v /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t x = 0; x < m; ++x) Q.c0 += ws.omega[x] * sqr(c[i][x]);
    Q.c0 /= static_cast<double>(n);

    // level indices m_ij(x) = first knot >= s_j phi_ij(x), in [0, Kf]
    std::vector<std::vector<std::vector<std::uint16_t>>> lev(
        p, std::vector<std::vector<std::uint16_t>>(n));
    for (std::size_t j = 0; j < p; ++j) {
        const auto& kn = ws.f_knots[j];
        const double s = delta[j] == Sign::plus ? 1.0 : -1.0;
        for (std::size_t i = 0; i < n; ++i) {
            lev[j][i].resize(m);
            const auto& vals = data.potentials[i][j].values;
            for (std::size_t x = 0; x < m; ++x) {
                double t = s * vals[x];
                std::size_t idx = static_cast<std::size_t>(
                    std::lower_bound(kn.begin(), kn.end(), t) - kn.begin());
                lev[j][i][x] = static_cast<std::uint16_t>(idx);
            }
        }
    }

    // mean design Gbar[j](x, l) = (1/n) sum_i B_{ijl}(x), and the
    // zhat-weighted means for theta-vartheta cross blocks
    std::vector<std::vector<double>> Gbar(p, std::vector<double>(m * Kf, 0.0));
    std::vector<std::vector<double>> zGbar(p * q, std::vector<double>(m * Kf, 0.0));
    std::vector<double> bucket(Kf + 1);
    for (std::size_t j = 0; j < p; ++j) {
        for (std::size_t x = 0; x < m; ++x) {
            std::fill(bucket.begin(), bucket.end(), 0.0);
            for (std::size_t i = 0; i < n; ++i)
                bucket[lev[j][i][x]] += data.potentials[i][j].deriv[x];
            double run = 0.0;
            for (std::size_t l = 0; l < Kf; ++l) {
                run += bucket[l];
                Gbar[j][x * Kf + l] = run / static_cast<double>(n);
            }
            for (std::size_t k = 0; k < q; ++k) {
                std::fill(bucket.begin(), bucket.end(), 0.0);
                for (std::size_t i = 0; i < n; ++i)
                    bucket[lev[j][i][x]] += data.z_hat[i][k] * data.potentials[i][j].deriv[x];
                run = 0.0;
                for (std::size_t l = 0; l < Kf; ++l) {
                    run += bucket[l];
                    zGbar[j * q + k][x * Kf + l] = run / static_cast<double>(n);
                }
            }
        }
    }

    auto hat = [&](std::size_t r, std::size_t cidx) -> double& { return Q.H[r * d + cidx]; };

    // ---- theta-theta blocks
    std::vector<double> corner((Kf + 1) * (Kf + 1));
    for (std::size_t j = 0; j < p; ++j) {
        for (std::size_t j2 = j; j2 < p; ++j2) {
            std::fill(corner.begin(), corner.end(), 0.0);
            for (std::size_t i = 0; i < n; ++i) {
                const auto& d1 = data.potentials[i][j].deriv;
                const auto& d2 = data.potentials[i][j2].deriv;
                const auto& L1 = lev[j][i];
                const auto& L2 = lev[j2][i];
                for (std::size_t x = 0; x < m; ++x)
                    corner[L1[x] * (Kf + 1) + L2[x]] += ws.omega[x] * d1[x] * d2[x];
            }
            // 2D inclusive prefix sums give (1/n) sum_i sum_x w B B
            for (std::size_t a = 0; a <= Kf; ++a)
                for (std::size_t b = 1; b <= Kf; ++b) corner[a * (Kf + 1) + b] += corner[a * (Kf + 1) + b - 1];
            for (std::size_t b = 0; b <= Kf; ++b)
                for (std::size_t a = 1; a <= Kf; ++a) corner[a * (Kf + 1) + b] += corner[(a - 1) * (Kf + 1) + b];
            for (std::size_t l = 0; l < Kf; ++l) {
                for (std::size_t l2 = 0; l2 < Kf; ++l2) {
                    double first = corner[l * (Kf + 1) + l2] / static_cast<double>(n);
                    double corr = 0.0;
                    const double* G1 = Gbar[j].data();
                    const double* G2 = Gbar[j2].data();
                    for (std::size_t x = 0; x < m; ++x)
                        corr += ws.omega[x] * G1[x * Kf + l] * G2[x * Kf + l2];
                    double v = first - corr;
                    hat(j * Kf + l, j2 * Kf + l2) = v;
                    if (j2 != j) hat(j2 * Kf + l2, j * Kf + l) = v;
                }
            }
            if (j2 == j)
                for (std::size_t l = 0; l < Kf; ++l)
                    for (std::size_t l2 = 0; l2 < l; ++l2)
                        hat(j * Kf + l, j * Kf + l2) =
                            (hat(j * Kf + l, j * Kf + l2) + hat(j * Kf + l2, j * Kf + l)) * 0.5,
                        hat(j * Kf + l2, j * Kf + l) = hat(j * Kf + l, j * Kf + l2);
        }
    }

    // ---- theta-vartheta blocks: -sum_{x >= z_l'} w(x) zGbar[j,k](x, l)
    for (std::size_t j = 0; j < p; ++j) {
        for (std::size_t k = 0; k < q; ++k) {
            const auto& ZG = zGbar[j * q + k];
            // x-suffix cumulative per l
            std::vector<double> sfx(m * Kf, 0.0);
            for (std::size_t l = 0; l < Kf; ++l) {
                double run = 0.0;
                for (std::size_t x = m; x-- > 0;) {
                    run += ws.omega[x] * ZG[x * Kf + l];
                    sfx[x * Kf + l] = run;
                }
            }
            for (std::size_t l = 0; l < Kf; ++l) {
                for (std::size_t l2 = 0; l2 < Kp; ++l2) {
                    std::size_t x0 = ws.psi_x0[l2];
                    double v = x0 < m ? -sfx[x0 * Kf + l] : 0.0;
                    hat(j * Kf + l, p * Kf + k * Kp + l2) = v;
                    hat(p * Kf + k * Kp + l2, j * Kf + l) = v;
                }
            }
        }
    }

    // ---- vartheta-vartheta blocks
    if (q > 0) {
        std::vector<double> somega(m + 1, 0.0);
        for (std::size_t x = m; x-- > 0;) somega[x] = somega[x + 1] + ws.omega[x];
        for (std::size_t k = 0; k < q; ++k) {
            for (std::size_t k2 = k; k2 < q; ++k2) {
                double zz = 0.0;
                for (std::size_t i = 0; i < n; ++i) zz += data.z_hat[i][k] * data.z_hat[i][k2];
                zz /= static_cast<double>(n);
                for (std::size_t l = 0; l < Kp; ++l) {
                    for (std::size_t l2 = 0; l2 < Kp; ++l2) {
                        std::size_t x0 = std::max(ws.psi_x0[l], ws.psi_x0[l2]);
                        double v = zz * somega[x0];
                        hat(p * Kf + k * Kp + l, p * Kf + k2 * Kp + l2) = v;
                        if (k2 != k) hat(p * Kf + k2 * Kp + l2, p * Kf + k * Kp + l) = v;
                    }
                }
            }
        }
    }

    // ---- linear term
    for (std::size_t j = 0; j < p; ++j) {
        std::vector<double> acc(Kf + 1, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            const auto& dphi = data.potentials[i][j].deriv;
            const auto& L = lev[j][i];
            for (std::size_t x = 0; x < m; ++x)
                acc[L[x]] += ws.omega[x] * dphi[x] * (c[i][x] - cbar[x]);
        }
        double run = 0.0;
        for (std::size_t l = 0; l < Kf; ++l) {
            run += acc[l];
            Q.g[j * Kf + l] = run / static_cast<double>(n);
        }
    }
    for (std::size_t k = 0; k < q; ++k) {
        std::vector<double> zc(m, 0.0);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t x = 0; x < m; ++x) zc[x] += data.z_hat[i][k] * c[i][x];
        std::vector<double> sfx(m + 1, 0.0);
        for (std::size_t x = m; x-- > 0;)
            sfx[x] = sfx[x + 1] + ws.omega[x] * zc[x] / static_cast<double>(n);
        for (std::size_t l = 0; l < Kp; ++l) Q.g[p * Kf + k * Kp + l] = -sfx[ws.psi_x0[l]];
    }
    return Q;
}

inline std::vector<SignConfig> all_sign_configs(std::size_t p) {
    require(p <= 16, "fit: sign enumeration limited to p <= 16");
    std::vector<SignConfig> out;
    const std::size_t total = static_cast<std::size_t>(1) << p;
    out.reserve(total);
    for (std::size_t c = 0; c < total; ++c) {
        SignConfig sc(p);
        for (std::size_t j = 0; j < p; ++j)
            sc[j] = ((c >> (p - 1 - j)) & 1) == 0 ? Sign::plus : Sign::minus;
        out.push_back(sc);
    }
    return out; // lexicographic with + < -
}

} // namespace detail

/// Builds a ModelSpec from stacked parameters (no intercepts yet).
inline ModelSpec build_model(const Dataset& data, const detail::QuadraticForm& Q,
                             const SignConfig& delta, const std::vector<double>& u) {
    ModelSpec ms;
    ms.grid = data.grid;
    ms.sign_config = delta;
    ms.centering = data.centering;
    ms.z_means = data.z_means;
    for (std::size_t j = 0; j < Q.p; ++j) {
        std::vector<double> th(u.begin() + static_cast<long>(j * Q.Kf),
                               u.begin() + static_cast<long>((j + 1) * Q.Kf));
        ms.step_params.emplace_back(Q.f_knots[j], std::move(th), delta[j], 0.0);
    }
    for (std::size_t k = 0; k < Q.q; ++k) {
        std::vector<double> vt(u.begin() + static_cast<long>(Q.p * Q.Kf + k * Q.Kp),
                               u.begin() + static_cast<long>(Q.p * Q.Kf + (k + 1) * Q.Kp));
        ms.psi_params.emplace_back(Q.psi_knots, std::move(vt));
    }
    return ms;
}

/// Analytic partial derivatives of the quadratic loss with respect to
/// theta_{j,.}, by direct quadrature of the mean-subtracted residual form.
inline std::vector<double> grad_theta(const ModelSpec& model_in, const Dataset& data,
                                      std::size_t j) {
    ModelSpec model = model_in;
    refresh_intercepts(model, data);
    const std::size_t n = data.n();
    const std::size_t m = static_cast<std::size_t>(data.grid.n);
    auto w = data.grid.trap_weights();
    for (std::size_t x = 0; x < m; ++x) w[x] *= data.nu_bar.values[x];

    std::vector<std::vector<double>> R(n); // T_Phi - T_resp = -(b + Phi')
    std::vector<double> Rbar(m, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        Potential1D Phi = model_potential(model, data.potentials[i], data.z_hat[i]);
        R[i].resize(m);
        for (std::size_t x = 0; x < m; ++x) {
            R[i][x] = -(data.response_disp[i][x] + Phi.deriv[x]);
            Rbar[x] += R[i][x];
        }
    }
    for (double& v : Rbar) v /= static_cast<double>(n);

    const auto& f = model.step_params[j];
    const double s = f.sign == Sign::plus ? 1.0 : -1.0;
    const std::size_t K = f.K();
    std::vector<double> bucket(K + 1, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        const auto& pot = data.potentials[i][j];
        for (std::size_t x = 0; x < m; ++x) {
            std::size_t l = f.level_index(s * pot.values[x]);
            bucket[l] += (R[i][x] - Rbar[x]) * pot.deriv[x] * w[x];
        }
    }
    std::vector<double> grad(K, 0.0);
    double run = 0.0;
    for (std::size_t l = 0; l < K; ++l) {
        run += bucket[l];
        grad[l] = -2.0 / static_cast<double>(n) * run;
    }
    return grad;
}

/// Analytic partials with respect to vartheta_{k,.}: the chain rule
/// through Phi_i carries the centered covariate factor.
inline std::vector<double> grad_vartheta(const ModelSpec& model_in, const Dataset& data,
                                         std::size_t k) {
    ModelSpec model = model_in;
    refresh_intercepts(model, data);
    const std::size_t n = data.n();
    const std::size_t m = static_cast<std::size_t>(data.grid.n);
    auto w = data.grid.trap_weights();
    for (std::size_t x = 0; x < m; ++x) w[x] *= data.nu_bar.values[x];

    const auto& psi = model.psi_params[k];
    const std::size_t K = psi.K();
    std::vector<double> node_acc(m, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        Potential1D Phi = model_potential(model, data.potentials[i], data.z_hat[i]);
        for (std::size_t x = 0; x < m; ++x) {
            double Rix = -(data.response_disp[i][x] + Phi.deriv[x]);
            node_acc[x] += Rix * data.z_hat[i][k] * w[x];
        }
    }
    std::vector<double> grad(K, 0.0);
    for (std::size_t l = 0; l < K; ++l) {
        double acc = 0.0;
        for (std::size_t x = 0; x < m; ++x)
            if (data.grid.node(static_cast<int>(x)) >= psi.knots[l]) acc += node_acc[x];
        grad[l] = 2.0 / static_cast<double>(n) * acc;
    }
    return grad;
}

/// Projected gradient descent on the quadratic loss for each sign
/// configuration; returns the configuration with the smallest final loss
/// (lexicographic tie-break, + before -).
inline FitResult fit(const Dataset& data, const FitConfig& cfg) {
    require(data.n() >= 2, "fit: need at least 2 records");
    require(data.p() + data.q() >= 1, "fit: need at least one predictor");
    detail::FitWorkspace ws = detail::make_workspace(data, cfg);

    FitResult res;
    for (std::size_t j = 0; j < ws.p; ++j)
        if (ws.phi_absmax[j] < 1e-12)
            res.warnings.push_back("predictor " + std::to_string(j) +
                                   " is degenerate (all potentials vanish); theta kept at 0");

    std::vector<SignConfig> configs =
        cfg.sign_configs.empty() ? detail::all_sign_configs(ws.p) : cfg.sign_configs;

    double best_loss = 0.0;
    bool have_best = false;
    std::vector<double> best_u;
    SignConfig best_delta;
    std::vector<double> best_trace;
    double best_gnorm = 0.0;
    detail::QuadraticForm best_Q;

    for (const auto& delta : configs) {
        require(delta.size() == ws.p, "fit: sign config arity mismatch");
        detail::QuadraticForm Q = detail::assemble(data, ws, delta);
        const std::size_t d = Q.dim();
        double lambda = Q.power_lambda(20);
        double step = cfg.step_size > 0.0 ? cfg.step_size
                                          : (lambda > 0.0 ? 0.9 / (2.0 * lambda) : 1.0);

        std::vector<double> u(d, 0.0), gr(d);
        std::vector<double> trace;
        trace.reserve(static_cast<std::size_t>(cfg.max_iters) + 1);
        double prev = Q.loss(u);
        trace.push_back(prev);
        int bad_steps = 0;
        for (int it = 0; it < cfg.max_iters; ++it) {
            Q.grad(u, gr);
            for (std::size_t r = 0; r < d; ++r) u[r] -= step * gr[r];
            // componentwise projection
            for (std::size_t j = 0; j < ws.p; ++j) {
                bool pos = delta[j] == Sign::plus;
                for (std::size_t l = 0; l < Q.Kf; ++l) {
                    double& t = u[j * Q.Kf + l];
                    t = pos ? std::max(t, 0.0) : std::min(t, 0.0);
                }
            }
            for (std::size_t k = 0; k < ws.q; ++k) {
                for (std::size_t l = 0; l < Q.Kp; ++l) {
                    double& t = u[ws.p * Q.Kf + k * Q.Kp + l];
                    t = std::max(t, 0.0);
                }
                if (k < cfg.project_rho_box.size() && cfg.project_rho_box[k] > 0.0) {
                    std::vector<std::vector<double>> th, vt(1);
                    vt[0].assign(u.begin() + static_cast<long>(ws.p * Q.Kf + k * Q.Kp),
                                 u.begin() + static_cast<long>(ws.p * Q.Kf + (k + 1) * Q.Kp));
                    project(th, vt, {}, {cfg.project_rho_box[k]});
                    std::copy(vt[0].begin(), vt[0].end(),
                              u.begin() + static_cast<long>(ws.p * Q.Kf + k * Q.Kp));
                }
            }
            double cur = Q.loss(u);
            trace.push_back(cur);
            double slack = 1e-12 * std::max(1.0, std::abs(prev));
            if (!std::isfinite(cur) || cur > 1e12 * std::max(1.0, trace.front()))
                throw invariant_violation("fit: step size too large");
            if (cur > prev + slack) {
                if (++bad_steps >= 10) throw invariant_violation("fit: step size too large");
            } else {
                bad_steps = 0;
            }
            if (prev - cur < cfg.tol * std::max(prev, 1e-300) && it > 2) {
                prev = cur;
                break;
            }
            prev = cur;
        }
        // gradient-mapping norm at the final point
        Q.grad(u, gr);
        std::vector<double> moved = u;
        for (std::size_t r = 0; r < d; ++r) moved[r] -= step * gr[r];
        for (std::size_t j = 0; j < ws.p; ++j) {
            bool pos = delta[j] == Sign::plus;
            for (std::size_t l = 0; l < Q.Kf; ++l) {
                double& t = moved[j * Q.Kf + l];
                t = pos ? std::max(t, 0.0) : std::min(t, 0.0);
            }
        }
        for (std::size_t r = ws.p * Q.Kf; r < d; ++r) moved[r] = std::max(moved[r], 0.0);
        double gnorm = 0.0;
        for (std::size_t r = 0; r < d; ++r) gnorm += sqr((u[r] - moved[r]) / step);
        gnorm = std::sqrt(gnorm);

        res.per_delta_losses.emplace_back(delta, prev);
        if (!have_best || prev < best_loss - 1e-12) {
            have_best = true;
            best_loss = prev;
            best_u = u;
            best_delta = delta;
            best_trace = trace;
            best_gnorm = gnorm;
            best_Q = Q;
        }
    }

    res.model = build_model(data, best_Q, best_delta, best_u);
    refresh_intercepts(res.model, data);
    res.model.constants = estimate_constants(data);
    for (std::size_t j = 0; j < ws.p; ++j) {
        auto [k1, k2] = step_derivative_stats(res.model.step_params[j],
                                              best_Q.f_knots[j].front(),
                                              best_Q.f_knots[j].back());
        res.model.constants.kappa1[j] = k1;
        res.model.constants.kappa2[j] = k2;
    }
    for (std::size_t k = 0; k < ws.q; ++k) {
        // discrete curvature bound of the fitted psi on the grid
        double rho = 0.0;
        const double h = data.grid.h();
        double prev2 = res.model.psi_params[k].psi_prime(data.grid.node(0));
        for (int i = 1; i < data.grid.n; ++i) {
            double cur = res.model.psi_params[k].psi_prime(data.grid.node(i));
            rho = std::max(rho, std::abs(cur - prev2) / h);
            prev2 = cur;
        }
        res.model.constants.rho[k] = rho;
    }
    res.loss_trace = best_trace;
    res.chosen_delta = best_delta;
    res.grad_norm_final = best_gnorm;
    return res;
}

} // namespace kr
