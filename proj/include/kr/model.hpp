#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "kr/ot1d.hpp"
#include "kr/params.hpp"
#include "kr/parallel.hpp"

namespace kr {

using SignConfig = std::vector<Sign>;

/// Constants of the c-concavity feasibility inequality
///   (gamma_delta + lambda)' kappa1 + eta' kappa2 + l' rho <= 1.
struct FeasibilityConstants {
    std::vector<double> eta;         // per distributional predictor
    std::vector<double> lambda;      //
    std::vector<double> gamma_minus; //
    std::vector<double> gamma_plus;  //
    std::vector<double> kappa1;      // sup|f_j'|
    std::vector<double> kappa2;      // sup|f_j''|
    std::vector<double> l_bounds;    // per scalar covariate, max |Z|
    std::vector<double> rho;         // curvature bound of psi_k
};

struct FeasibilityReport {
    bool ok = false;
    double slack = 0.0; // 1 - LHS
    double lhs = 0.0;
};

inline FeasibilityReport check_feasibility(const FeasibilityConstants& c,
                                           const SignConfig& delta) {
    const std::size_t p = delta.size();
    require(c.eta.size() == p && c.lambda.size() == p && c.gamma_minus.size() == p &&
                c.gamma_plus.size() == p && c.kappa1.size() == p && c.kappa2.size() == p,
            "check_feasibility: predictor array dimension mismatch");
    require(c.l_bounds.size() == c.rho.size(),
            "check_feasibility: covariate array dimension mismatch");
    double lhs = 0.0;
    for (std::size_t j = 0; j < p; ++j) {
        double gamma = delta[j] == Sign::plus ? c.gamma_plus[j] : c.gamma_minus[j];
        lhs += (gamma + c.lambda[j]) * c.kappa1[j] + c.eta[j] * c.kappa2[j];
    }
    for (std::size_t k = 0; k < c.l_bounds.size(); ++k) lhs += c.l_bounds[k] * c.rho[k];
    return FeasibilityReport{lhs <= 1.0, 1.0 - lhs, lhs};
}

/// Which measure fixes the additive constant of the cached predictor
/// potentials. The pipeline default centers each phi_i^j against the
/// empirical predictor barycenter; the synthetic experiment centers
/// against the response barycenter, matching its generator.
enum class Centering { predictor_barycenter, response_barycenter };

/// Training sample with all transport quantities the model needs cached:
/// barycenters, centered predictor potentials, and response maps.
struct Dataset {
    Grid1D grid;
    std::vector<Density1D> responses;                    // n
    std::vector<std::vector<Density1D>> dist_predictors; // n x p
    std::vector<std::vector<double>> scalar_predictors;  // n x q

    Density1D nu_bar;                                 // response barycenter
    std::vector<Density1D> mu_bars;                   // p predictor barycenters
    std::vector<std::vector<Potential1D>> potentials; // n x p, centered
    std::vector<std::vector<double>> response_disp;   // n x m, T_{nu_bar->nu_i} - id
    std::vector<double> z_means;                      // q
    std::vector<std::vector<double>> z_hat;           // n x q centered covariates
    Centering centering = Centering::predictor_barycenter;

    std::size_t n() const { return responses.size(); }
    std::size_t p() const { return mu_bars.size(); }
    std::size_t q() const { return z_means.size(); }
};

inline Dataset make_dataset(std::vector<Density1D> responses,
                            std::vector<std::vector<Density1D>> dist_predictors,
                            std::vector<std::vector<double>> scalar_predictors,
                            Centering centering = Centering::predictor_barycenter) {
    require(!responses.empty(), "make_dataset: no records");
    const std::size_t n = responses.size();
    const std::size_t p = dist_predictors.empty() ? 0 : dist_predictors.front().size();
    const std::size_t q = scalar_predictors.empty() ? 0 : scalar_predictors.front().size();
    if (!dist_predictors.empty())
        require(dist_predictors.size() == n, "make_dataset: predictor row count mismatch");
    if (!scalar_predictors.empty())
        require(scalar_predictors.size() == n, "make_dataset: scalar row count mismatch");
    for (const auto& row : dist_predictors)
        require(row.size() == p, "make_dataset: ragged predictor rows");
    for (const auto& row : scalar_predictors)
        require(row.size() == q, "make_dataset: ragged scalar rows");

    Dataset d;
    d.grid = responses.front().grid;
    for (const auto& r : responses)
        require(r.grid.same_as(d.grid), "make_dataset: responses must share one grid");
    d.responses = std::move(responses);
    d.dist_predictors = std::move(dist_predictors);
    d.scalar_predictors = std::move(scalar_predictors);
    d.centering = centering;

    d.nu_bar = barycenter(d.responses);
    d.mu_bars.reserve(p);
    for (std::size_t j = 0; j < p; ++j) {
        std::vector<Density1D> col;
        col.reserve(n);
        for (std::size_t i = 0; i < n; ++i) col.push_back(d.dist_predictors[i][j]);
        d.mu_bars.push_back(barycenter(col));
    }

    d.potentials.assign(n, {});
    d.response_disp.assign(n, {});
    parallel_for(n, [&](std::size_t i) {
        d.potentials[i].reserve(p);
        for (std::size_t j = 0; j < p; ++j) {
            TransportMap1D T = ot_map(d.mu_bars[j], d.dist_predictors[i][j]);
            const Density1D& ref =
                centering == Centering::predictor_barycenter ? d.mu_bars[j] : d.nu_bar;
            d.potentials[i].push_back(potential_from_map(T, ref));
        }
        TransportMap1D R = ot_map(d.nu_bar, d.responses[i]);
        std::vector<double> disp(static_cast<std::size_t>(d.grid.n));
        for (int k = 0; k < d.grid.n; ++k)
            disp[static_cast<std::size_t>(k)] =
                R.values[static_cast<std::size_t>(k)] - d.grid.node(k);
        d.response_disp[i] = std::move(disp);
    });

    d.z_means.assign(q, 0.0);
    d.z_hat.assign(n, std::vector<double>(q, 0.0));
    for (std::size_t k = 0; k < q; ++k) {
        double m = 0.0;
        for (std::size_t i = 0; i < n; ++i) m += d.scalar_predictors[i][k];
        m /= static_cast<double>(n);
        d.z_means[k] = m;
        for (std::size_t i = 0; i < n; ++i) d.z_hat[i][k] = d.scalar_predictors[i][k] - m;
    }
    return d;
}

/// The sign-aware composition f (*) phi of the regression model:
///   sign +:  (f o phi,      deriv f'(phi) phi')
///   sign -:  (-f o (-phi),  deriv f'(-phi) phi')
/// Requires the images of phi and -phi to lie inside the knot span.
inline Potential1D circledcirc(const StepParams& f, const Potential1D& phi) {
    const double z1 = f.knots.front(), zK = f.knots.back();
    const double span_tol = 1e-12 * std::max(1.0, zK - z1);
    for (double v : phi.values) {
        if (v < z1 - span_tol || v > zK + span_tol || -v < z1 - span_tol || -v > zK + span_tol)
            throw invalid_input("circledcirc: knot span too small");
    }
    const std::size_t m = phi.values.size();
    std::vector<double> vals(m), der(m);
    const double s = f.sign == Sign::plus ? 1.0 : -1.0;
    for (std::size_t i = 0; i < m; ++i) {
        double t = s * phi.values[i];
        der[i] = f.fprime(t) * phi.deriv[i];
        vals[i] = s * f.fvalue(t);
    }
    return Potential1D{phi.grid, std::move(vals), std::move(der)};
}

/// Interior support of the reference measure: nodes with density above the
/// threshold, where curvature statistics are trusted.
inline std::vector<char> support_mask(const Density1D& d, double thresh = 1e-6) {
    std::vector<char> m(d.values.size());
    for (std::size_t i = 0; i < d.values.size(); ++i) m[i] = d.values[i] > thresh ? 1 : 0;
    return m;
}

/// Empirical feasibility constants from cached potentials:
///   eta^j    = sup_x mean_i (phi_i^j)'(x)^2
///   lambda^j = sup_x sqrt(mean_i (phi_i^j)''(x)^2)
///   gamma^j  = extremes of the per-sample curvature
///   l^k      = max_i |Zhat_i^k|
/// Suprema run over nodes where the response barycenter density > 1e-6.
inline FeasibilityConstants estimate_constants(const Dataset& data) {
    const std::size_t n = data.n(), p = data.p(), q = data.q();
    FeasibilityConstants c;
    c.eta.assign(p, 0.0);
    c.lambda.assign(p, 0.0);
    c.gamma_minus.assign(p, 0.0);
    c.gamma_plus.assign(p, 0.0);
    c.kappa1.assign(p, 0.0);
    c.kappa2.assign(p, 0.0);
    c.l_bounds.assign(q, 0.0);
    c.rho.assign(q, 0.0);
    auto mask = support_mask(data.nu_bar);
    const std::size_t m = static_cast<std::size_t>(data.grid.n);
    for (std::size_t j = 0; j < p; ++j) {
        std::vector<std::vector<double>> sec(n);
        for (std::size_t i = 0; i < n; ++i) sec[i] = second_derivative(data.potentials[i][j]);
        for (std::size_t x = 0; x < m; ++x) {
            if (!mask[x]) continue;
            double m1 = 0.0, m2 = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                m1 += sqr(data.potentials[i][j].deriv[x]);
                m2 += sqr(sec[i][x]);
                c.gamma_minus[j] = std::max(c.gamma_minus[j], -sec[i][x]);
                c.gamma_plus[j] = std::max(c.gamma_plus[j], sec[i][x]);
            }
            c.eta[j] = std::max(c.eta[j], m1 / static_cast<double>(n));
            c.lambda[j] = std::max(c.lambda[j], std::sqrt(m2 / static_cast<double>(n)));
        }
    }
    for (std::size_t k = 0; k < q; ++k)
        for (std::size_t i = 0; i < n; ++i)
            c.l_bounds[k] = std::max(c.l_bounds[k], std::abs(data.z_hat[i][k]));
    return c;
}

/// Fitted Kantorovich regression model. Intercept grids and covariate
/// means are frozen at fit time and reused at predict time.
struct ModelSpec {
    Grid1D grid;
    SignConfig sign_config;                       // p
    std::vector<StepParams> step_params;          // p
    std::vector<PsiParams> psi_params;            // q
    std::vector<std::vector<double>> intercepts;  // p grids: (1/n) sum_r f_j (*) phi_r^j
    std::vector<std::vector<double>> intercept_derivs; // p grids, d/dx of the above
    std::vector<double> z_means;                  // q
    FeasibilityConstants constants;
    Centering centering = Centering::predictor_barycenter;

    std::size_t p() const { return step_params.size(); }
    std::size_t q() const { return psi_params.size(); }
};

/// Model displacement potential for one record:
///   Phi = sum_j (f_j (*) phi^j - intercept_j) + sum_k zhat^k psi_k.
/// The psi part contributes zhat * psi'(x) to the derivative; its values
/// integrate psi' from the grid origin.
inline Potential1D model_potential(const ModelSpec& model,
                                   const std::vector<Potential1D>& phis,
                                   const std::vector<double>& z_hat) {
    const std::size_t m = static_cast<std::size_t>(model.grid.n);
    std::vector<double> vals(m, 0.0), der(m, 0.0);
    for (std::size_t j = 0; j < model.p(); ++j) {
        Potential1D fj = circledcirc(model.step_params[j], phis[j]);
        for (std::size_t x = 0; x < m; ++x) {
            vals[x] += fj.values[x] - model.intercepts[j][x];
            der[x] += fj.deriv[x] - model.intercept_derivs[j][x];
        }
    }
    for (std::size_t k = 0; k < model.q(); ++k) {
        const auto& psi = model.psi_params[k];
        double zc = z_hat[k];
        if (zc == 0.0) continue;
        double acc = 0.0, prev = psi.psi_prime(model.grid.node(0));
        const double h = model.grid.h();
        vals[0] += zc * 0.0;
        der[0] += zc * prev;
        for (int i = 1; i < model.grid.n; ++i) {
            double cur = psi.psi_prime(model.grid.node(i));
            acc += 0.5 * h * (prev + cur);
            vals[static_cast<std::size_t>(i)] += zc * acc;
            der[static_cast<std::size_t>(i)] += zc * cur;
            prev = cur;
        }
    }
    return Potential1D{model.grid, std::move(vals), std::move(der)};
}

struct Prediction {
    Density1D density;
    Potential1D potential;
};

/// Pushforward of nu_bar through T = id - Phi' for the given predictors.
/// Throws with the first violating node if T is not monotone (the
/// parameters are infeasible).
inline Prediction predict(const ModelSpec& model, const std::vector<Density1D>& dist_preds,
                          const std::vector<double>& scalar_preds, const Density1D& nu_bar,
                          const std::vector<Density1D>& mu_bars) {
    require(dist_preds.size() == model.p(), "predict: wrong number of distributional predictors");
    require(scalar_preds.size() == model.q(), "predict: wrong number of scalar predictors");
    std::vector<Potential1D> phis;
    phis.reserve(model.p());
    for (std::size_t j = 0; j < model.p(); ++j) {
        TransportMap1D T = ot_map(mu_bars[j], dist_preds[j]);
        const Density1D& ref =
            model.centering == Centering::predictor_barycenter ? mu_bars[j] : nu_bar;
        phis.push_back(potential_from_map(T, ref));
    }
    std::vector<double> zc(model.q());
    for (std::size_t k = 0; k < model.q(); ++k) zc[k] = scalar_preds[k] - model.z_means[k];
    Potential1D Phi = model_potential(model, phis, zc);
    std::vector<double> T(static_cast<std::size_t>(model.grid.n));
    for (int i = 0; i < model.grid.n; ++i)
        T[static_cast<std::size_t>(i)] = model.grid.node(i) - Phi.deriv[static_cast<std::size_t>(i)];
    // genuine infeasibility shows as dips at the scale of the grid step;
    // transport roundoff in pipeline-derived potentials stays far below
    const double mono_tol = 0.05 * model.grid.h();
    for (std::size_t i = 1; i < T.size(); ++i) {
        if (T[i] < T[i - 1] - mono_tol)
            throw invariant_violation("predict: transport map not monotone at node " +
                                      std::to_string(i));
        T[i] = std::max(T[i], T[i - 1]);
    }
    const double lo = model.grid.lo, hi = model.grid.hi;
    for (double& t : T) t = std::min(std::max(t, lo), hi);
    TransportMap1D map(model.grid, std::move(T));
    return Prediction{pushforward(nu_bar, map), std::move(Phi)};
}

/// Recomputes the intercept grids (training averages of f_j (*) phi) for
/// the given step parameters on the training data.
inline void refresh_intercepts(ModelSpec& model, const Dataset& data) {
    const std::size_t n = data.n();
    const std::size_t m = static_cast<std::size_t>(model.grid.n);
    model.intercepts.assign(model.p(), std::vector<double>(m, 0.0));
    model.intercept_derivs.assign(model.p(), std::vector<double>(m, 0.0));
    for (std::size_t j = 0; j < model.p(); ++j) {
        for (std::size_t i = 0; i < n; ++i) {
            Potential1D fj = circledcirc(model.step_params[j], data.potentials[i][j]);
            for (std::size_t x = 0; x < m; ++x) {
                model.intercepts[j][x] += fj.values[x];
                model.intercept_derivs[j][x] += fj.deriv[x];
            }
        }
        for (std::size_t x = 0; x < m; ++x) {
            model.intercepts[j][x] /= static_cast<double>(n);
            model.intercept_derivs[j][x] /= static_cast<double>(n);
        }
    }
}

enum class LossMode { quadratic, exact };

/// Empirical Wasserstein loss over the training data. Quadratic mode is
/// the fitting objective
///   (1/n) sum_i int (T_{nu_bar->nu_i}(x) - T_{Phi_i}(x))^2 d nu_bar(x);
/// exact mode reports (1/n) sum_i W2^2(nu_i, (T_{Phi_i})_# nu_bar).
/// Intercepts are recomputed from the model's current parameters, which is
/// their definition as training-sample averages.
inline double empirical_loss(const ModelSpec& model_in, const Dataset& data, LossMode mode) {
    ModelSpec model = model_in;
    refresh_intercepts(model, data);
    const std::size_t n = data.n();
    const std::size_t m = static_cast<std::size_t>(data.grid.n);
    auto w = data.grid.trap_weights();
    for (std::size_t x = 0; x < m; ++x) w[x] *= data.nu_bar.values[x];

    std::vector<double> per_record(n, 0.0);
    parallel_for(n, [&](std::size_t i) {
        Potential1D Phi = model_potential(model, data.potentials[i], data.z_hat[i]);
        if (mode == LossMode::quadratic) {
            double acc = 0.0;
            for (std::size_t x = 0; x < m; ++x)
                acc += w[x] * sqr(data.response_disp[i][x] + Phi.deriv[x]);
            per_record[i] = acc;
        } else {
            std::vector<double> T(m);
            for (int k = 0; k < data.grid.n; ++k)
                T[static_cast<std::size_t>(k)] =
                    data.grid.node(k) - Phi.deriv[static_cast<std::size_t>(k)];
            if (!is_monotone(T, 0.05 * data.grid.h()))
                throw invariant_violation("empirical_loss(exact): non-monotone model map");
            for (std::size_t x = 1; x < m; ++x) T[x] = std::max(T[x], T[x - 1]);
            for (double& t : T) t = std::min(std::max(t, data.grid.lo), data.grid.hi);
            Density1D pred = pushforward(data.nu_bar, TransportMap1D(data.grid, std::move(T)));
            per_record[i] = sqr(w2(data.responses[i], pred));
        }
    });
    return sum(per_record) / static_cast<double>(n);
}

} // namespace kr
