#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "kr/fit.hpp"
#include "kr/synth.hpp"

using namespace kr;

namespace {

/// Random small instance: n records, p truncated-normal predictors,
/// q uniform covariates, responses synthesized through random feasible
/// parameters so the data are in-model.
Dataset random_instance(CounterRng& rng, std::size_t n, std::size_t p, std::size_t q,
                        int nodes = 161) {
    Grid1D g(0.0, 1.0, nodes);
    Density1D nu_ref = truncated_normal(g, 0.5, 0.18);
    std::vector<std::vector<Density1D>> preds(n, std::vector<Density1D>());
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < p; ++j)
            preds[i].push_back(truncated_normal(g, rng.uniform(0.35, 0.65),
                                                rng.uniform(0.15, 0.3)));
    std::vector<std::vector<double>> scalars(n, std::vector<double>(q));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < q; ++k) scalars[i][k] = rng.uniform(0.0, 1.0);

    // responses: mild random deformations of the reference
    std::vector<Density1D> responses;
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> T(static_cast<std::size_t>(g.n));
        double a = rng.uniform(-0.02, 0.02), b = rng.uniform(-0.015, 0.015);
        for (int k = 0; k < g.n; ++k) {
            double x = g.node(k);
            T[static_cast<std::size_t>(k)] =
                x + a * std::sin(3.14159265358979 * x) + b * x * (1.0 - x);
        }
        for (std::size_t k = 1; k < T.size(); ++k) T[k] = std::max(T[k], T[k - 1]);
        for (double& t : T) t = std::min(std::max(t, 0.0), 1.0);
        responses.push_back(pushforward(nu_ref, TransportMap1D(g, std::move(T))));
    }
    return make_dataset(std::move(responses), std::move(preds), std::move(scalars));
}

ModelSpec random_model(CounterRng& rng, const Dataset& data, std::size_t K,
                       const SignConfig& delta) {
    ModelSpec ms;
    ms.grid = data.grid;
    ms.sign_config = delta;
    ms.centering = data.centering;
    ms.z_means = data.z_means;
    for (std::size_t j = 0; j < data.p(); ++j) {
        double M = 0.0;
        for (std::size_t i = 0; i < data.n(); ++i)
            for (double v : data.potentials[i][j].values) M = std::max(M, std::abs(v));
        auto z = padded_knots(-M, M, K);
        std::vector<double> th(K);
        for (auto& t : th)
            t = delta[j] == Sign::plus ? rng.uniform(0.0, 0.05) : -rng.uniform(0.0, 0.05);
        ms.step_params.emplace_back(z, th, delta[j], 0.0);
    }
    for (std::size_t k = 0; k < data.q(); ++k) {
        std::vector<double> z(K), vt(K);
        for (std::size_t l = 0; l < K; ++l) {
            z[l] = data.grid.lo +
                   (data.grid.hi - data.grid.lo) * static_cast<double>(l) /
                       static_cast<double>(K - 1);
            vt[l] = rng.uniform(0.0, 0.02);
        }
        ms.psi_params.emplace_back(z, vt);
    }
    return ms;
}

std::vector<double> pack(const ModelSpec& ms) {
    std::vector<double> u;
    for (const auto& f : ms.step_params) u.insert(u.end(), f.theta.begin(), f.theta.end());
    for (const auto& p : ms.psi_params) u.insert(u.end(), p.vartheta.begin(), p.vartheta.end());
    return u;
}

ModelSpec unpack(const ModelSpec& like, const std::vector<double>& u) {
    ModelSpec ms = like;
    std::size_t pos = 0;
    for (auto& f : ms.step_params) {
        std::vector<double> th(u.begin() + static_cast<long>(pos),
                               u.begin() + static_cast<long>(pos + f.K()));
        pos += f.K();
        f = StepParams(f.knots, th, f.sign, f.theta0);
    }
    for (auto& p : ms.psi_params) {
        std::vector<double> vt(u.begin() + static_cast<long>(pos),
                               u.begin() + static_cast<long>(pos + p.K()));
        pos += p.K();
        p = PsiParams(p.knots, vt);
    }
    return ms;
}

} // namespace

TEST_CASE("project: componentwise sign clamps") {
    std::vector<std::vector<double>> th = {{-1.0, 2.0}};
    std::vector<std::vector<double>> vt;
    project(th, vt, {Sign::plus});
    REQUIRE(th[0][0] == 0.0);
    REQUIRE(th[0][1] == 2.0);

    th = {{-1.0, 2.0}};
    project(th, vt, {Sign::minus});
    REQUIRE(th[0][0] == -1.0);
    REQUIRE(th[0][1] == 0.0);

    th.clear();
    vt = {{-0.5, 0.3}};
    project(th, vt, {});
    REQUIRE(vt[0][0] == 0.0);
    REQUIRE(vt[0][1] == Catch::Approx(0.3));
}

TEST_CASE("project is idempotent") {
    CounterRng rng(5, 1);
    for (int rep = 0; rep < 20; ++rep) {
        std::vector<std::vector<double>> th = {{rng.uniform(-1, 1), rng.uniform(-1, 1)}};
        std::vector<std::vector<double>> vt = {{rng.uniform(-1, 1), rng.uniform(-1, 1)}};
        auto th2 = th;
        auto vt2 = vt;
        project(th2, vt2, {Sign::minus}, {0.4});
        auto th3 = th2;
        auto vt3 = vt2;
        project(th3, vt3, {Sign::minus}, {0.4});
        REQUIRE(th3 == th2);
        REQUIRE(vt3 == vt2);
    }
}

TEST_CASE("project: rho box caps the vartheta sum") {
    std::vector<std::vector<double>> th;
    std::vector<std::vector<double>> vt = {{0.5, 0.4, 0.3}};
    project(th, vt, {}, {0.6});
    double s = vt[0][0] + vt[0][1] + vt[0][2];
    REQUIRE(s == Catch::Approx(0.6).margin(1e-12));
    for (double v : vt[0]) REQUIRE(v >= 0.0);
}

TEST_CASE("gradients match central finite differences of the quadratic loss") {
    CounterRng rng(77, 2);
    for (int rep = 0; rep < 4; ++rep) {
        std::size_t n = 3 + static_cast<std::size_t>(rng.uniform(0, 5));
        std::size_t p = 1 + static_cast<std::size_t>(rng.uniform(0, 1.99));
        std::size_t q = static_cast<std::size_t>(rng.uniform(0, 1.99));
        std::size_t K = 5 + static_cast<std::size_t>(rng.uniform(0, 7));
        Dataset data = random_instance(rng, n, p, q);
        SignConfig delta(p);
        for (auto& s : delta) s = rng.uniform(0, 1) < 0.5 ? Sign::plus : Sign::minus;
        ModelSpec model = random_model(rng, data, K, delta);

        auto u0 = pack(model);
        const double fd_h = 1e-6;
        for (std::size_t j = 0; j < p; ++j) {
            auto g = grad_theta(model, data, j);
            for (std::size_t l = 0; l < K; l += 3) {
                auto up = u0, dn = u0;
                up[j * K + l] += fd_h;
                dn[j * K + l] -= fd_h;
                double fp = empirical_loss(unpack(model, up), data, LossMode::quadratic);
                double fm = empirical_loss(unpack(model, dn), data, LossMode::quadratic);
                double fd = (fp - fm) / (2 * fd_h);
                REQUIRE(g[l] == Catch::Approx(fd).epsilon(1e-4).margin(1e-8));
            }
        }
        for (std::size_t k = 0; k < q; ++k) {
            auto g = grad_vartheta(model, data, k);
            for (std::size_t l = 0; l < K; l += 3) {
                auto up = u0, dn = u0;
                up[p * K + k * K + l] += fd_h;
                dn[p * K + k * K + l] -= fd_h;
                double fp = empirical_loss(unpack(model, up), data, LossMode::quadratic);
                double fm = empirical_loss(unpack(model, dn), data, LossMode::quadratic);
                double fd = (fp - fm) / (2 * fd_h);
                REQUIRE(g[l] == Catch::Approx(fd).epsilon(1e-4).margin(1e-8));
            }
        }
    }
}

TEST_CASE("assembled quadratic form reproduces loss and gradient exactly") {
    CounterRng rng(99, 3);
    Dataset data = random_instance(rng, 5, 2, 1);
    FitConfig cfg;
    cfg.knots_f = 9;
    cfg.knots_psi = 9;
    SignConfig delta = {Sign::plus, Sign::minus};
    auto ws = detail::make_workspace(data, cfg);
    auto Q = detail::assemble(data, ws, delta);

    ModelSpec model;
    model.grid = data.grid;
    model.sign_config = delta;
    model.centering = data.centering;
    model.z_means = data.z_means;
    CounterRng r2(4, 4);
    std::vector<double> u(Q.dim());
    for (std::size_t j = 0; j < 2; ++j) {
        std::vector<double> th(9);
        for (std::size_t l = 0; l < 9; ++l) {
            th[l] = delta[j] == Sign::plus ? r2.uniform(0, 0.05) : -r2.uniform(0, 0.05);
            u[j * 9 + l] = th[l];
        }
        model.step_params.emplace_back(Q.f_knots[j], th, delta[j], 0.0);
    }
    std::vector<double> vt(9);
    for (std::size_t l = 0; l < 9; ++l) {
        vt[l] = r2.uniform(0, 0.02);
        u[18 + l] = vt[l];
    }
    model.psi_params.emplace_back(Q.psi_knots, vt);

    double direct = empirical_loss(model, data, LossMode::quadratic);
    REQUIRE(Q.loss(u) == Catch::Approx(direct).epsilon(1e-10));

    std::vector<double> gq;
    Q.grad(u, gq);
    auto g0 = grad_theta(model, data, 0);
    auto g1 = grad_theta(model, data, 1);
    auto gv = grad_vartheta(model, data, 0);
    for (std::size_t l = 0; l < 9; ++l) {
        REQUIRE(gq[l] == Catch::Approx(g0[l]).margin(1e-10));
        REQUIRE(gq[9 + l] == Catch::Approx(g1[l]).margin(1e-10));
        REQUIRE(gq[18 + l] == Catch::Approx(gv[l]).margin(1e-10));
    }
}

TEST_CASE("grad_vartheta vanishes when all centered covariates are zero") {
    CounterRng rng(13, 5);
    Dataset data = random_instance(rng, 4, 1, 1);
    for (auto& row : data.z_hat) row[0] = 0.0;
    ModelSpec model = random_model(rng, data, 8, {Sign::plus});
    auto g = grad_vartheta(model, data, 0);
    REQUIRE(max_abs(g) == 0.0);
}

TEST_CASE("quadratic loss is convex: midpoint inequality") {
    CounterRng rng(21, 6);
    Dataset data = random_instance(rng, 4, 1, 1, 101);
    SignConfig delta = {Sign::plus};
    for (int rep = 0; rep < 100; ++rep) {
        ModelSpec a = random_model(rng, data, 7, delta);
        ModelSpec b = random_model(rng, data, 7, delta);
        // models share knots by construction
        auto ua = pack(a), ub = pack(b);
        std::vector<double> um(ua.size());
        for (std::size_t i = 0; i < ua.size(); ++i) um[i] = 0.5 * (ua[i] + ub[i]);
        double Ja = empirical_loss(a, data, LossMode::quadratic);
        double Jb = empirical_loss(b, data, LossMode::quadratic);
        double Jm = empirical_loss(unpack(a, um), data, LossMode::quadratic);
        REQUIRE(Jm <= 0.5 * (Ja + Jb) + 1e-10);
    }
}

TEST_CASE("fit: zero-signal data give zero parameters and zero loss") {
    Grid1D g(0.0, 1.0, 201);
    Density1D ref = truncated_normal(g, 0.5, 0.15);
    std::size_t n = 6;
    std::vector<Density1D> responses(n, ref);
    std::vector<std::vector<Density1D>> preds(n);
    CounterRng rng(3, 7);
    for (std::size_t i = 0; i < n; ++i)
        preds[i] = {truncated_normal(g, rng.uniform(0.4, 0.6), 0.15)};
    // constant covariate: centered values are identically zero
    std::vector<std::vector<double>> scalars(n, std::vector<double>{2.5});
    Dataset data = make_dataset(std::move(responses), std::move(preds), std::move(scalars));

    FitConfig cfg;
    cfg.knots_f = 12;
    cfg.knots_psi = 12;
    cfg.max_iters = 4000;
    FitResult fr = fit(data, cfg);
    REQUIRE(fr.loss_trace.back() <= 1e-10);
    REQUIRE(max_abs(fr.model.step_params[0].theta) <= 1e-6);
    REQUIRE(max_abs(fr.model.psi_params[0].vartheta) <= 1e-6);
}

TEST_CASE("fit: loss trace is nonincreasing") {
    CounterRng rng(31, 8);
    Dataset data = random_instance(rng, 6, 1, 1, 121);
    FitConfig cfg;
    cfg.knots_f = 10;
    cfg.knots_psi = 10;
    cfg.max_iters = 500;
    FitResult fr = fit(data, cfg);
    for (std::size_t i = 1; i < fr.loss_trace.size(); ++i)
        REQUIRE(fr.loss_trace[i] <= fr.loss_trace[i - 1] + 1e-12);
    REQUIRE(fr.per_delta_losses.size() == 2);
}

TEST_CASE("fit: oversized step size is reported") {
    // data with genuine signal so the iterate actually moves
    Grid1D g(0.0, 1.0, 101);
    Density1D nu_ref = truncated_normal(g, 0.5, 0.15);
    CounterRng rng(41, 9);
    std::size_t n = 6;
    std::vector<std::vector<Density1D>> preds(n);
    for (std::size_t i = 0; i < n; ++i)
        preds[i] = {truncated_normal(g, rng.uniform(0.35, 0.65), 0.2)};
    std::vector<Density1D> col;
    for (std::size_t i = 0; i < n; ++i) col.push_back(preds[i][0]);
    Density1D mu_bar = barycenter(col);
    std::vector<Density1D> responses;
    for (std::size_t i = 0; i < n; ++i) {
        auto phi = potential_from_map(ot_map(mu_bar, preds[i][0]), mu_bar);
        std::vector<double> T(static_cast<std::size_t>(g.n));
        for (int k = 0; k < g.n; ++k)
            T[static_cast<std::size_t>(k)] =
                g.node(k) - 0.5 * phi.deriv[static_cast<std::size_t>(k)];
        for (std::size_t x = 1; x < T.size(); ++x) T[x] = std::max(T[x], T[x - 1]);
        for (double& t : T) t = std::min(std::max(t, 0.0), 1.0);
        responses.push_back(pushforward(nu_ref, TransportMap1D(g, std::move(T))));
    }
    Dataset data = make_dataset(std::move(responses), std::move(preds), {});
    FitConfig cfg;
    cfg.knots_f = 8;
    cfg.step_size = 1e9;
    cfg.max_iters = 200;
    REQUIRE_THROWS_AS(fit(data, cfg), invariant_violation);
}

TEST_CASE("fit: sign selection matches a noiseless negative-sign generator") {
    Grid1D g(0.0, 1.0, 401);
    Density1D nu_ref = truncated_normal(g, 0.5, 0.15);
    std::size_t n = 50;
    CounterRng rng(8, 10);
    std::vector<std::vector<Density1D>> preds(n);
    for (std::size_t i = 0; i < n; ++i)
        preds[i] = {truncated_normal(g, rng.uniform(0.35, 0.65), rng.uniform(0.15, 0.25))};
    // build potentials against the predictor barycenter, then responses
    // through f'(t) = -0.5 (non-increasing convex family)
    std::vector<Density1D> col;
    for (std::size_t i = 0; i < n; ++i) col.push_back(preds[i][0]);
    Density1D mu_bar = barycenter(col);
    std::vector<Density1D> responses;
    std::vector<std::vector<double>> disp(n);
    for (std::size_t i = 0; i < n; ++i)
        disp[i] = potential_from_map(ot_map(mu_bar, preds[i][0]), mu_bar).deriv;
    std::vector<double> mean_disp(static_cast<std::size_t>(g.n), 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t x = 0; x < mean_disp.size(); ++x) mean_disp[x] += disp[i][x] / n;
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> T(static_cast<std::size_t>(g.n));
        for (int k = 0; k < g.n; ++k) {
            std::size_t x = static_cast<std::size_t>(k);
            T[x] = g.node(k) + 0.5 * (disp[i][x] - mean_disp[x]);
        }
        for (std::size_t x = 1; x < T.size(); ++x) T[x] = std::max(T[x], T[x - 1]);
        for (double& t : T) t = std::min(std::max(t, 0.0), 1.0);
        responses.push_back(pushforward(nu_ref, TransportMap1D(g, std::move(T))));
    }
    Dataset data = make_dataset(std::move(responses), std::move(preds), {});
    FitConfig cfg;
    cfg.knots_f = 30;
    cfg.max_iters = 4000;
    FitResult fr = fit(data, cfg);
    REQUIRE(fr.chosen_delta == SignConfig{Sign::minus});
    // recovered f' is about -0.5 on the bulk of the knot range
    const auto& f = fr.model.step_params[0];
    auto suf = f.suffix_sums();
    double span = f.knots.back() - f.knots.front();
    for (std::size_t l = 0; l < f.K(); ++l) {
        double t = f.knots[l];
        if (t < f.knots.front() + 0.25 * span || t > f.knots.back() - 0.25 * span) continue;
        REQUIRE(suf[l] == Catch::Approx(-0.5).margin(5e-2));
    }
}
