#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <string>
#include <vector>

#include "kr/fit.hpp"

namespace kr {

/// Counter-based generator: every draw is a pure hash of
/// (seed, stream, counter), so adding a field or record never perturbs
/// another's stream and generation parallelizes deterministically.
struct CounterRng {
    std::uint64_t seed = 0;
    std::uint64_t stream = 0;
    std::uint64_t counter = 0;

    CounterRng(std::uint64_t seed_, std::uint64_t stream_) : seed(seed_), stream(stream_) {}

    static std::uint64_t mix(std::uint64_t z) {
        z += 0x9e3779b97f4a7c15ULL;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    double next_unit() {
        std::uint64_t h = mix(mix(mix(seed) ^ stream) ^ counter++);
        return static_cast<double>(h >> 11) * 0x1.0p-53; // [0, 1)
    }

    double uniform(double a, double b) { return a + (b - a) * next_unit(); }

    double normal(double m, double s) {
        double u1 = std::max(next_unit(), 1e-300);
        double u2 = next_unit();
        return m + s * std::sqrt(-2.0 * std::log(u1)) *
                       std::cos(2.0 * std::numbers::pi * u2);
    }
};

/// Stream ids for the per-field substreams of the 1D generator.
namespace synth_stream {
constexpr std::uint64_t mean1 = 1, mean2 = 2, sigma1 = 3, sigma2 = 4, covariate = 5;
inline std::uint64_t distortion(std::uint64_t record) { return (6ULL << 32) + record; }
} // namespace synth_stream

struct SynthConfig1D {
    std::size_t n = 50;
    std::uint64_t seed = 1;
    Grid1D grid{0.0, 1.0, 1025};
    double noise_amp = 1.0 / (55.0 * std::numbers::pi);
    int distortion_modes = 10;
    double nu_sigma = 0.15; // response reference: N(0.5, nu_sigma^2) truncated to the grid
};

/// Closed-form true functional parameters of the synthetic experiment.
struct TruthParams {
    std::function<double(double)> f1_deriv = [](double t) { return 0.5 * std::sqrt(1.0 - t); };
    std::function<double(double)> f2_deriv = [](double t) { return 0.5 * std::log(1.2 - t); };
    std::function<double(double)> psi_deriv = [](double x) {
        return 0.3 / (2.0 * std::numbers::pi) * (1.0 - std::cos(2.0 * std::numbers::pi * x));
    };

    static TruthParams zero() {
        TruthParams t;
        t.f1_deriv = [](double) { return 0.0; };
        t.f2_deriv = [](double) { return 0.0; };
        t.psi_deriv = [](double) { return 0.0; };
        return t;
    }
};

/// One random sine-perturbed distortion map
///   T(x) = x + sum_k xi_k sin(k pi x),  xi_k ~ Unif[-amp, amp],
/// redrawn until monotone at grid resolution (the amplitude bound
/// sum k |xi_k| pi <= 1 is tight, so rare draws fail). redraws counts them.
inline TransportMap1D gen_distortion(CounterRng& rng, const Grid1D& grid, double amp,
                                     int modes, int* redraws = nullptr) {
    std::vector<double> xi(static_cast<std::size_t>(modes));
    std::vector<double> T(static_cast<std::size_t>(grid.n));
    for (int attempt = 0;; ++attempt) {
        for (auto& x : xi) x = rng.uniform(-amp, amp);
        for (int i = 0; i < grid.n; ++i) {
            double x = grid.node(i);
            double t = x;
            for (int k = 0; k < modes; ++k)
                t += xi[static_cast<std::size_t>(k)] *
                     std::sin((k + 1) * std::numbers::pi * x);
            T[static_cast<std::size_t>(i)] = t;
        }
        if (is_monotone(T)) break;
        if (redraws) ++(*redraws);
        if (attempt > 1000) throw invariant_violation("gen_distortion: cannot draw monotone map");
    }
    return TransportMap1D(grid, std::move(T));
}

/// Everything the mixed-predictor generator produced, including the exact
/// potentials used to build the responses (for oracle tests).
struct SynthOutput {
    Dataset data;
    std::vector<double> covariates;            // raw X_i
    std::vector<std::vector<double>> xi_sums;  // unused modes placeholder (empty)
    int distortion_redraws = 0;
    int envelope_fixups = 0; // truth maps clipped monotone at grid scale
};

/// The paper's 1D mixed-predictor generator: two truncated-normal
/// distributional predictors, one uniform scalar covariate, sine
/// distortion noise. Responses are pushforwards of the reference through
/// the composed truth map. Generator potentials are centered against the
/// response reference; the returned Dataset uses the same convention.
inline SynthOutput gen_mixed_dataset(const SynthConfig1D& cfg, const TruthParams& truth) {
    require(cfg.n >= 1, "gen_mixed_dataset: n must be >= 1");
    const std::size_t n = cfg.n;
    const Grid1D& g = cfg.grid;
    const std::size_t m = static_cast<std::size_t>(g.n);

    CounterRng r_m1(cfg.seed, synth_stream::mean1), r_m2(cfg.seed, synth_stream::mean2);
    CounterRng r_s1(cfg.seed, synth_stream::sigma1), r_s2(cfg.seed, synth_stream::sigma2);
    CounterRng r_x(cfg.seed, synth_stream::covariate);

    std::vector<double> m1(n), m2(n), s1(n), s2(n), X(n);
    for (std::size_t i = 0; i < n; ++i) {
        r_m1.counter = i;
        m1[i] = r_m1.uniform(0.2, 0.5);
        r_m2.counter = i;
        m2[i] = r_m2.uniform(0.5, 0.8);
        r_s1.counter = i;
        s1[i] = r_s1.uniform(0.2, 0.3);
        r_s2.counter = i;
        s2[i] = r_s2.uniform(0.3, 0.4);
        r_x.counter = i;
        X[i] = r_x.uniform(0.0, 1.0);
    }

    std::vector<std::vector<Density1D>> preds(n);
    for (std::size_t i = 0; i < n; ++i) {
        preds[i].push_back(truncated_normal(g, m1[i], s1[i]));
        preds[i].push_back(truncated_normal(g, m2[i], s2[i]));
    }
    Density1D nu_bar = truncated_normal(g, 0.5, cfg.nu_sigma);

    // empirical predictor barycenters and the generator potentials
    std::vector<Density1D> mu_bars;
    for (std::size_t j = 0; j < 2; ++j) {
        std::vector<Density1D> col;
        col.reserve(n);
        for (std::size_t i = 0; i < n; ++i) col.push_back(preds[i][j]);
        mu_bars.push_back(barycenter(col));
    }
    std::vector<std::vector<Potential1D>> phis(n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < 2; ++j)
            phis[i].push_back(
                potential_from_map(ot_map(mu_bars[j], preds[i][j]), nu_bar));

    // composite truth displacement: sum_j (f_j'(phi) phi' - mean) + Z psi'
    const std::function<double(double)> fderiv[2] = {truth.f1_deriv, truth.f2_deriv};
    std::vector<std::vector<double>> scaled(n, std::vector<double>(m, 0.0));
    std::vector<std::vector<double>> mean_term(2, std::vector<double>(m, 0.0));
    for (std::size_t j = 0; j < 2; ++j) {
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t x = 0; x < m; ++x)
                mean_term[j][x] += fderiv[j](phis[i][j].values[x]) * phis[i][j].deriv[x];
        for (std::size_t x = 0; x < m; ++x) mean_term[j][x] /= static_cast<double>(n);
    }

    SynthOutput out;
    std::vector<Density1D> responses;
    responses.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        double Z = X[i] - 0.5; // population-centered covariate
        std::vector<double> T(m);
        for (std::size_t x = 0; x < m; ++x) {
            double comp = 0.0;
            for (std::size_t j = 0; j < 2; ++j)
                comp += fderiv[j](phis[i][j].values[x]) * phis[i][j].deriv[x] - mean_term[j][x];
            comp += Z * truth.psi_deriv(g.node(static_cast<int>(x)));
            T[x] = g.node(static_cast<int>(x)) - comp;
        }
        // monotone envelope: finite-sample curvature can dip the composed
        // map by ~1e-3 at the domain edges
        bool fixed = false;
        for (std::size_t x = 1; x < m; ++x)
            if (T[x] < T[x - 1]) {
                T[x] = T[x - 1];
                fixed = true;
            }
        if (fixed) ++out.envelope_fixups;
        if (cfg.noise_amp > 0.0) {
            CounterRng r_xi(cfg.seed, synth_stream::distortion(i));
            TransportMap1D eps =
                gen_distortion(r_xi, g, cfg.noise_amp, cfg.distortion_modes,
                               &out.distortion_redraws);
            // compose analytically: T_eps(T(x)), T_eps evaluated exactly
            std::vector<double> xi_vals; // re-evaluate eps at off-node points
            for (std::size_t x = 0; x < m; ++x) {
                double y = T[x];
                double t = y;
                // reconstruct eps(y) from its node samples by linear interpolation
                t = detail::interp_sorted(g.nodes(), eps.values, y);
                T[x] = t;
            }
        }
        for (double& t : T) t = std::min(std::max(t, g.lo), g.hi);
        responses.push_back(pushforward(nu_bar, TransportMap1D(g, std::move(T))));
    }

    std::vector<std::vector<double>> scalars(n, std::vector<double>(1));
    for (std::size_t i = 0; i < n; ++i) scalars[i][0] = X[i];
    out.data = make_dataset(std::move(responses), std::move(preds), std::move(scalars),
                            Centering::response_barycenter);
    out.covariates = X;
    return out;
}

/// The illustrative 1D construction: reference N(0.5, 0.1^2) truncated to
/// [0,1], three analytic maps with T1 + T2 + T3 = 3 id, their pushforwards
/// and centered potentials.
struct Demo1D {
    Grid1D grid;
    Density1D mu_bar;
    std::vector<Density1D> mus;            // (T_i)_# mu_bar
    std::vector<TransportMap1D> maps;      // analytic at nodes
    std::vector<Potential1D> potentials;   // centered against mu_bar
};

inline double demo_T1(double x) { return (1.0 - std::exp(-x)) / (1.0 - std::exp(-1.0)); }
inline double demo_T2(double x) { return (std::exp(x) - 1.0) / (std::numbers::e - 1.0); }
inline double demo_T3(double x) { return 3.0 * x - demo_T1(x) - demo_T2(x); }

inline Demo1D gen_demo_1d(int nodes = 2001) {
    Demo1D d;
    d.grid = Grid1D(0.0, 1.0, nodes);
    d.mu_bar = truncated_normal(d.grid, 0.5, 0.1);
    const std::size_t m = static_cast<std::size_t>(nodes);
    double (*Ts[3])(double) = {demo_T1, demo_T2, demo_T3};
    for (int k = 0; k < 3; ++k) {
        std::vector<double> T(m);
        for (int i = 0; i < nodes; ++i)
            T[static_cast<std::size_t>(i)] = Ts[k](d.grid.node(i));
        TransportMap1D map(d.grid, std::move(T));
        d.mus.push_back(pushforward(d.mu_bar, map));
        d.potentials.push_back(potential_from_map(map, d.mu_bar));
        d.maps.push_back(std::move(map));
    }
    return d;
}

/// Demo data assembled through the standard pipeline (responses are the
/// predictor pushforwards themselves, so the response barycenter is the
/// reference and the feasibility constants can be estimated from it).
inline Dataset make_demo_dataset(int nodes = 2001) {
    Demo1D d = gen_demo_1d(nodes);
    std::vector<std::vector<Density1D>> preds(3);
    for (std::size_t i = 0; i < 3; ++i) preds[i] = {d.mus[i]};
    return make_dataset(d.mus, std::move(preds), {}, Centering::predictor_barycenter);
}

/// The illustrative 2D construction: uniform disks of diameter 0.1 at
/// (0.2, 0.2) and (0.8, 0.8) on the unit square.
struct Demo2D {
    Grid2D grid;
    std::vector<Density2D> mus;
};

inline Demo2D gen_demo_2d(int nodes = 48) {
    require(nodes >= 32, "gen_demo_2d: need at least a 32x32 grid");
    Demo2D d;
    d.grid = Grid2D(0.0, 1.0, 0.0, 1.0, nodes, nodes);
    d.mus.push_back(disk_density(d.grid, 0.2, 0.2, 0.05));
    d.mus.push_back(disk_density(d.grid, 0.8, 0.8, 0.05));
    return d;
}

/// One row of the convergence experiment table.
struct ConvergenceRow {
    std::string target; // "f1", "f2", "psi"
    double log_n = 0.0;
    double log_l2_error = 0.0;
};

/// Pushforward-weighted L2 error of the fitted f_j' against the truth,
/// evaluated at the cached potential values (the weight the fit itself
/// integrates against).
inline double fprime_l2_error(const ModelSpec& model, const Dataset& data, std::size_t j,
                              const std::function<double(double)>& true_deriv) {
    const std::size_t n = data.n();
    const std::size_t m = static_cast<std::size_t>(data.grid.n);
    auto w = data.grid.trap_weights();
    for (std::size_t x = 0; x < m; ++x) w[x] *= data.nu_bar.values[x];
    const auto& f = model.step_params[j];
    const double s = f.sign == Sign::plus ? 1.0 : -1.0;
    auto suf = f.suffix_sums();
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const auto& pot = data.potentials[i][j];
        for (std::size_t x = 0; x < m; ++x) {
            double fitted = suf[f.level_index(s * pot.values[x])];
            acc += w[x] * sqr(fitted - true_deriv(pot.values[x]));
        }
    }
    return std::sqrt(acc / static_cast<double>(n));
}

inline double psiprime_l2_error(const ModelSpec& model, const Dataset& data, std::size_t k,
                                const std::function<double(double)>& true_deriv) {
    const std::size_t m = static_cast<std::size_t>(data.grid.n);
    auto w = data.grid.trap_weights();
    for (std::size_t x = 0; x < m; ++x) w[x] *= data.nu_bar.values[x];
    double acc = 0.0;
    for (std::size_t x = 0; x < m; ++x) {
        double node = data.grid.node(static_cast<int>(x));
        acc += w[x] * sqr(model.psi_params[k].psi_prime(node) - true_deriv(node));
    }
    return std::sqrt(acc);
}

/// Runs the synthetic convergence experiment: for each n, generate with
/// each seed, fit, and record log L2 errors of (f1', f2', psi') averaged
/// over seeds (the figure's quantity is the log error).
inline std::vector<ConvergenceRow> run_convergence(const std::vector<std::size_t>& ns,
                                                   const std::vector<std::uint64_t>& seeds,
                                                   const SynthConfig1D& base,
                                                   const TruthParams& truth,
                                                   const FitConfig& fit_cfg) {
    require(!ns.empty(), "run_convergence: empty n list");
    require(!seeds.empty(), "run_convergence: empty seed list");
    std::vector<ConvergenceRow> table;
    for (std::size_t n : ns) {
        double acc[3] = {0.0, 0.0, 0.0};
        for (std::uint64_t seed : seeds) {
            SynthConfig1D cfg = base;
            cfg.n = n;
            cfg.seed = seed;
            SynthOutput out = gen_mixed_dataset(cfg, truth);
            FitResult fr = fit(out.data, fit_cfg);
            acc[0] += std::log(fprime_l2_error(fr.model, out.data, 0, truth.f1_deriv));
            acc[1] += std::log(fprime_l2_error(fr.model, out.data, 1, truth.f2_deriv));
            acc[2] += std::log(psiprime_l2_error(fr.model, out.data, 0, truth.psi_deriv));
        }
        const char* names[3] = {"f1", "f2", "psi"};
        for (int t = 0; t < 3; ++t)
            table.push_back(ConvergenceRow{names[t], std::log(static_cast<double>(n)),
                                           acc[t] / static_cast<double>(seeds.size())});
    }
    return table;
}

} // namespace kr
