#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <random>

#include "kr/grid.hpp"
#include "kr/synth.hpp"

using namespace kr;

namespace {

// error-function oracle for the normal(m, s^2) truncated to [lo, hi]
double truncnorm_cdf_oracle(double x, double m, double s, double lo, double hi) {
    auto Phi = [](double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); };
    double a = Phi((lo - m) / s), b = Phi((hi - m) / s);
    return (Phi((x - m) / s) - a) / (b - a);
}

double truncnorm_quantile_oracle(double u, double m, double s, double lo, double hi) {
    double a = lo, b = hi;
    for (int it = 0; it < 200; ++it) {
        double mid = 0.5 * (a + b);
        if (truncnorm_cdf_oracle(mid, m, s, lo, hi) < u)
            a = mid;
        else
            b = mid;
    }
    return 0.5 * (a + b);
}

} // namespace

TEST_CASE("density_from_samples: single kernel peaks at the sample") {
    Grid1D g(0.0, 1.0, 101);
    Density1D d = density_from_samples({0.5}, g, 0.1);
    std::size_t argmax = 0;
    for (std::size_t i = 0; i < d.values.size(); ++i)
        if (d.values[i] > d.values[argmax]) argmax = i;
    REQUIRE(g.node(static_cast<int>(argmax)) == Catch::Approx(0.5).margin(g.h() / 2));
}

TEST_CASE("density_from_samples: symmetric samples give a symmetric density") {
    Grid1D g(0.0, 1.0, 201);
    Density1D d = density_from_samples({0.3, 0.7}, g, 0.1);
    for (int i = 0; i < g.n; ++i) {
        double left = d.values[static_cast<std::size_t>(i)];
        double right = d.values[static_cast<std::size_t>(g.n - 1 - i)];
        REQUIRE(left == Catch::Approx(right).margin(1e-9));
    }
}

TEST_CASE("density_from_samples: Monte-Carlo mean oracle") {
    Grid1D g(0.0, 1.0, 401);
    CounterRng rng(2024, 7);
    std::vector<double> draws;
    draws.reserve(10000);
    for (int i = 0; i < 10000; ++i) {
        double x = rng.normal(0.5, 0.1);
        draws.push_back(std::min(std::max(x, 0.0), 1.0));
    }
    double sample_mean = 0.0;
    for (double x : draws) sample_mean += x;
    sample_mean /= static_cast<double>(draws.size());

    Density1D d = density_from_samples(draws, g, 0.02);
    double kde_mean = density_mean(d);
    REQUIRE(kde_mean == Catch::Approx(sample_mean).margin(5e-3));
    REQUIRE(kde_mean == Catch::Approx(0.5).margin(0.01));
}

TEST_CASE("density_from_samples: rejects bad input") {
    Grid1D g(0.0, 1.0, 11);
    REQUIRE_THROWS_AS(density_from_samples({}, g, 0.1), invalid_input);
    REQUIRE_THROWS_AS(density_from_samples({0.5}, g, 0.0), invalid_input);
    REQUIRE_THROWS_AS(density_from_samples({0.5}, g, -1.0), invalid_input);
}

TEST_CASE("density_from_samples: permutation invariance is bit-exact") {
    Grid1D g(0.0, 1.0, 101);
    std::vector<double> s1 = {0.31, 0.72, 0.11, 0.55, 0.48, 0.92};
    std::vector<double> s2 = {0.92, 0.11, 0.48, 0.31, 0.55, 0.72};
    Density1D a = density_from_samples(s1, g, 0.07);
    Density1D b = density_from_samples(s2, g, 0.07);
    for (std::size_t i = 0; i < a.values.size(); ++i) REQUIRE(a.values[i] == b.values[i]);
}

TEST_CASE("cdf of the uniform density is the identity") {
    Grid1D g(0.0, 1.0, 257);
    Cdf1D F = cdf(uniform_density(g));
    for (int i = 0; i < g.n; ++i)
        REQUIRE(F.values[static_cast<std::size_t>(i)] ==
                Catch::Approx(g.node(i)).margin(1e-9));
}

TEST_CASE("cdf of a spike steps from 0 to 1 across the spike") {
    Grid1D g(0.0, 1.0, 201);
    std::vector<double> v(201, 0.0);
    v[100] = 1.0; // renormalized by the constructor
    Density1D d(g, std::move(v));
    Cdf1D F = cdf(d);
    REQUIRE(F.values[95] == Catch::Approx(0.0).margin(1e-12));
    REQUIRE(F.values[105] == Catch::Approx(1.0).margin(1e-12));
}

TEST_CASE("cdf of the truncated normal hits 1/2 at the center") {
    Grid1D g(0.0, 1.0, 2001);
    Density1D d = truncated_normal(g, 0.5, 0.1);
    Cdf1D F = cdf(d);
    double oracle = truncnorm_cdf_oracle(0.5, 0.5, 0.1, 0.0, 1.0);
    REQUIRE(oracle == Catch::Approx(0.5).margin(1e-12));
    REQUIRE(F.values[1000] == Catch::Approx(0.5).margin(1e-6));
}

TEST_CASE("quantile of the uniform") {
    Grid1D g(0.0, 1.0, 101);
    Cdf1D F = cdf(uniform_density(g));
    REQUIRE(quantile(F, 0.25) == Catch::Approx(0.25).margin(g.h()));
    REQUIRE_THROWS_AS(quantile(F, -0.1), invalid_input);
    REQUIRE_THROWS_AS(quantile(F, 1.1), invalid_input);
}

TEST_CASE("quantile inverts the cdf at nodes for positive densities") {
    Grid1D g(0.0, 1.0, 301);
    Density1D d = truncated_normal(g, 0.4, 0.2);
    Cdf1D F = cdf(d);
    for (int i = 10; i < g.n - 10; i += 7) {
        double u = F.values[static_cast<std::size_t>(i)];
        REQUIRE(quantile(F, u) == Catch::Approx(g.node(i)).margin(g.h()));
    }
}

TEST_CASE("quantile matches the error-function oracle") {
    Grid1D g(0.0, 1.0, 2001);
    Density1D d = truncated_normal(g, 0.5, 0.1);
    Cdf1D F = cdf(d);
    double u = 0.8413447460685429; // Phi(1)
    double oracle = truncnorm_quantile_oracle(u, 0.5, 0.1, 0.0, 1.0);
    REQUIRE(oracle == Catch::Approx(0.6).margin(2e-4));
    REQUIRE(quantile(F, u) == Catch::Approx(0.6).margin(2e-3));
}

TEST_CASE("quantile resolves flat cdf segments to the left endpoint") {
    Grid1D g(0.0, 1.0, 11);
    // density zero on [0.3, 0.7]: cdf flat there
    std::vector<double> v = {2.0, 2.0, 2.0, 2.0, 0.0, 0.0, 0.0, 2.0, 2.0, 2.0, 2.0};
    Density1D d(g, std::move(v));
    Cdf1D F = cdf(d);
    double u_flat = F.values[3];
    REQUIRE(quantile(F, u_flat) == Catch::Approx(g.node(3)).margin(1e-12));
}

TEST_CASE("every constructed density has unit trapezoid mass") {
    Grid1D g(0.0, 1.0, 173);
    CounterRng rng(11, 3);
    for (int rep = 0; rep < 20; ++rep) {
        std::vector<double> v(173);
        for (auto& x : v) x = rng.uniform(0.0, 1.0);
        Density1D d(g, std::move(v));
        REQUIRE(std::abs(d.mass() - 1.0) <= 1e-9);
    }
}
