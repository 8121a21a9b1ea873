#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "kr/common.hpp"

namespace kr {

enum class Sign { plus, minus };

inline char sign_char(Sign s) { return s == Sign::plus ? '+' : '-'; }

/// Finite-dimensional parameterization of f'. With theta0 = 0 the
/// derivative is the exact step function
///     f'(t) = sum_l theta_l 1{t <= z_l},
/// which is what fitting uses (the loss gradients are exact for it).
/// With theta0 > 0 each indicator is replaced by the sigmoid
/// 1/(1 + exp(theta0 (t - z_l))), a smooth approximation that recovers
/// the step as theta0 -> infinity.
struct StepParams {
    std::vector<double> knots; // strictly increasing, spans the potential image
    std::vector<double> theta; // one coefficient per knot
    Sign sign = Sign::plus;
    double theta0 = 0.0;

    StepParams() = default;
    StepParams(std::vector<double> z, std::vector<double> th, Sign s, double t0 = 0.0)
        : knots(std::move(z)), theta(std::move(th)), sign(s), theta0(t0) {
        require(knots.size() == theta.size(), "StepParams: knots/theta size mismatch");
        require(!knots.empty(), "StepParams: no knots");
        for (std::size_t i = 1; i < knots.size(); ++i)
            require(knots[i] > knots[i - 1], "StepParams: knots must be strictly increasing");
        require(theta0 >= 0.0, "StepParams: theta0 must be nonnegative");
        for (double t : theta) {
            if (sign == Sign::plus)
                require(t >= 0.0, "StepParams: sign + requires theta >= 0");
            else
                require(t <= 0.0, "StepParams: sign - requires theta <= 0");
        }
    }

    std::size_t K() const { return knots.size(); }

    /// Suffix sums S[m] = theta_m + ... + theta_{K-1}; S[K] = 0.
    std::vector<double> suffix_sums() const {
        std::vector<double> s(theta.size() + 1, 0.0);
        for (std::size_t i = theta.size(); i-- > 0;) s[i] = s[i + 1] + theta[i];
        return s;
    }

    /// Index of the first knot >= t (K if t is beyond the last knot).
    std::size_t level_index(double t) const {
        return static_cast<std::size_t>(
            std::lower_bound(knots.begin(), knots.end(), t) - knots.begin());
    }

    double fprime(double t) const {
        if (theta0 == 0.0) {
            double s = 0.0;
            for (std::size_t l = 0; l < knots.size(); ++l)
                if (t <= knots[l]) s += theta[l];
            return s;
        }
        double s = 0.0;
        for (std::size_t l = 0; l < knots.size(); ++l)
            s += theta[l] / (1.0 + std::exp(theta0 * (t - knots[l])));
        return s;
    }

    /// f(t) = integral of f' from the left knot (f(z_1) = 0). The loss
    /// depends on f' only, so this fixes the serialization.
    double fvalue(double t) const {
        const double a = knots.front();
        if (theta0 == 0.0) {
            double s = 0.0;
            for (std::size_t l = 0; l < knots.size(); ++l)
                s += theta[l] * (std::min(t, knots[l]) - a);
            return s;
        }
        double s = 0.0;
        for (std::size_t l = 0; l < knots.size(); ++l)
            s += theta[l] * (sigmoid_antideriv(t, knots[l]) - sigmoid_antideriv(a, knots[l]));
        return s;
    }

    double fsecond(double t) const {
        if (theta0 == 0.0) return 0.0; // distributional between knots
        double s = 0.0;
        for (std::size_t l = 0; l < knots.size(); ++l) {
            double sig = 1.0 / (1.0 + std::exp(theta0 * (t - knots[l])));
            s += -theta0 * theta[l] * sig * (1.0 - sig);
        }
        return s;
    }

  private:
    // antiderivative of 1/(1+exp(theta0 (x-z))): overflow-safe softplus form
    double sigmoid_antideriv(double x, double z) const {
        double u = theta0 * (x - z);
        double sp = u > 0.0 ? u + std::log1p(std::exp(-u)) : std::log1p(std::exp(u));
        return x - sp / theta0;
    }
};

/// Numerical (kappa1, kappa2) = (sup|f'|, sup|f''|) over [a, b].
/// For theta0 = 0 the step function has sup|f'| = sum|theta_l| and a
/// distributional second derivative, reported as the unbounded marker
/// (0 when all theta vanish).
inline std::pair<double, double> step_derivative_stats(const StepParams& f, double a, double b) {
    require(a < b, "step_derivative_stats: empty range");
    if (f.theta0 == 0.0) {
        double k1 = 0.0, tmax = 0.0;
        for (double t : f.theta) {
            k1 += std::abs(t);
            tmax = std::max(tmax, std::abs(t));
        }
        return {k1, tmax == 0.0 ? 0.0 : unbounded_marker()};
    }
    const int n = 50001;
    double k1 = 0.0, k2 = 0.0;
    for (int i = 0; i < n; ++i) {
        double t = a + (b - a) * i / (n - 1);
        k1 = std::max(k1, std::abs(f.fprime(t)));
        k2 = std::max(k2, std::abs(f.fsecond(t)));
    }
    return {k1, k2};
}

/// Parameterization of the c-concave psi through its derivative
///     psi'(x) = x - sum_l vartheta_l 1{x >= z_l},
/// with vartheta_l >= 0 so that x - psi'(x) is nondecreasing (psi =
/// |x|^2/2 - h with h convex).
struct PsiParams {
    std::vector<double> knots;
    std::vector<double> vartheta;

    PsiParams() = default;
    PsiParams(std::vector<double> z, std::vector<double> vt)
        : knots(std::move(z)), vartheta(std::move(vt)) {
        require(knots.size() == vartheta.size(), "PsiParams: knots/vartheta size mismatch");
        require(!knots.empty(), "PsiParams: no knots");
        for (std::size_t i = 1; i < knots.size(); ++i)
            require(knots[i] > knots[i - 1], "PsiParams: knots must be strictly increasing");
        for (double v : vartheta) require(v >= 0.0, "PsiParams: vartheta must be >= 0");
    }

    std::size_t K() const { return knots.size(); }

    /// Prefix sums P[m] = vartheta_0 + ... + vartheta_{m-1}.
    std::vector<double> prefix_sums() const {
        std::vector<double> p(vartheta.size() + 1, 0.0);
        for (std::size_t i = 0; i < vartheta.size(); ++i) p[i + 1] = p[i] + vartheta[i];
        return p;
    }

    /// Number of knots <= x (the active indicators at x).
    std::size_t active_count(double x) const {
        return static_cast<std::size_t>(
            std::upper_bound(knots.begin(), knots.end(), x) - knots.begin());
    }

    double psi_prime(double x) const {
        double s = 0.0;
        for (std::size_t l = 0; l < knots.size(); ++l)
            if (x >= knots[l]) s += vartheta[l];
        return x - s;
    }
};

/// K equally spaced knots spanning [lo, hi] padded by 1% on each side.
inline std::vector<double> padded_knots(double lo, double hi, std::size_t K) {
    require(K >= 2, "padded_knots: need at least 2 knots");
    if (hi <= lo) hi = lo + 1e-12 + std::abs(lo) * 1e-12;
    double pad = 0.01 * (hi - lo);
    lo -= pad;
    hi += pad;
    std::vector<double> z(K);
    for (std::size_t i = 0; i < K; ++i)
        z[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(K - 1);
    return z;
}

} // namespace kr
