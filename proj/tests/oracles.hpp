#pragma once

// Independent reference computations used only by tests. Nothing here calls
// into the code paths it checks.

#include <cmath>
#include <complex>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <vector>

namespace oracle {

using LComplex = std::complex<long double>;

/// Bilinear map written out in real arithmetic at extended precision.
inline std::pair<LComplex, LComplex> bilinear(long double are, long double aim, long double dt) {
    // q = 1 - dt a / 2, p = 1 + dt a / 2
    const long double qr = 1.0L - 0.5L * dt * are, qi = -0.5L * dt * aim;
    const long double pr = 1.0L + 0.5L * dt * are, pi = 0.5L * dt * aim;
    const long double den = qr * qr + qi * qi;
    const LComplex abar((pr * qr + pi * qi) / den, (pi * qr - pr * qi) / den);
    const LComplex bbar(dt * qr / den, -dt * qi / den);
    return {abar, bbar};
}

/// K_l = factor * Re(sum_k c_k a_k^l b_k), each power formed by l explicit multiplications.
inline std::vector<double> brute_force_kernel(std::span<const std::complex<double>> abar,
                                              std::span<const std::complex<double>> bbar,
                                              std::span<const std::complex<double>> c, std::size_t length,
                                              double factor) {
    std::vector<double> k(length);
    for (std::size_t l = 0; l < length; ++l) {
        long double acc = 0.0L;
        for (std::size_t j = 0; j < abar.size(); ++j) {
            LComplex p(1.0L, 0.0L);
            for (std::size_t i = 0; i < l; ++i) p *= LComplex(abar[j]);
            acc += (LComplex(c[j]) * p * LComplex(bbar[j])).real();
        }
        k[l] = static_cast<double>(factor * acc);
    }
    return k;
}

inline std::vector<double> causal_convolution(std::span<const double> k, std::span<const double> u, double d) {
    std::vector<double> y(u.size(), 0.0);
    for (std::size_t t = 0; t < u.size(); ++t) {
        long double acc = static_cast<long double>(d) * u[t];
        for (std::size_t s = 0; s <= t; ++s) acc += static_cast<long double>(k[s]) * u[t - s];
        y[t] = static_cast<double>(acc);
    }
    return y;
}

/// Central difference of f at x along coordinate i.
inline double central_difference(const std::function<double(const std::vector<double>&)>& f, std::vector<double> x,
                                 std::size_t i, double step) {
    const double x0 = x[i];
    x[i] = x0 + step;
    const double fp = f(x);
    x[i] = x0 - step;
    const double fm = f(x);
    return (fp - fm) / (2.0 * step);
}

/// O(n^2) Mann-Whitney pair count.
inline double pairwise_auroc(std::span<const double> scores, std::span<const int> labels) {
    std::uint64_t twice = 0, pairs = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (labels[i] == 0) continue;
        for (std::size_t j = 0; j < scores.size(); ++j) {
            if (labels[j] != 0) continue;
            ++pairs;
            if (scores[i] > scores[j])
                twice += 2;
            else if (scores[i] == scores[j])
                twice += 1;
        }
    }
    return static_cast<double>(twice) / static_cast<double>(2 * pairs);
}

/// Relative error with an absolute floor for tiny references.
inline bool close(double analytic, double reference, double rel, double abs_floor) {
    const double diff = std::fabs(analytic - reference);
    return diff <= rel * std::max(std::fabs(analytic), std::fabs(reference)) || diff <= abs_floor;
}

}  // namespace oracle
