#pragma once

// Diagonal state space channels: discretization, kernel generation, and the
// two equivalent evaluation routes (causal convolution and recurrence).

#include <cmath>
#include <complex>
#include <cstddef>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "s4mil/error.hpp"
#include "s4mil/fft.hpp"
#include "s4mil/parallel.hpp"
#include "s4mil/tensor.hpp"

namespace s4mil {

using Complex = std::complex<double>;

enum class Discretization { bilinear, zoh };

inline const char* to_string(Discretization rule) {
    return rule == Discretization::bilinear ? "bilinear" : "zoh";
}

/// How stored poles map to outputs. Channels keep one member of each
/// conjugate pair and double the real part; `full` treats the stored poles as
/// the whole system (used to check scalar systems by hand).
enum class PoleStorage { conjugate_pairs, full };

inline double output_factor(PoleStorage storage) {
    return storage == PoleStorage::conjugate_pairs ? 2.0 : 1.0;
}

/// Continuous-time parameters of one feature channel. B is fixed to ones.
struct SsmChannelParams {
    std::vector<Complex> a;  // diagonal of A, one entry per conjugate pair
    std::vector<Complex> c;
    double d = 0.0;
    double log_dt = 0.0;

    std::size_t n_half() const noexcept { return a.size(); }
    double dt() const { return std::exp(log_dt); }

    bool stable() const {
        for (const auto& ak : a)
            if (!(ak.real() < 0.0)) return false;
        return true;
    }

    void validate() const {
        if (a.size() != c.size())
            throw ContractViolation("channel has " + std::to_string(a.size()) + " poles but " +
                                    std::to_string(c.size()) + " output weights");
        if (!std::isfinite(log_dt) || !(dt() > 0.0) || !std::isfinite(dt()))
            throw ContractViolation("channel timestep must be finite and positive (log_dt = " +
                                    std::to_string(log_dt) + ")");
    }

    /// Builds a channel from an explicit timestep; rejects dt <= 0.
    static SsmChannelParams with_dt(std::vector<Complex> a, std::vector<Complex> c, double d, double dt) {
        if (!(dt > 0.0) || !std::isfinite(dt))
            throw ContractViolation("timestep must be positive and finite, got " + std::to_string(dt));
        SsmChannelParams p{std::move(a), std::move(c), d, std::log(dt)};
        p.validate();
        return p;
    }
};

struct DiscretizedChannel {
    std::vector<Complex> a_bar;
    std::vector<Complex> b_bar;
};

/// Length-L impulse response of one channel.
struct KernelCache {
    std::size_t length = 0;
    std::vector<double> values;
};

/// Partial derivatives of (a_bar, b_bar) with respect to a (complex) and dt (real).
struct DiscretizationJacobian {
    Complex dabar_da, dabar_ddt, dbbar_da, dbbar_ddt;
};

inline DiscretizedChannel discretize_bilinear(const SsmChannelParams& params, std::size_t channel = 0) {
    params.validate();
    const double dt = params.dt();
    DiscretizedChannel out;
    out.a_bar.resize(params.n_half());
    out.b_bar.resize(params.n_half());
    for (std::size_t k = 0; k < params.n_half(); ++k) {
        const Complex half = 0.5 * dt * params.a[k];
        const Complex pivot = 1.0 - half;
        if (std::abs(pivot) < 1e-12)
            throw NumericalError("bilinear discretization is singular at channel " + std::to_string(channel) +
                                 ", pole " + std::to_string(k));
        const Complex inv = 1.0 / pivot;
        out.a_bar[k] = inv * (1.0 + half);
        out.b_bar[k] = inv * dt;
    }
    return out;
}

namespace detail {

// exp(z) - 1 over z, for small z.
inline Complex expm1_over_z_series(Complex z) {
    return 1.0 + z * (0.5 + z * (1.0 / 6.0 + z * (1.0 / 24.0 + z / 120.0)));
}

constexpr double zoh_series_radius = 1e-5;

}  // namespace detail

inline DiscretizedChannel discretize_zoh(const SsmChannelParams& params) {
    params.validate();
    const double dt = params.dt();
    DiscretizedChannel out;
    out.a_bar.resize(params.n_half());
    out.b_bar.resize(params.n_half());
    for (std::size_t k = 0; k < params.n_half(); ++k) {
        const Complex a = params.a[k];
        const Complex z = dt * a;
        out.a_bar[k] = std::exp(z);
        if (std::abs(z) < detail::zoh_series_radius)
            out.b_bar[k] = dt * detail::expm1_over_z_series(z);
        else
            out.b_bar[k] = (out.a_bar[k] - 1.0) / a;
    }
    return out;
}

inline DiscretizedChannel discretize(const SsmChannelParams& params, Discretization rule, std::size_t channel = 0) {
    return rule == Discretization::bilinear ? discretize_bilinear(params, channel) : discretize_zoh(params);
}

inline std::vector<DiscretizationJacobian> discretization_jacobian(const SsmChannelParams& params,
                                                                   Discretization rule) {
    const double dt = params.dt();
    std::vector<DiscretizationJacobian> jac(params.n_half());
    for (std::size_t k = 0; k < params.n_half(); ++k) {
        const Complex a = params.a[k];
        if (rule == Discretization::bilinear) {
            const Complex q = 1.0 - 0.5 * dt * a;
            const Complex q2 = q * q;
            jac[k] = {dt / q2, a / q2, 0.5 * dt * dt / q2, 1.0 / q2};
        } else {
            const Complex z = dt * a;
            const Complex abar = std::exp(z);
            Complex dbbar_da;
            if (std::abs(z) < detail::zoh_series_radius)
                dbbar_da = dt * dt * (0.5 + z * (1.0 / 3.0 + z * (1.0 / 8.0 + z / 30.0)));
            else
                dbbar_da = (dt * abar * a - (abar - 1.0)) / (a * a);
            jac[k] = {dt * abar, a * abar, dbbar_da, abar};
        }
    }
    return jac;
}

/// K_l = f * Re(sum_k c_k a_bar_k^l b_bar_k), with f = 2 for conjugate-pair storage.
/// Powers are accumulated by running products.
inline KernelCache compute_kernel(const DiscretizedChannel& disc, std::span<const Complex> c, std::size_t length,
                                  PoleStorage storage = PoleStorage::conjugate_pairs) {
    if (length == 0) throw ContractViolation("kernel length must be at least 1");
    const std::size_t n = disc.a_bar.size();
    if (c.size() != n || disc.b_bar.size() != n)
        throw ContractViolation("kernel inputs disagree on the number of poles");
    const double factor = output_factor(storage);
    // Split real/imaginary storage so the inner loop vectorizes.
    std::vector<double> wr(n), wi(n), pr(n, 1.0), pi(n, 0.0), ar(n), ai(n);
    for (std::size_t k = 0; k < n; ++k) {
        const Complex w = factor * c[k] * disc.b_bar[k];
        wr[k] = w.real();
        wi[k] = w.imag();
        ar[k] = disc.a_bar[k].real();
        ai[k] = disc.a_bar[k].imag();
    }
    KernelCache kernel{length, std::vector<double>(length)};
    std::vector<double> term(n);
    double* __restrict tr = term.data();
    double* __restrict xr = pr.data();
    double* __restrict xi = pi.data();
    const double* __restrict vr = wr.data();
    const double* __restrict vi = wi.data();
    const double* __restrict sr = ar.data();
    const double* __restrict si = ai.data();
    for (std::size_t l = 0; l < length; ++l) {
        for (std::size_t k = 0; k < n; ++k) {
            tr[k] = vr[k] * xr[k] - vi[k] * xi[k];
            const double nr = xr[k] * sr[k] - xi[k] * si[k];
            const double ni = xr[k] * si[k] + xi[k] * sr[k];
            xr[k] = nr;
            xi[k] = ni;
        }
        double acc = 0.0;
        for (std::size_t k = 0; k < n; ++k) acc += tr[k];
        kernel.values[l] = acc;
        // Powers below 1e-140 are set to exactly zero before they reach the
        // subnormal range, where arithmetic is very slow.
        if ((l & 63) == 63) {
            bool alive = false;
            for (std::size_t k = 0; k < n; ++k) {
                if (xr[k] * xr[k] + xi[k] * xi[k] < 1e-280) xr[k] = xi[k] = 0.0;
                alive = alive || xr[k] != 0.0 || xi[k] != 0.0;
            }
            if (!alive) break;
        }
    }
    for (double v : kernel.values)
        if (!std::isfinite(v)) throw NumericalError("kernel overflow: non-finite kernel value");
    return kernel;
}

inline void check_lengths(const KernelCache& kernel, std::size_t input_length) {
    if (kernel.length != input_length || kernel.values.size() != input_length)
        throw ContractViolation("kernel length " + std::to_string(kernel.length) + " does not match input length " +
                                std::to_string(input_length));
}

/// y_t = sum_{s<=t} K_s u_{t-s} + d u_t, evaluated with a zero-padded FFT.
inline std::vector<double> convolve(const KernelCache& kernel, std::span<const double> u, double d) {
    check_lengths(kernel, u.size());
    std::vector<double> y(u.size());
    fft::Convolver conv(u.size());
    conv.causal_convolve(kernel.values, u, y);
    for (std::size_t t = 0; t < u.size(); ++t) y[t] += d * u[t];
    return y;
}

/// Same contract as convolve(), O(L^2).
inline std::vector<double> convolve_direct(const KernelCache& kernel, std::span<const double> u, double d) {
    check_lengths(kernel, u.size());
    std::vector<double> y(u.size());
    for (std::size_t t = 0; t < u.size(); ++t) {
        double acc = d * u[t];
        for (std::size_t s = 0; s <= t; ++s) acc += kernel.values[s] * u[t - s];
        y[t] = acc;
    }
    return y;
}

/// x_t = a_bar x_{t-1} + b_bar u_t from x_{-1} = 0; y_t = f Re(c x_t) + d u_t.
inline std::vector<double> run_recurrence(const DiscretizedChannel& disc, std::span<const Complex> c, double d,
                                          std::span<const double> u,
                                          PoleStorage storage = PoleStorage::conjugate_pairs) {
    const std::size_t n = disc.a_bar.size();
    if (c.size() != n || disc.b_bar.size() != n)
        throw ContractViolation("recurrence inputs disagree on the number of poles");
    const double factor = output_factor(storage);
    std::vector<Complex> x(n, Complex{});
    std::vector<double> y(u.size());
    for (std::size_t t = 0; t < u.size(); ++t) {
        double acc = 0.0;
        for (std::size_t k = 0; k < n; ++k) {
            x[k] = disc.a_bar[k] * x[k] + disc.b_bar[k] * u[t];
            acc += (c[k] * x[k]).real();
        }
        y[t] = factor * acc + d * u[t];
    }
    return y;
}

/// Gradients of a scalar loss through one channel. Complex entries hold
/// dL/dRe + i dL/dIm.
struct ChannelGradient {
    std::vector<Complex> a;
    std::vector<Complex> c;
    double d = 0.0;
    double log_dt = 0.0;
    std::vector<double> u;
};

namespace detail {

// Chains gradients w.r.t. (a_bar, b_bar) back to (a, log_dt).
inline void chain_discretization(const SsmChannelParams& params, Discretization rule,
                                 std::span<const Complex> g_abar, std::span<const Complex> g_bbar,
                                 ChannelGradient& out) {
    const auto jac = discretization_jacobian(params, rule);
    const double dt = params.dt();
    double g_dt = 0.0;
    out.a.resize(params.n_half());
    for (std::size_t k = 0; k < params.n_half(); ++k) {
        out.a[k] = std::conj(jac[k].dabar_da) * g_abar[k] + std::conj(jac[k].dbbar_da) * g_bbar[k];
        g_dt += (std::conj(g_abar[k]) * jac[k].dabar_ddt + std::conj(g_bbar[k]) * jac[k].dbbar_ddt).real();
    }
    out.log_dt = dt * g_dt;
}

}  // namespace detail

/// Correlation route: dL/dK is the correlation of the upstream gradient with
/// u, chained through the kernel powers and the discretization map.
inline ChannelGradient grad_ssm_conv(const SsmChannelParams& params, Discretization rule, const DiscretizedChannel& disc,
                                     const KernelCache& kernel, std::span<const double> u,
                                     std::span<const double> upstream, fft::Convolver& conv,
                                     PoleStorage storage = PoleStorage::conjugate_pairs) {
    const std::size_t L = u.size();
    check_lengths(kernel, L);
    if (upstream.size() != L) throw ContractViolation("upstream gradient length does not match input length");
    const std::size_t n = params.n_half();
    const double factor = output_factor(storage);

    ChannelGradient g;
    g.u.resize(L);
    std::vector<double> g_kernel(L);
    fft::Spectrum up_spec, other;
    conv.forward(upstream, up_spec);
    conv.forward(u, other);
    conv.inverse_product(up_spec, other, true, g_kernel);
    conv.forward(kernel.values, other);
    conv.inverse_product(up_spec, other, true, g.u);
    for (std::size_t t = 0; t < L; ++t) {
        g.u[t] += params.d * upstream[t];
        g.d += upstream[t] * u[t];
    }

    std::vector<Complex> g_abar(n), g_bbar(n);
    g.c.resize(n);
    for (std::size_t k = 0; k < n; ++k) {
        const Complex w = params.c[k] * disc.b_bar[k];
        const Complex abar_conj = std::conj(disc.a_bar[k]);
        Complex g_w{}, g_a_sum{};
        Complex power{1.0, 0.0};  // conj(a_bar)^l
        for (std::size_t l = 0; l < L; ++l) {
            g_w += g_kernel[l] * power;
            if (l + 1 < L) g_a_sum += static_cast<double>(l + 1) * g_kernel[l + 1] * power;
            power *= abar_conj;
        }
        g_w *= factor;
        g_abar[k] = factor * std::conj(w) * g_a_sum;
        g.c[k] = std::conj(disc.b_bar[k]) * g_w;
        g_bbar[k] = std::conj(params.c[k]) * g_w;
    }
    detail::chain_discretization(params, rule, g_abar, g_bbar, g);
    return g;
}

inline ChannelGradient grad_ssm_conv(const SsmChannelParams& params, Discretization rule, std::span<const double> u,
                                     std::span<const double> upstream,
                                     PoleStorage storage = PoleStorage::conjugate_pairs) {
    const auto disc = discretize(params, rule);
    const auto kernel = compute_kernel(disc, params.c, u.size(), storage);
    fft::Convolver conv(u.size());
    return grad_ssm_conv(params, rule, disc, kernel, u, upstream, conv, storage);
}

/// Backpropagation through the unrolled recurrence. Independent of the
/// correlation route; both must agree.
inline ChannelGradient grad_ssm_recurrence(const SsmChannelParams& params, Discretization rule,
                                           std::span<const double> u, std::span<const double> upstream,
                                           PoleStorage storage = PoleStorage::conjugate_pairs) {
    const std::size_t L = u.size();
    if (upstream.size() != L) throw ContractViolation("upstream gradient length does not match input length");
    const std::size_t n = params.n_half();
    const double factor = output_factor(storage);
    const auto disc = discretize(params, rule);

    std::vector<Complex> states(L * n);
    std::vector<Complex> x(n, Complex{});
    for (std::size_t t = 0; t < L; ++t)
        for (std::size_t k = 0; k < n; ++k) {
            x[k] = disc.a_bar[k] * x[k] + disc.b_bar[k] * u[t];
            states[t * n + k] = x[k];
        }

    ChannelGradient g;
    g.u.assign(L, 0.0);
    g.c.assign(n, Complex{});
    std::vector<Complex> g_abar(n), g_bbar(n), adjoint(n, Complex{});
    for (std::size_t t = L; t-- > 0;) {
        g.d += upstream[t] * u[t];
        double gu = params.d * upstream[t];
        for (std::size_t k = 0; k < n; ++k) {
            adjoint[k] = factor * upstream[t] * std::conj(params.c[k]) + std::conj(disc.a_bar[k]) * adjoint[k];
            g.c[k] += factor * upstream[t] * std::conj(states[t * n + k]);
            if (t > 0) g_abar[k] += std::conj(states[(t - 1) * n + k]) * adjoint[k];
            g_bbar[k] += u[t] * adjoint[k];
            gu += (adjoint[k] * std::conj(disc.b_bar[k])).real();
        }
        g.u[t] = gu;
    }
    detail::chain_discretization(params, rule, g_abar, g_bbar, g);
    return g;
}

/// Applies one channel per feature column of `in` (L x H) by FFT convolution.
/// Channels are independent and evaluated with parallel_for.
template <typename Scalar>
void ssm_layer_convolve(std::span<const SsmChannelParams> channels, Discretization rule, const Tensor<Scalar>& in,
                        Tensor<Scalar>& out) {
    const auto L = static_cast<std::size_t>(in.rows());
    const auto H = static_cast<std::size_t>(in.cols());
    if (channels.size() != H)
        throw ContractViolation("ssm layer has " + std::to_string(channels.size()) + " channels but input is " +
                                shape_string(in));
    out.resize(in.rows(), in.cols());
    if (L == 0 || H == 0) return;
    // Channel-major copy, so each channel's sequence is contiguous.
    std::vector<double> seq(H * L);
    constexpr std::size_t tile = 64;
    for (std::size_t t0 = 0; t0 < L; t0 += tile)
        for (std::size_t h0 = 0; h0 < H; h0 += tile)
            for (std::size_t t = t0; t < std::min(L, t0 + tile); ++t)
                for (std::size_t h = h0; h < std::min(H, h0 + tile); ++h)
                    seq[h * L + t] = static_cast<double>(in(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(h)));
    parallel_blocks(H, [&](std::size_t begin, std::size_t end) {
        fft::Convolver conv(L);
        std::vector<double> y(L);
        for (std::size_t h = begin; h < end; ++h) {
            const auto disc = discretize(channels[h], rule, h);
            const auto kernel = compute_kernel(disc, channels[h].c, L);
            const std::span<double> u(seq.data() + h * L, L);
            conv.causal_convolve(kernel.values, u, y);
            const double d = channels[h].d;
            for (std::size_t t = 0; t < L; ++t) u[t] = y[t] + d * u[t];
        }
    });
    for (std::size_t t0 = 0; t0 < L; t0 += tile)
        for (std::size_t h0 = 0; h0 < H; h0 += tile)
            for (std::size_t t = t0; t < std::min(L, t0 + tile); ++t)
                for (std::size_t h = h0; h < std::min(H, h0 + tile); ++h)
                    out(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(h)) = static_cast<Scalar>(seq[h * L + t]);
}

/// Token-at-a-time evaluation of a layer of channels with O(H * N) state.
class SsmLayerStream {
public:
    SsmLayerStream(std::span<const SsmChannelParams> channels, Discretization rule) : channels_(channels.size()) {
        n_half_ = channels.empty() ? 0 : channels[0].n_half();
        const std::size_t total = channels_ * n_half_;
        ar_.resize(total);
        ai_.resize(total);
        br_.resize(total);
        bi_.resize(total);
        cr_.resize(total);
        ci_.resize(total);
        d_.resize(channels_);
        for (std::size_t h = 0; h < channels_; ++h) {
            if (channels[h].n_half() != n_half_) throw ContractViolation("channels disagree on state size");
            const auto disc = discretize(channels[h], rule, h);
            for (std::size_t k = 0; k < n_half_; ++k) {
                const std::size_t i = h * n_half_ + k;
                ar_[i] = disc.a_bar[k].real();
                ai_[i] = disc.a_bar[k].imag();
                br_[i] = disc.b_bar[k].real();
                bi_[i] = disc.b_bar[k].imag();
                cr_[i] = 2.0 * channels[h].c[k].real();
                ci_[i] = 2.0 * channels[h].c[k].imag();
            }
            d_[h] = channels[h].d;
        }
        reset();
    }

    void reset() {
        xr_.assign(channels_ * n_half_, 0.0);
        xi_.assign(channels_ * n_half_, 0.0);
    }

    template <typename Scalar>
    void step(const Scalar* u, Scalar* y) {
        for (std::size_t h = 0; h < channels_; ++h) {
            const double uh = static_cast<double>(u[h]);
            const std::size_t base = h * n_half_;
            double acc = 0.0;
            for (std::size_t k = 0; k < n_half_; ++k) {
                const std::size_t i = base + k;
                const double nr = ar_[i] * xr_[i] - ai_[i] * xi_[i] + br_[i] * uh;
                const double ni = ar_[i] * xi_[i] + ai_[i] * xr_[i] + bi_[i] * uh;
                xr_[i] = nr;
                xi_[i] = ni;
                acc += cr_[i] * nr - ci_[i] * ni;
            }
            y[h] = static_cast<Scalar>(acc + d_[h] * uh);
        }
    }

private:
    std::size_t channels_ = 0;
    std::size_t n_half_ = 0;
    std::vector<double> ar_, ai_, br_, bi_, cr_, ci_, d_, xr_, xi_;
};

}  // namespace s4mil
