#pragma once

#include <fftw3.h>

#include <complex>
#include <cstddef>
#include <map>
#include <memory>
#include <mutex>
#include <span>
#include <vector>

#include "s4mil/error.hpp"

namespace s4mil::fft {

using Spectrum = std::vector<std::complex<double>>;

/// Smallest power of two that holds a linear (non-circular) convolution of
/// two length-`length` sequences.
inline std::size_t padded_size(std::size_t length) {
    std::size_t n = 1;
    while (n < 2 * length) n <<= 1;
    return n;
}

namespace detail {

struct FftwDeleter {
    void operator()(void* p) const { fftw_free(p); }
};

template <typename T>
using FftwBuffer = std::unique_ptr<T[], FftwDeleter>;

template <typename T>
FftwBuffer<T> allocate(std::size_t count) {
    auto* p = static_cast<T*>(fftw_malloc(sizeof(T) * count));
    if (p == nullptr) throw std::bad_alloc();
    return FftwBuffer<T>(p);
}

struct PlanPair {
    fftw_plan forward = nullptr;
    fftw_plan inverse = nullptr;
};

// The FFTW planner is not thread-safe; plan execution on distinct buffers is.
class PlanRegistry {
public:
    static PlanRegistry& instance() {
        static PlanRegistry registry;
        return registry;
    }

    const PlanPair& get(std::size_t n) {
        std::lock_guard lock(mutex_);
        auto it = plans_.find(n);
        if (it != plans_.end()) return it->second;
        auto real = allocate<double>(n);
        auto spec = allocate<fftw_complex>(n / 2 + 1);
        PlanPair pair;
        pair.forward = fftw_plan_dft_r2c_1d(static_cast<int>(n), real.get(), spec.get(), FFTW_ESTIMATE);
        pair.inverse = fftw_plan_dft_c2r_1d(static_cast<int>(n), spec.get(), real.get(), FFTW_ESTIMATE);
        if (pair.forward == nullptr || pair.inverse == nullptr)
            throw NumericalError("FFTW failed to create a plan of size " + std::to_string(n));
        return plans_.emplace(n, pair).first->second;
    }

    ~PlanRegistry() {
        for (auto& [n, pair] : plans_) {
            fftw_destroy_plan(pair.forward);
            fftw_destroy_plan(pair.inverse);
        }
    }

private:
    PlanRegistry() = default;
    std::mutex mutex_;
    std::map<std::size_t, PlanPair> plans_;
};

}  // namespace detail

/// Zero-padded real FFT workspace for causal convolutions and correlations of
/// sequences of a fixed length. One instance per thread.
class Convolver {
public:
    explicit Convolver(std::size_t length)
        : length_(length),
          n_(padded_size(length)),
          real_(detail::allocate<double>(n_)),
          spec_(detail::allocate<fftw_complex>(n_ / 2 + 1)),
          plans_(&detail::PlanRegistry::instance().get(n_)) {}

    std::size_t length() const noexcept { return length_; }
    std::size_t padded() const noexcept { return n_; }
    std::size_t bins() const noexcept { return n_ / 2 + 1; }

    /// Transform of x zero-padded to the workspace size (x.size() <= length()).
    void forward(std::span<const double> x, Spectrum& out) {
        if (x.size() > length_)
            throw ContractViolation("fft input of length " + std::to_string(x.size()) +
                                    " exceeds workspace length " + std::to_string(length_));
        std::copy(x.begin(), x.end(), real_.get());
        std::fill(real_.get() + x.size(), real_.get() + n_, 0.0);
        fftw_execute_dft_r2c(plans_->forward, real_.get(), spec_.get());
        out.resize(bins());
        auto* s = reinterpret_cast<const std::complex<double>*>(spec_.get());
        std::copy(s, s + bins(), out.begin());
    }

    /// First out.size() samples of the inverse transform of a * b (or a * conj(b)).
    void inverse_product(const Spectrum& a, const Spectrum& b, bool conjugate_b, std::span<double> out) {
        auto* s = reinterpret_cast<std::complex<double>*>(spec_.get());
        const std::size_t m = bins();
        if (conjugate_b) {
            for (std::size_t i = 0; i < m; ++i) s[i] = a[i] * std::conj(b[i]);
        } else {
            for (std::size_t i = 0; i < m; ++i) s[i] = a[i] * b[i];
        }
        fftw_execute_dft_c2r(plans_->inverse, spec_.get(), real_.get());
        const double scale = 1.0 / static_cast<double>(n_);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = real_[i] * scale;
    }

    /// out_t = sum_{s<=t} k_s x_{t-s}
    void causal_convolve(std::span<const double> k, std::span<const double> x, std::span<double> out) {
        forward(k, a_);
        forward(x, b_);
        inverse_product(a_, b_, false, out);
    }

    /// out_l = sum_j x_{j+l} y_j, for lags l >= 0.
    void correlate(std::span<const double> x, std::span<const double> y, std::span<double> out) {
        forward(x, a_);
        forward(y, b_);
        inverse_product(a_, b_, true, out);
    }

private:
    std::size_t length_;
    std::size_t n_;
    detail::FftwBuffer<double> real_;
    detail::FftwBuffer<fftw_complex> spec_;
    const detail::PlanPair* plans_;
    Spectrum a_, b_;
};

}  // namespace s4mil::fft
