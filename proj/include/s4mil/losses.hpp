#pragma once

// Slide-level log loss and the slide + patch multitask log loss, evaluated on
// probabilities. Probabilities below 1e-12 are clamped and counted.

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "s4mil/error.hpp"

namespace s4mil {

inline constexpr double loss_probability_floor = 1e-12;

struct LossValue {
    double value = 0.0;
    std::size_t floor_events = 0;
};

/// Rows of per-class probabilities, one row per token.
using ProbabilityRows = std::vector<std::vector<double>>;

namespace detail {

inline double checked_log_prob(std::span<const double> probs, int label, std::size_t& floor_events) {
    if (label < 0 || static_cast<std::size_t>(label) >= probs.size())
        throw ContractViolation("label " + std::to_string(label) + " out of range for " +
                                std::to_string(probs.size()) + " classes");
    double sum = 0.0;
    for (double p : probs) {
        if (!(p >= 0.0 && p <= 1.0 + 1e-6)) throw ContractViolation("probability outside [0, 1]: " + std::to_string(p));
        sum += p;
    }
    if (std::fabs(sum - 1.0) > 1e-6)
        throw ContractViolation("probabilities sum to " + std::to_string(sum) + ", not 1");
    double p = probs[static_cast<std::size_t>(label)];
    if (p < loss_probability_floor) {
        p = loss_probability_floor;
        ++floor_events;
    }
    return std::log(p);
}

}  // namespace detail

/// -(1/M) sum_m log p_m[c_m]
inline LossValue mil_loss(std::span<const std::vector<double>> slide_probs, std::span<const int> slide_labels) {
    if (slide_probs.size() != slide_labels.size() || slide_probs.empty())
        throw ContractViolation("mil_loss needs one label per prediction and at least one prediction");
    LossValue out;
    double total = 0.0;
    for (std::size_t m = 0; m < slide_probs.size(); ++m)
        total += detail::checked_log_prob(slide_probs[m], slide_labels[m], out.floor_events);
    out.value = -total / static_cast<double>(slide_probs.size());
    return out;
}

/// -(1/M) sum_m [log p_m[c_m] + (lambda / L_m) sum_l log q_{m,l}[c_{m,l}]]
/// With lambda = 0 the patch term is skipped and the result is bitwise equal to mil_loss.
inline LossValue multitask_loss(std::span<const std::vector<double>> slide_probs, std::span<const int> slide_labels,
                                std::span<const ProbabilityRows> patch_probs,
                                std::span<const std::vector<int>> patch_labels, double lambda) {
    if (slide_probs.size() != slide_labels.size() || slide_probs.empty())
        throw ContractViolation("multitask_loss needs one label per prediction and at least one prediction");
    if (!(lambda >= 0.0)) throw ContractViolation("lambda must be non-negative");
    if (lambda != 0.0 && (patch_probs.size() != slide_probs.size() || patch_labels.size() != slide_probs.size()))
        throw ContractViolation("multitask_loss needs patch predictions and labels for every bag");
    LossValue out;
    double total = 0.0;
    for (std::size_t m = 0; m < slide_probs.size(); ++m) {
        double term = detail::checked_log_prob(slide_probs[m], slide_labels[m], out.floor_events);
        if (lambda != 0.0) {
            const auto& rows = patch_probs[m];
            const auto& labels = patch_labels[m];
            if (rows.size() != labels.size() || rows.empty())
                throw ContractViolation("bag " + std::to_string(m) + " has " + std::to_string(rows.size()) +
                                        " patch predictions for " + std::to_string(labels.size()) + " labels");
            double patch = 0.0;
            for (std::size_t l = 0; l < rows.size(); ++l)
                patch += detail::checked_log_prob(rows[l], labels[l], out.floor_events);
            term += lambda / static_cast<double>(rows.size()) * patch;
        }
        total += term;
    }
    out.value = -total / static_cast<double>(slide_probs.size());
    return out;
}

}  // namespace s4mil
