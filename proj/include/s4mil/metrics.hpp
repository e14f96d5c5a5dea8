#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "s4mil/error.hpp"

namespace s4mil {

struct ScoredPrediction {
    std::vector<double> scores;  // per-class probabilities
    int true_label = 0;
};

/// Index of the largest score; ties go to the lowest class index.
inline int argmax(std::span<const double> scores) {
    if (scores.empty()) throw ContractViolation("argmax of an empty score vector");
    std::size_t best = 0;
    for (std::size_t i = 1; i < scores.size(); ++i)
        if (scores[i] > scores[best]) best = i;
    return static_cast<int>(best);
}

inline double accuracy(std::span<const ScoredPrediction> predictions) {
    if (predictions.empty()) throw ContractViolation("accuracy of an empty prediction set");
    std::size_t correct = 0;
    for (const auto& p : predictions)
        if (argmax(p.scores) == p.true_label) ++correct;
    return static_cast<double>(correct) / static_cast<double>(predictions.size());
}

/// Mann-Whitney AUROC: (concordant + ties / 2) / (positives * negatives).
/// Counts are exact integers; the division happens once.
inline double auroc_binary(std::span<const double> scores, std::span<const int> labels) {
    if (scores.size() != labels.size())
        throw ContractViolation("auroc: " + std::to_string(scores.size()) + " scores for " +
                                std::to_string(labels.size()) + " labels");
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    std::uint64_t positives = 0, negatives = 0;
    for (int l : labels) (l != 0 ? positives : negatives) += 1;
    if (positives == 0 || negatives == 0)
        throw UndefinedMetric("auroc is undefined when only one class is present");
    // Twice the Mann-Whitney U so that ties stay integral.
    std::uint64_t twice_u = 0, negatives_below = 0;
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        std::uint64_t pos = 0, neg = 0;
        while (j < order.size() && scores[order[j]] == scores[order[i]]) {
            (labels[order[j]] != 0 ? pos : neg) += 1;
            ++j;
        }
        twice_u += 2 * pos * negatives_below + pos * neg;
        negatives_below += neg;
        i = j;
    }
    return static_cast<double>(twice_u) / static_cast<double>(2 * positives * negatives);
}

/// Macro-averaged one-versus-rest AUROC over the classes present in the labels.
inline double auroc_ovr(std::span<const ScoredPrediction> predictions, std::size_t num_classes) {
    std::set<int> present;
    for (const auto& p : predictions) {
        if (p.scores.size() != num_classes)
            throw ContractViolation("prediction has " + std::to_string(p.scores.size()) + " scores, expected " +
                                    std::to_string(num_classes));
        if (p.true_label < 0 || static_cast<std::size_t>(p.true_label) >= num_classes)
            throw ContractViolation("label " + std::to_string(p.true_label) + " out of range");
        present.insert(p.true_label);
    }
    if (present.size() < 2) throw UndefinedMetric("one-vs-rest auroc needs at least two classes present");
    double sum = 0.0;
    std::vector<double> scores(predictions.size());
    std::vector<int> labels(predictions.size());
    for (int c : present) {
        for (std::size_t i = 0; i < predictions.size(); ++i) {
            scores[i] = predictions[i].scores[static_cast<std::size_t>(c)];
            labels[i] = predictions[i].true_label == c ? 1 : 0;
        }
        sum += auroc_binary(scores, labels);
    }
    return sum / static_cast<double>(present.size());
}

}  // namespace s4mil
