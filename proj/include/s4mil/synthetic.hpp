#pragma once

// Synthetic MIL bags. Needle: a bag is positive iff it contains signal
// tokens. Majority: a bag is positive iff most of its tokens are signal.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "s4mil/data_io.hpp"
#include "s4mil/error.hpp"
#include "s4mil/rng.hpp"

namespace s4mil {

enum class SyntheticTask { needle, majority };

inline const char* to_string(SyntheticTask t) { return t == SyntheticTask::needle ? "needle" : "majority"; }

struct SyntheticTaskSpec {
    SyntheticTask task = SyntheticTask::needle;
    std::size_t num_bags = 200;
    std::size_t min_length = 128;
    std::size_t max_length = 512;
    std::size_t feature_dim = 16;
    double signal_rate = 0.02;
    double noise_sigma = 1.0;
    double signal_shift = 1.0;  // added to every feature of a signal token

    void validate() const {
        if (num_bags == 0) throw ConfigError("synthetic num_bags must be positive");
        if (min_length < 1 || max_length < min_length) throw ConfigError("synthetic length range must satisfy 1 <= min <= max");
        if (feature_dim == 0) throw ConfigError("synthetic feature_dim must be positive");
        if (!(signal_rate > 0.0 && signal_rate <= 1.0)) throw ConfigError("signal_rate must lie in (0, 1]");
        if (task == SyntheticTask::majority && !(signal_rate > 0.5))
            throw ConfigError("majority task needs signal_rate > 0.5");
        if (!(noise_sigma >= 0.0)) throw ConfigError("noise_sigma must be non-negative");
    }
};

/// Labels alternate 0, 1, 0, ... so every dataset is balanced. Positive
/// needle bags carry ceil(signal_rate * L) signal tokens at random positions;
/// patch labels mark them. Coordinates lay tokens out row-major on a
/// ceil(sqrt(L))-wide grid.
inline std::vector<Bag> generate_synthetic(const SyntheticTaskSpec& spec, std::uint64_t seed) {
    spec.validate();
    Rng rng = substream(seed, "synth");
    std::uniform_int_distribution<std::size_t> length_dist(spec.min_length, spec.max_length);
    std::normal_distribution<double> noise(0.0, 1.0);
    std::vector<Bag> bags;
    bags.reserve(spec.num_bags);
    const std::size_t digits = std::to_string(spec.num_bags).size();
    for (std::size_t i = 0; i < spec.num_bags; ++i) {
        Bag b;
        std::string num = std::to_string(i);
        b.id = "bag_" + std::string(digits > num.size() ? digits - num.size() : 0, '0') + num;
        b.slide_label = static_cast<int>(i % 2);
        const std::size_t L = length_dist(rng);
        std::size_t signal = 0;
        const auto positive_count = static_cast<std::size_t>(std::ceil(spec.signal_rate * static_cast<double>(L)));
        if (spec.task == SyntheticTask::needle) {
            signal = b.slide_label == 1 ? std::min(positive_count, L) : 0;
        } else {
            signal = b.slide_label == 1
                         ? std::min(positive_count, L)
                         : static_cast<std::size_t>(std::floor((1.0 - spec.signal_rate) * static_cast<double>(L)));
        }
        std::vector<std::size_t> positions(L);
        std::iota(positions.begin(), positions.end(), 0);
        std::shuffle(positions.begin(), positions.end(), rng);
        std::vector<int> labels(L, 0);
        for (std::size_t s = 0; s < signal; ++s) labels[positions[s]] = 1;

        b.features.resize(static_cast<Eigen::Index>(L), static_cast<Eigen::Index>(spec.feature_dim));
        for (std::size_t t = 0; t < L; ++t)
            for (std::size_t d = 0; d < spec.feature_dim; ++d) {
                double v = spec.noise_sigma * noise(rng);
                if (labels[t] == 1) v += spec.signal_shift;
                b.features(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(d)) = static_cast<float>(v);
            }
        const auto width = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(L))));
        std::vector<Coord> coords(L);
        for (std::size_t t = 0; t < L; ++t) coords[t] = {static_cast<int>(t / width), static_cast<int>(t % width)};
        b.patch_labels = std::move(labels);
        b.coords = std::move(coords);
        bags.push_back(std::move(b));
    }
    return bags;
}

}  // namespace s4mil
