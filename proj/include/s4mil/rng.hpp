#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace s4mil {

using Rng = std::mt19937_64;

/// Derives an independent generator for one purpose ("init", "shuffle",
/// "synth", ...) from the run seed. Adding a new purpose never shifts the
/// draws of an existing one.
inline Rng substream(std::uint64_t seed, std::string_view label) {
    std::uint64_t h = 1469598103934665603ull;  // FNV-1a
    for (unsigned char ch : label) {
        h ^= ch;
        h *= 1099511628211ull;
    }
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(h), static_cast<std::uint32_t>(h >> 32)};
    return Rng(seq);
}

}  // namespace s4mil
