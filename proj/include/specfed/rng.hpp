#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <string_view>

namespace specfed {

// Deterministic stream derivation. Every source of randomness in the
// simulator is keyed by (experiment seed, purpose tag, counters...), so a
// stream's output never depends on scheduling or on how many other streams
// were consumed before it. This is what makes runs reproducible for any
// worker count and makes checkpoint resume exact.

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t hash_tag(std::string_view tag) {
    // FNV-1a
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : tag) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::uint64_t mix_seed(std::uint64_t seed, std::string_view tag,
                              std::initializer_list<std::uint64_t> counters = {}) {
    std::uint64_t s = splitmix64(seed ^ hash_tag(tag));
    for (std::uint64_t c : counters) s = splitmix64(s ^ c);
    return s;
}

inline std::mt19937_64 make_stream(std::uint64_t seed, std::string_view tag,
                                   std::initializer_list<std::uint64_t> counters = {}) {
    return std::mt19937_64(mix_seed(seed, tag, counters));
}

inline double uniform01(std::mt19937_64& g) {
    return std::uniform_real_distribution<double>(0.0, 1.0)(g);
}

inline double uniform(std::mt19937_64& g, double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(g);
}

inline double gaussian(std::mt19937_64& g, double mean = 0.0, double stddev = 1.0) {
    return std::normal_distribution<double>(mean, stddev)(g);
}

}  // namespace specfed
