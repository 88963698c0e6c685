#pragma once

#include <cstdint>
#include <cmath>
#include <initializer_list>
#include <string_view>

namespace sdlb {

// Counter-free splittable RNG built on SplitMix64. State is a single u64 so
// it can be checkpointed and restored exactly. normal() never caches a spare,
// keeping the state self-contained.
class Rng {
public:
    Rng() = default;
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        state_ += 0x9E3779B97F4A7C15ULL;
        std::uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1).
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) {
        return lo + (hi - lo) * uniform();
    }

    // Integer in [0, n).
    std::uint64_t below(std::uint64_t n) {
        return next_u64() % n;
    }

    // Standard normal via Box-Muller, cosine branch only.
    double normal() {
        const double u1 = 1.0 - uniform();  // (0, 1]
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        return r * std::cos(6.283185307179586476925286766559 * u2);
    }

    double normal(double mean, double stddev) {
        return mean + stddev * normal();
    }

    bool bernoulli(double p) {
        return uniform() < p;
    }

    // Child stream independent of the parent's future draws.
    Rng fork(std::uint64_t salt) const {
        return Rng(mix(state_, salt));
    }

    std::uint64_t state() const { return state_; }
    void set_state(std::uint64_t s) { state_ = s; }

    static std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
        std::uint64_t z = a + 0x9E3779B97F4A7C15ULL * (b + 1);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

private:
    std::uint64_t state_ = 0x853C49E6748FEA9BULL;
};

inline std::uint64_t hash_label(std::string_view label) {
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (char c : label) {
        h ^= static_cast<std::uint8_t>(c);
        h *= 0x100000001B3ULL;
    }
    return h;
}

// Deterministic stream derivation: seed -> labeled sub-stream.
inline Rng derive_rng(std::uint64_t seed, std::string_view label) {
    return Rng(Rng::mix(seed, hash_label(label)));
}

inline Rng derive_rng(std::uint64_t seed, std::string_view label, std::uint64_t index) {
    return Rng(Rng::mix(Rng::mix(seed, hash_label(label)), index));
}

}  // namespace sdlb
