#ifndef TWINCAL_RNG_HPP
#define TWINCAL_RNG_HPP

#include <cmath>
#include <cstddef>
#include <cstdint>

namespace twincal {

// Counter-based generator built on splitmix64 finalizers. Every draw is a pure
// function of its key, so trajectories simulated at theta and theta+delta with
// the same seed consume the identical noise sequence (common random numbers),
// and parallel workers need no shared state.

constexpr std::uint64_t mix64(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

constexpr std::uint64_t hash_combine(std::uint64_t a, std::uint64_t b) {
    return mix64(a ^ (mix64(b) + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2)));
}

constexpr std::uint64_t hash3(std::uint64_t a, std::uint64_t b, std::uint64_t c) {
    return hash_combine(hash_combine(a, b), c);
}

/// Uniform draw in [2^-53, 1], safe as a log() argument.
inline double uniform_from_key(std::uint64_t key) {
    const std::uint64_t bits = mix64(key) >> 11; // 53 bits
    return (static_cast<double>(bits) + 1.0) * 0x1.0p-53;
}

/// Standard normal draw keyed by (seed, step, channel) via Box-Muller.
inline double normal_from_key(std::uint64_t seed, std::uint64_t step, std::uint64_t channel) {
    const std::uint64_t key = hash3(seed, step, channel);
    const double u1 = uniform_from_key(hash_combine(key, 0x6a09e667f3bcc909ULL));
    const double u2 = uniform_from_key(hash_combine(key, 0xbb67ae8584caa73bULL));
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
}

/// FNV-1a over raw bytes, used for config and checkpoint fingerprints.
inline std::uint64_t fnv1a64(const void* data, std::size_t len, std::uint64_t h = 0xcbf29ce484222325ULL) {
    const unsigned char* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

/// Sequential stream over the same keyed generator, for draws that have a
/// natural order (weight init, shuffles, sample clouds).
struct SeedStream {
    std::uint64_t seed = 0;
    std::uint64_t counter = 0;

    explicit SeedStream(std::uint64_t s) : seed(s) {}

    double uniform() { return uniform_from_key(hash_combine(seed, counter++)); }

    /// Uniform in [lo, hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    double normal() {
        const std::uint64_t key = hash_combine(seed, counter++);
        const double u1 = uniform_from_key(hash_combine(key, 0x6a09e667f3bcc909ULL));
        const double u2 = uniform_from_key(hash_combine(key, 0xbb67ae8584caa73bULL));
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    }

    /// Integer in [0, n).
    std::uint64_t below(std::uint64_t n) {
        return static_cast<std::uint64_t>(uniform() * static_cast<double>(n)) % n;
    }
};

} // namespace twincal

#endif
