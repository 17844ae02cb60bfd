#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>
#include <utility>
#include <vector>

namespace fuseclin {

/// 64-bit FNV-1a hash; used to derive per-entity seeds from string keys.
constexpr std::uint64_t fnv1a64(std::string_view s) noexcept {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

constexpr std::uint64_t splitmix64_mix(std::uint64_t z) noexcept {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

/// Counter-based SplitMix64 generator.
///
/// The i-th output is splitmix64_mix(key + i * 0x9e3779b97f4a7c15), so a stream is
/// fully determined by (key, counter) and is identical on every platform. All
/// derived distributions below are implemented here rather than through
/// <random> distributions, whose algorithms are implementation-defined.
class Rng {
public:
    static constexpr std::uint64_t kGamma = 0x9e3779b97f4a7c15ULL;

    explicit constexpr Rng(std::uint64_t seed = 2020) noexcept : key_(seed) {}

    constexpr std::uint64_t next_u64() noexcept {
        ++counter_;
        return splitmix64_mix(key_ + counter_ * kGamma);
    }

    /// Uniform double in [0, 1) with 53 random bits.
    double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in the closed range [lo, hi], unbiased (rejection sampling).
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) noexcept {
        const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1ULL;
        if (span == 0) return static_cast<std::int64_t>(next_u64());
        const std::uint64_t limit = (~std::uint64_t{0}) - ((~std::uint64_t{0}) % span);
        std::uint64_t r = next_u64();
        while (r >= limit) r = next_u64();
        return lo + static_cast<std::int64_t>(r % span);
    }

    std::size_t index(std::size_t n) noexcept {
        return static_cast<std::size_t>(uniform_int(0, static_cast<std::int64_t>(n) - 1));
    }

    bool bernoulli(double p) noexcept { return uniform() < p; }

    /// Standard normal via Box-Muller (no cached second variate).
    double normal() noexcept {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    double normal(double mean, double sd) noexcept { return mean + sd * normal(); }

    template <class T>
    void shuffle(std::vector<T>& v) noexcept {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = index(i);
            std::swap(v[i - 1], v[j]);
        }
    }

    /// Independent child stream keyed by `tag`.
    [[nodiscard]] Rng derive(std::uint64_t tag) const noexcept {
        return Rng(splitmix64_mix(key_ ^ splitmix64_mix(tag + kGamma)));
    }
    [[nodiscard]] Rng derive(std::string_view tag) const noexcept { return derive(fnv1a64(tag)); }

    [[nodiscard]] constexpr std::uint64_t key() const noexcept { return key_; }
    [[nodiscard]] constexpr std::uint64_t counter() const noexcept { return counter_; }

    friend constexpr bool operator==(const Rng&, const Rng&) = default;

private:
    std::uint64_t key_;
    std::uint64_t counter_ = 0;
};

/// Seed for a patient-keyed stream: global_seed xor FNV-1a(patient id).
constexpr std::uint64_t patient_seed(std::uint64_t global_seed, std::string_view patient_id) noexcept {
    return global_seed ^ fnv1a64(patient_id);
}

}  // namespace fuseclin
