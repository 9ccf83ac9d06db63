#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <utility>

namespace morvit {

/// SplitMix64 used as a counter-based generator: output i is a fixed bijective
/// mix of seed + i * golden_gamma, so the full state is (seed, counter) and
/// streams reproduce bit-exactly on every platform.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0, std::uint64_t counter = 0)
        : seed_(seed), counter_(counter) {}

    std::uint64_t next_u64();
    /// Uniform in [0, 1) with 53 random bits.
    double uniform();
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    /// Unbiased integer in [0, n).
    std::uint64_t below(std::uint64_t n);
    /// Standard normal via Box-Muller (one draw per call, no cached spare).
    double normal();
    /// Normal(0, stddev) resampled until |x| <= 2 * stddev.
    double truncated_normal(double stddev);
    bool bernoulli(double p) { return uniform() < p; }

    template <typename T>
    void shuffle(std::span<T> items) {
        for (std::size_t i = items.size(); i > 1; --i) {
            const auto j = static_cast<std::size_t>(below(i));
            std::swap(items[i - 1], items[j]);
        }
    }

    /// Independent stream derived from this generator's seed.
    Rng fork(std::uint64_t stream) const;

    std::uint64_t seed() const { return seed_; }
    std::uint64_t counter() const { return counter_; }

    bool operator==(const Rng&) const = default;

private:
    std::uint64_t seed_;
    std::uint64_t counter_;
};

std::uint64_t splitmix64_mix(std::uint64_t z);

} // namespace morvit
