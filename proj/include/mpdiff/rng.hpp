#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace mpdiff {

/// Counter-based generator: the i-th draw is a pure function of (key, i), so a
/// stream can be replayed or split without sharing hidden state.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0, std::uint64_t stream = 0)
        : seed_(seed), stream_(stream), key_(mix(mix(seed) ^ mix(stream + 0x632be59bd9b4e019ULL))) {}

    std::uint64_t seed() const noexcept { return seed_; }
    std::uint64_t stream() const noexcept { return stream_; }
    std::uint64_t counter() const noexcept { return counter_; }

    std::uint64_t next_u64() noexcept {
        ++counter_;
        return mix(key_ + counter_ * 0x9e3779b97f4a7c15ULL);
    }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    /// Standard normal via Box-Muller; always consumes exactly two draws.
    double normal() noexcept {
        const double u1 = (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    std::uint64_t below(std::uint64_t n) noexcept { return n == 0 ? 0 : next_u64() % n; }

    /// Independent child stream, derived only from this generator's identity.
    Rng split(std::uint64_t stream) const noexcept { return Rng(key_, stream); }

private:
    static constexpr std::uint64_t mix(std::uint64_t z) noexcept {
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    std::uint64_t seed_;
    std::uint64_t stream_;
    std::uint64_t key_;
    std::uint64_t counter_ = 0;
};

}  // namespace mpdiff
