#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <utility>
#include <vector>

#include "ape/common.hpp"

namespace ape {

/// Deterministic RNG. Wraps mt19937_64 and implements the distributions
/// explicitly so that streams are reproducible independent of the standard
/// library's distribution internals.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    std::uint64_t next_u64() { return gen_(); }

    /// Uniform double in [0, 1).
    double uniform() { return double(gen_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n).
    std::int64_t uniform_int(std::int64_t n) {
        // modulo rejection to avoid bias
        const std::uint64_t un = std::uint64_t(n);
        const std::uint64_t limit = std::uint64_t(-1) - std::uint64_t(-1) % un;
        std::uint64_t x;
        do {
            x = gen_();
        } while (x >= limit);
        return std::int64_t(x % un);
    }

    bool bernoulli(double p) { return uniform() < p; }

    /// Fisher-Yates. std::shuffle leaves the draw sequence up to the standard
    /// library, which would tie results to the toolchain.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i)
            std::swap(v[i - 1], v[std::size_t(uniform_int(std::int64_t(i)))]);
    }

    /// Standard normal via Box-Muller; caches the second variate.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

    double normal(double mean, double std) { return mean + std * normal(); }

    dvec3 uniform_vec3(const dvec3& lo, const dvec3& hi) {
        // fixed evaluation order; braced init would also work but keep it explicit
        dvec3 v;
        v[0] = uniform(lo[0], hi[0]);
        v[1] = uniform(lo[1], hi[1]);
        v[2] = uniform(lo[2], hi[2]);
        return v;
    }

    /// Derives an independent child stream. splitmix64 over (seed, salt).
    static std::uint64_t mix(std::uint64_t seed, std::uint64_t salt) {
        std::uint64_t z = seed + 0x9e3779b97f4a7c15ull * (salt + 1);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

private:
    std::mt19937_64 gen_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

} // namespace ape
