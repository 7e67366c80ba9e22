#pragma once

#include <cmath>
#include <cstdint>

#include "dba/tensor.hpp"

namespace dba {

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t& state) {
    state += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

}  // namespace detail

/// Seed-deterministic generator: identical seed, identical stream.
/// Single-owner; not meant to be shared across threads.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() { return detail::splitmix64(state_); }

    /// Uniform in [0, 1).
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    /// Uniform integer in [0, n).
    std::size_t uniform_index(std::size_t n) {
        return static_cast<std::size_t>(uniform() * static_cast<double>(n));
    }

    /// Standard normal via Box-Muller; pairs are cached for determinism.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    /// Derive an independent child generator; (seed, index) -> child is a
    /// fixed function, so fan-out order cannot change sampled streams.
    Rng split(std::uint64_t index) const {
        std::uint64_t s = state_ ^ (0x9e3779b97f4a7c15ULL * (index + 1));
        detail::splitmix64(s);
        return Rng(s);
    }

private:
    std::uint64_t state_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

/// rows x cols tensor of i.i.d. N(0, variance) entries.
inline Tensor gaussian(Rng& rng, std::size_t rows, std::size_t cols, double variance) {
    if (!(variance > 0.0)) throw ParameterError("gaussian: variance must be > 0");
    const double sd = std::sqrt(variance);
    Tensor t(rows, cols);
    for (double& v : t.flat()) v = sd * rng.normal();
    return t;
}

/// rows x cols tensor of i.i.d. uniform entries in [lo, hi).
inline Tensor uniform_tensor(Rng& rng, std::size_t rows, std::size_t cols, double lo, double hi) {
    if (!(hi > lo)) throw ParameterError("uniform_tensor: empty range");
    Tensor t(rows, cols);
    for (double& v : t.flat()) v = lo + (hi - lo) * rng.uniform();
    return t;
}

/// Random permutation of {0..n-1} (Fisher-Yates).
inline std::vector<std::size_t> random_permutation(Rng& rng, std::size_t n) {
    std::vector<std::size_t> p(n);
    for (std::size_t i = 0; i < n; ++i) p[i] = i;
    for (std::size_t i = n; i > 1; --i) {
        std::size_t j = rng.uniform_index(i);
        std::swap(p[i - 1], p[j]);
    }
    return p;
}

}  // namespace dba
