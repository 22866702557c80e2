#pragma once
// Deterministic random streams. SplitMix64 core with hash-based stream
// splitting so every consumer derives its own independent generator from
// (seed, step, sample, purpose) without sharing mutable state.

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

namespace pointcsp {

namespace detail {
inline uint64_t mix64(uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}
}  // namespace detail

class Rng {
public:
    explicit Rng(uint64_t seed = 0) : state_(detail::mix64(seed ^ 0xa076'1d64'78bd'642fULL)) {}

    // Child stream derived from this stream's origin and a key. Does not
    // advance the parent, so split order is irrelevant.
    Rng split(uint64_t key) const {
        Rng child(0);
        child.state_ = detail::mix64(state_ ^ detail::mix64(key ^ 0x2545'f491'4f6c'dd1dULL));
        return child;
    }

    uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ULL;
        uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // uniform in [0, 1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [0, n)
    int uniform_int(int n) {
        if (n <= 0) throw std::invalid_argument("Rng::uniform_int: n must be positive");
        // rejection sampling keeps the distribution exact
        const uint64_t un = static_cast<uint64_t>(n);
        const uint64_t limit = UINT64_MAX - UINT64_MAX % un;
        uint64_t v = next_u64();
        while (v >= limit) v = next_u64();
        return static_cast<int>(v % un);
    }

    // standard normal via Box-Muller (no cached spare: keeps streams stateless
    // apart from the counter)
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
    }

    // Fisher-Yates permutation of [0, n)
    std::vector<int> permutation(int n) {
        std::vector<int> p(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) p[static_cast<size_t>(i)] = i;
        for (int i = n - 1; i > 0; --i) {
            const int j = uniform_int(i + 1);
            std::swap(p[static_cast<size_t>(i)], p[static_cast<size_t>(j)]);
        }
        return p;
    }

    // k distinct indices drawn from [0, n), in draw order
    std::vector<int> sample_without_replacement(int n, int k) {
        if (k > n) throw std::invalid_argument("Rng::sample_without_replacement: k > n");
        // partial Fisher-Yates
        std::vector<int> pool(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) pool[static_cast<size_t>(i)] = i;
        std::vector<int> out(static_cast<size_t>(k));
        for (int i = 0; i < k; ++i) {
            const int j = i + uniform_int(n - i);
            std::swap(pool[static_cast<size_t>(i)], pool[static_cast<size_t>(j)]);
            out[static_cast<size_t>(i)] = pool[static_cast<size_t>(i)];
        }
        return out;
    }

private:
    uint64_t state_;
};

// Purpose keys for hierarchical stream derivation.
namespace rng_purpose {
constexpr uint64_t augment = 1;
constexpr uint64_t shuffle_student = 2;
constexpr uint64_t shuffle_teacher = 3;
constexpr uint64_t geo_sampling = 4;
constexpr uint64_t batch_select = 5;
constexpr uint64_t init = 6;
constexpr uint64_t corpus = 7;
constexpr uint64_t split = 8;
constexpr uint64_t probe = 9;
}  // namespace rng_purpose

}  // namespace pointcsp
