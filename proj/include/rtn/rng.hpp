#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace rtn {

// splitmix64; used both as a seed-derivation mixer and as the generator core.
inline std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// Fixed splitting rule: child streams never collide with the parent stream.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b = 0) {
    std::uint64_t s = base;
    std::uint64_t h = splitmix64(s);
    s ^= a * 0xff51afd7ed558ccdULL;
    h ^= splitmix64(s);
    s ^= b * 0xc4ceb9fe1a85ec53ULL;
    h ^= splitmix64(s);
    return h;
}

inline std::uint64_t hash_string(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a 64
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

// Deterministic stream of uniforms / normals / bounded ints. All experiment
// randomness flows through this type so runs replay exactly from one seed.
class Rng {
  public:
    explicit Rng(std::uint64_t seed) : state_(seed ^ 0x5851f42d4c957f2dULL) {
        // burn-in so adjacent seeds decorrelate immediately
        splitmix64(state_);
        splitmix64(state_);
    }

    std::uint64_t next_u64() { return splitmix64(state_); }

    // uniform in [0, 1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // uniform integer in [0, n), n >= 1; rejection sampling keeps it unbiased
    std::uint64_t uniform_int(std::uint64_t n) {
        if (n <= 1) return 0;
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t x = next_u64();
        while (x >= limit) x = next_u64();
        return x % n;
    }

    // standard normal via Box-Muller (no spare cached: two draws per call)
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    Rng split(std::uint64_t tag) { return Rng(derive_seed(next_u64(), tag)); }

  private:
    std::uint64_t state_;
};

}  // namespace rtn
