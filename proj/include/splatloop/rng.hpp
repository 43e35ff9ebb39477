#pragma once

#include <cmath>
#include <cstdint>
#include <string>

#include "splatloop/tensor.hpp"

namespace splatloop {

// Self-contained counter-free PRNG (splitmix64 core) so results do not
// depend on the standard library's distribution internals. Every stage of
// the project derives a named child seed from one root seed.
struct Rng {
    uint64_t state = 0x9e3779b97f4a7c15ull;

    explicit Rng(uint64_t seed = 0) { state = seed + 0x9e3779b97f4a7c15ull; }

    uint64_t next_u64() {
        uint64_t z = (state += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Box-Muller; the second draw is cached.
    double normal() {
        if (has_cached_) {
            has_cached_ = false;
            return cached_;
        }
        double u1 = uniform(), u2 = uniform();
        u1 = std::max(u1, 1e-300);
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.283185307179586476925286766559 * u2;
        cached_ = r * std::sin(a);
        has_cached_ = true;
        return r * std::cos(a);
    }

    // Integer in [0, n).
    uint64_t randint(uint64_t n) { return n ? next_u64() % n : 0; }

    void fill_normal(Tensor& t, double sigma = 1.0, double mean = 0.0) {
        for (auto& x : t.v) x = static_cast<float>(mean + sigma * normal());
    }

    void fill_uniform(Tensor& t, double lo, double hi) {
        for (auto& x : t.v) x = static_cast<float>(uniform(lo, hi));
    }

  private:
    double cached_ = 0.0;
    bool has_cached_ = false;
};

inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline uint64_t fnv1a64(const std::string& s) { return fnv1a64(s.data(), s.size()); }

// Named child seed: child("scene", 17) of one root seed is stable across
// runs and independent of call order.
inline uint64_t child_seed(uint64_t root, const std::string& tag, uint64_t index = 0) {
    uint64_t h = fnv1a64(tag);
    h = fnv1a64(&index, sizeof(index), h);
    h = fnv1a64(&root, sizeof(root), h);
    return h;
}

}  // namespace splatloop
