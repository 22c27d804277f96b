#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

#include "p2rec/common.hpp"

namespace p2rec {

// Deterministic RNG with all distributions implemented here, so that streams
// do not depend on standard-library internals. splitmix64 core.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {}

    // Derive an independent stream seed for a named stage/component.
    static uint64_t derive_seed(uint64_t root_seed, std::string_view label) {
        uint64_t h = fnv1a64(label);
        return fnv1a64(&root_seed, sizeof(root_seed), h);
    }

    static Rng derive(uint64_t root_seed, std::string_view label) {
        return Rng(derive_seed(root_seed, label));
    }

    uint64_t next_u64() {
        uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n). Rejection-free modulo is fine at our scales.
    uint64_t uniform_index(uint64_t n) { return next_u64() % n; }

    int uniform_int(int lo, int hi_inclusive) {
        return lo + static_cast<int>(uniform_index(static_cast<uint64_t>(hi_inclusive - lo + 1)));
    }

    // Standard normal via Box-Muller. One value per call, cached pair.
    double normal() {
        if (have_cached_) {
            have_cached_ = false;
            return cached_;
        }
        double u1 = uniform(), u2 = uniform();
        while (u1 <= 1e-300) u1 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 2.0 * M_PI * u2;
        cached_ = r * std::sin(a);
        have_cached_ = true;
        return r * std::cos(a);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // Sample an index from an unnormalized non-negative weight vector.
    template <typename Vec>
    size_t categorical(const Vec& weights) {
        double total = 0.0;
        for (double w : weights) total += w;
        double x = uniform() * total;
        double acc = 0.0;
        for (size_t i = 0; i + 1 < weights.size(); ++i) {
            acc += weights[i];
            if (x < acc) return i;
        }
        return weights.size() - 1;
    }

    template <typename Vec>
    void shuffle(Vec& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = uniform_index(i);
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    uint64_t state_;
    bool have_cached_ = false;
    double cached_ = 0.0;
};

}  // namespace p2rec
