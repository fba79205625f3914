// Deterministic RNG used for weight seeding and corpus synthesis.
// All transforms are written out explicitly (no std::*_distribution) so the
// same seed yields the same stream on every platform and stdlib.
#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include "owl/numerics.hpp"

namespace owl {

class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    uint64_t next_u64() { return gen_(); }

    // [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    // Standard normal via Box-Muller, one cached spare.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log1p(-u1));
        double t = 2.0 * M_PI * u2;
        spare_ = r * std::sin(t);
        have_spare_ = true;
        return r * std::cos(t);
    }

    float normal_f(double stddev) { return static_cast<float>(normal() * stddev); }

    // Uniform integer in [0, n). Modulo bias is irrelevant at these ranges.
    int below(int n) { return static_cast<int>(gen_() % static_cast<uint64_t>(n)); }

private:
    std::mt19937_64 gen_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

namespace detail {
inline Mat random_mat(Rng& rng, int rows, int cols, double stddev) {
    Mat m(rows, cols);
    for (float& v : m.data) v = rng.normal_f(stddev);
    return m;
}
} // namespace detail

} // namespace owl
