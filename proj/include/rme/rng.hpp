#pragma once

#include <cstdint>
#include <random>

namespace rme {

/// Seeded random stream with platform-independent output.
///
/// std::mt19937_64 has a fully specified bit sequence; doubles are derived
/// from the raw bits directly so that generated markets and sampled points
/// byte-reproduce across standard libraries.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    std::uint64_t bits() { return gen_(); }

    /// Uniform on [0, 1).
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Standard normal via Box-Muller on the uniform stream.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double rad = std::sqrt(-2.0 * std::log(u1));
        const double ang = 6.283185307179586476925286766559 * u2;
        spare_ = rad * std::sin(ang);
        have_spare_ = true;
        return rad * std::cos(ang);
    }

    /// Uniform integer in [0, n).
    int below(int n) {
        int k = static_cast<int>(uniform() * n);
        return k >= n ? n - 1 : k;
    }

private:
    std::mt19937_64 gen_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

}  // namespace rme
