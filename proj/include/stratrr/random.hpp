#pragma once

// Reproducible random streams.
//
// A stream is keyed by (seed, stream, substream). Keys are hashed through
// SplitMix64 into the state of a xoshiro256** generator, so each
// (replication, attempt-family) pair owns an independent generator whose
// output does not depend on thread scheduling. Variate generation is done
// here rather than through <random> distributions because the latter are
// implementation-defined and would break cross-platform reproducibility.

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <limits>

namespace stratrr {

inline constexpr std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

struct StreamKey {
    std::uint64_t seed = 0;
    std::uint64_t stream = 0;
    std::uint64_t substream = 0;

    friend bool operator==(const StreamKey&, const StreamKey&) = default;
};

class Rng {
   public:
    using result_type = std::uint64_t;

    explicit Rng(std::uint64_t seed, std::uint64_t stream = 0, std::uint64_t substream = 0)
        : Rng(StreamKey{seed, stream, substream}) {}

    explicit Rng(StreamKey key) : key_(key) {
        std::uint64_t h = key.seed;
        // Fold the stream coordinates into the SplitMix state one at a time.
        h = splitmix64(h) ^ key.stream;
        h = splitmix64(h) ^ key.substream;
        for (auto& s : s_) s = splitmix64(h);
    }

    static constexpr result_type min() { return 0; }
    static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

    result_type operator()() {
        ++draws_;
        const std::uint64_t result = std::rotl(s_[1] * 5, 7) * 9;
        const std::uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = std::rotl(s_[3], 45);
        return result;
    }

    /// Uniform on [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }

    /// Uniform on (0, 1).
    double uniform_open() {
        double u;
        do u = uniform();
        while (u == 0.0);
        return u;
    }

    /// Unbiased integer in [0, bound) (Lemire's multiply-shift with rejection).
    std::uint64_t below(std::uint64_t bound) {
        __uint128_t m = static_cast<__uint128_t>((*this)()) * bound;
        auto low = static_cast<std::uint64_t>(m);
        if (low < bound) {
            const std::uint64_t threshold = (0 - bound) % bound;
            while (low < threshold) {
                m = static_cast<__uint128_t>((*this)()) * bound;
                low = static_cast<std::uint64_t>(m);
            }
        }
        return static_cast<std::uint64_t>(m >> 64);
    }

    /// Standard normal (Marsaglia polar method).
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u, v, s;
        do {
            u = 2.0 * uniform() - 1.0;
            v = 2.0 * uniform() - 1.0;
            s = u * u + v * v;
        } while (s >= 1.0 || s == 0.0);
        const double f = std::sqrt(-2.0 * std::log(s) / s);
        spare_ = v * f;
        has_spare_ = true;
        return u * f;
    }

    /// Chi-square with integer degrees of freedom as a sum of squared normals.
    double chi_square(int df) {
        double s = 0.0;
        for (int i = 0; i < df; ++i) {
            const double z = normal();
            s += z * z;
        }
        return s;
    }

    /// Student t as N(0,1) / sqrt(chi2_df / df).
    double student_t(int df) {
        const double z = normal();
        return z / std::sqrt(chi_square(df) / df);
    }

    const StreamKey& key() const noexcept { return key_; }
    std::uint64_t draws() const noexcept { return draws_; }

   private:
    StreamKey key_;
    std::array<std::uint64_t, 4> s_{};
    std::uint64_t draws_ = 0;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

}  // namespace stratrr
