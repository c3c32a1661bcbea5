#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace rpm {

// splitmix64; used for seeding and stream derivation.
inline std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline std::uint64_t hash_string(std::string_view s) {
    // FNV-1a 64-bit.
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

// xoshiro256++ with explicit stream derivation and serializable state.
// All sampling in the project goes through this type: the C++ standard
// library distributions are implementation-defined, which would break the
// byte-identical reproducibility contracts.
class Rng {
public:
    Rng() : Rng(0) {}
    explicit Rng(std::uint64_t seed) {
        std::uint64_t sm = seed;
        for (auto& w : state_) w = splitmix64(sm);
        has_cached_gauss_ = false;
        cached_gauss_ = 0.0;
    }

    // Derives an independent stream from (seed, tag words). Identical inputs
    // give identical streams; this is how per-panel / per-split / per-purpose
    // streams are constructed.
    static Rng derive(std::uint64_t seed, std::initializer_list<std::uint64_t> tags) {
        std::uint64_t sm = seed ^ 0xd1b54a32d192ed03ULL;
        std::uint64_t mix = splitmix64(sm);
        for (std::uint64_t t : tags) {
            sm ^= t + 0x9e3779b97f4a7c15ULL + (mix << 6) + (mix >> 2);
            mix = splitmix64(sm);
        }
        return Rng(mix);
    }
    static Rng derive(std::uint64_t seed, std::string_view tag) {
        return derive(seed, {hash_string(tag)});
    }
    static Rng derive(std::uint64_t seed, std::string_view tag, std::uint64_t index) {
        return derive(seed, {hash_string(tag), index});
    }

    std::uint64_t next_u64() {
        auto rotl = [](std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); };
        const std::uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
        const std::uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    // Uniform in [0, 1) with 53-bit resolution.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n).
    std::uint64_t uniform_index(std::uint64_t n) {
        // Rejection to remove modulo bias; deterministic given the stream.
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t x;
        do {
            x = next_u64();
        } while (x >= limit);
        return x % n;
    }

    // Standard normal via Box-Muller; the second value is cached so draws
    // consume a predictable amount of stream state.
    double gauss() {
        if (has_cached_gauss_) {
            has_cached_gauss_ = false;
            return cached_gauss_;
        }
        double u1 = uniform();
        // Guard against log(0).
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.283185307179586476925286766559 * u2;
        cached_gauss_ = r * std::sin(a);
        has_cached_gauss_ = true;
        return r * std::cos(a);
    }

    void fill_gauss(double* out, std::size_t n) {
        for (std::size_t i = 0; i < n; ++i) out[i] = gauss();
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(uniform_index(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    // State serialization for exact training resume.
    std::array<std::uint64_t, 6> save_state() const {
        return {state_[0], state_[1], state_[2], state_[3],
                static_cast<std::uint64_t>(has_cached_gauss_),
                bit_cast_u64(cached_gauss_)};
    }
    void load_state(const std::array<std::uint64_t, 6>& s) {
        state_ = {s[0], s[1], s[2], s[3]};
        has_cached_gauss_ = s[4] != 0;
        cached_gauss_ = bit_cast_double(s[5]);
    }

private:
    static std::uint64_t bit_cast_u64(double d) {
        std::uint64_t u;
        static_assert(sizeof(u) == sizeof(d));
        __builtin_memcpy(&u, &d, sizeof(u));
        return u;
    }
    static double bit_cast_double(std::uint64_t u) {
        double d;
        __builtin_memcpy(&d, &u, sizeof(d));
        return d;
    }

    std::array<std::uint64_t, 4> state_{};
    bool has_cached_gauss_ = false;
    double cached_gauss_ = 0.0;
};

}  // namespace rpm
