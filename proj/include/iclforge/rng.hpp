#pragma once

// Counter-based random numbers. Every value is a pure function of
// (seed, stream, counter), so independent consumers can each own a stream id
// and draw without coordinating, and any draw can be reproduced in isolation.

#include <cmath>
#include <cstdint>
#include <utility>

namespace iclforge {

namespace detail {
// splitmix64 finalizer
inline std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}
}  // namespace detail

inline std::uint64_t rng_value(std::uint64_t seed, std::uint64_t stream, std::uint64_t counter) {
    std::uint64_t h = detail::mix64(seed ^ 0x6a09e667f3bcc908ull);
    h = detail::mix64(h ^ stream);
    h = detail::mix64(h ^ counter);
    return h;
}

class RngStream {
public:
    RngStream(std::uint64_t seed, std::uint64_t stream) : seed_(seed), stream_(stream) {}

    std::uint64_t next_u64() { return rng_value(seed_, stream_, counter_++); }

    // Uniform in [0, 1): 53 mantissa bits.
    double next_unit() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Unbiased uniform integer in [0, n) by rejection.
    std::uint64_t next_below(std::uint64_t n) {
        if (n == 0) return 0;
        std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t v;
        do {
            v = next_u64();
        } while (v >= limit);
        return v % n;
    }

    // Box-Muller, one branch of the pair per call so draw count stays fixed.
    double next_gaussian() {
        double u1 = next_unit();
        double u2 = next_unit();
        while (u1 <= 0.0) u1 = next_unit();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    // Standard normal restricted to [-cut, cut] by rejection.
    double next_trunc_gaussian(double cut = 2.0) {
        for (;;) {
            double g = next_gaussian();
            if (g >= -cut && g <= cut) return g;
        }
    }

    template <typename T>
    void shuffle(T* begin, std::size_t n) {
        for (std::size_t i = n; i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(next_below(i));
            std::swap(begin[i - 1], begin[j]);
        }
    }

    std::uint64_t seed() const { return seed_; }
    std::uint64_t stream() const { return stream_; }
    std::uint64_t counter() const { return counter_; }

private:
    std::uint64_t seed_;
    std::uint64_t stream_;
    std::uint64_t counter_ = 0;
};

// Stream-id namespaces. Keeping purposes in disjoint id ranges means adding a
// new consumer never shifts the draws of an existing one.
namespace stream_ns {
constexpr std::uint64_t kParamInit = 1ull << 56;
constexpr std::uint64_t kBatch = 2ull << 56;
constexpr std::uint64_t kSuite = 3ull << 56;
constexpr std::uint64_t kStoreGen = 4ull << 56;
constexpr std::uint64_t kStoreSplit = 5ull << 56;
constexpr std::uint64_t kStoreRelabel = 6ull << 56;

inline std::uint64_t batch_slot(long step, int slot) {
    return kBatch | (static_cast<std::uint64_t>(step) << 16) | static_cast<std::uint64_t>(slot);
}
inline std::uint64_t suite_episode(std::uint64_t task_index, std::uint64_t episode_index) {
    return kSuite | (task_index << 40) | episode_index;
}
}  // namespace stream_ns

}  // namespace iclforge
