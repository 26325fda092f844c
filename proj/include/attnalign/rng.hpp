#pragma once

#include <cstdint>
#include <vector>

namespace attnalign {

/// Deterministic counter-based generator (SplitMix64).
///
/// The state advances by a fixed odd constant and the output is a finalizer
/// hash of the state, so the stream for a given seed is identical on every
/// platform and build. Child streams are derived with split(), which hashes
/// (state, key) into a fresh seed; consumers that key their children
/// distinctly never share a stream. No platform or standard-library
/// generator is used anywhere.
class SeededRng {
public:
    explicit SeededRng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ULL;
        return mix(state_);
    }

    /// Uniform double in [0, 1), 53 random bits.
    double next_double() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) {
        return lo + (hi - lo) * next_double();
    }

    /// Unbiased integer in [0, n), n > 0 (Lemire multiply-shift rejection).
    std::uint64_t next_below(std::uint64_t n) {
        unsigned __int128 m = static_cast<unsigned __int128>(next_u64()) * n;
        auto lo = static_cast<std::uint64_t>(m);
        if (lo < n) {
            const std::uint64_t threshold = (0ULL - n) % n;
            while (lo < threshold) {
                m = static_cast<unsigned __int128>(next_u64()) * n;
                lo = static_cast<std::uint64_t>(m);
            }
        }
        return static_cast<std::uint64_t>(m >> 64);
    }

    /// Child generator for an independent purpose-keyed stream.
    SeededRng split(std::uint64_t key) const {
        return SeededRng(mix(state_ + mix(key + 0x9e3779b97f4a7c15ULL)));
    }

    /// Current state, usable as a derived seed for a child consumer.
    std::uint64_t state() const { return state_; }

    /// Fisher-Yates shuffle driven by this stream.
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(next_below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    static std::uint64_t mix(std::uint64_t z) {
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    std::uint64_t state_;
};

// Purpose keys for the documented child derivations. Every consumer first
// splits the run root by its purpose key, then splits that child again by
// its own index (class, example, epoch, cell), so streams for different
// purposes can never coincide.
namespace rng_keys {
inline constexpr std::uint64_t kWeightInit = 0x10;
inline constexpr std::uint64_t kTrainValSplit = 0x20; // then split by class
inline constexpr std::uint64_t kDecoySynth = 0x30;    // then split by example
inline constexpr std::uint64_t kEpochShuffle = 0x40;  // then split by epoch
inline constexpr std::uint64_t kGridCell = 0x50;      // then split by cell
} // namespace rng_keys

} // namespace attnalign
