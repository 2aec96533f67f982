#pragma once

// Counter-based random streams.
//
// Every stochastic site in the library draws from a Stream that is derived
// from a root seed and a path of integer labels (epoch, step, corpus index,
// ...). Draws are produced by Philox4x32-10 (Salmon et al., "Parallel random
// numbers: as easy as 1, 2, 3") keyed by a 64-bit hash of that path, so a
// stream's output depends only on its path and never on the order in which
// other streams were consumed.

#include <array>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <vector>

namespace inkdiff {

/// Philox4x32 with 10 rounds. Pure function of (key, counter).
std::array<std::uint32_t, 4> philox4x32(std::array<std::uint32_t, 4> counter,
                                        std::array<std::uint32_t, 2> key);

/// SplitMix64 finalizer; used to fold labels into a stream key.
std::uint64_t mix64(std::uint64_t x);

class Stream {
public:
    Stream() = default;
    explicit Stream(std::uint64_t seed) : key_(mix64(seed ^ 0x6a09e667f3bcc908ULL)) {}

    /// Child stream identified by one more label. Deriving does not consume
    /// draws from the parent.
    [[nodiscard]] Stream derive(std::uint64_t label) const;
    [[nodiscard]] Stream derive(std::initializer_list<std::uint64_t> labels) const;

    std::uint32_t next_u32();
    std::uint64_t next_u64();
    /// Uniform in [0, 1) with 53 bits of resolution.
    double uniform();
    /// Uniform integer in [0, n). n must be positive.
    std::uint64_t uniform_int(std::uint64_t n);
    /// Standard normal via Box-Muller; both outputs of a pair are used.
    double normal();

    template <class T>
    void fill_normal(std::span<T> out) {
        for (auto& v : out) v = static_cast<T>(normal());
    }
    template <class T>
    std::vector<T> normal_vector(std::size_t n) {
        std::vector<T> out(n);
        fill_normal(std::span<T>(out));
        return out;
    }

    std::uint64_t key() const { return key_; }
    std::uint64_t position() const { return counter_; }

private:
    Stream(std::uint64_t key, int) : key_(key) {}

    std::uint64_t key_ = 0;
    std::uint64_t counter_ = 0;  // blocks consumed
    std::array<std::uint32_t, 4> block_{};
    int lane_ = 4;               // next unused lane of block_
    bool has_spare_ = false;
    double spare_ = 0.0;
};

/// Fisher-Yates shuffle of [0, n) driven by the given stream.
std::vector<std::size_t> permutation(std::size_t n, Stream& rng);

/// Stable 64-bit label for a short ASCII tag, so call sites can write
/// rng.derive(tag("shuffle")).
constexpr std::uint64_t tag(const char* s) {
    std::uint64_t h = 14695981039346656037ULL;
    for (; *s; ++s) {
        h ^= static_cast<unsigned char>(*s);
        h *= 1099511628211ULL;
    }
    return h;
}

}  // namespace inkdiff
