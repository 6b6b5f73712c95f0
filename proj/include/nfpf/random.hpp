#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>

namespace nfpf {

/// SplitMix64 generator. Cheap to construct, so independent substreams can be
/// derived from (seed, step, index) counters and consumed in any order, which
/// keeps parallel particle propagation identical to sequential execution.
class Rng {
public:
    using result_type = std::uint64_t;

    explicit Rng(std::uint64_t seed = 0) : state_(seed) {}

    /// Substream keyed by a seed and two counters.
    static Rng stream(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
        std::uint64_t key = mix(seed ^ 0x6a09e667f3bcc909ULL);
        key = mix(key ^ (a + 0xbb67ae8584caa73bULL));
        key = mix(key ^ (b + 0x3c6ef372fe94f82bULL));
        return Rng(key);
    }

    static constexpr result_type min() { return 0; }
    static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

    result_type operator()() {
        state_ += 0x9e3779b97f4a7c15ULL;
        return mix(state_);
    }

private:
    static std::uint64_t mix(std::uint64_t z) {
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    std::uint64_t state_;
};

/// Worker count from NFPF_THREADS (0 or unset = hardware concurrency).
std::size_t configured_threads();

/// Runs fn(i) for i in [0, n). Each index must write only its own outputs.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace nfpf
