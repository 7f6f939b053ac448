#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace lc {

inline constexpr const char* kVersion = "layercache 0.1.0";

/// Contract violation on tensor shapes or op arguments.
struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// Malformed or inconsistent artifact (file, mask, config).
struct ValidationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Numerical failure (NaN loss, divergence).
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline uint64_t splitmix64(uint64_t& state) {
    uint64_t z = (state += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

/// Deterministic, splittable RNG. Normal variates use Box-Muller so the
/// stream is identical across standard libraries.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {
        // Warm up so nearby seeds decorrelate.
        splitmix64(state_);
        splitmix64(state_);
    }

    /// Independent child stream; `tag` distinguishes siblings.
    Rng fork(uint64_t tag) const {
        uint64_t s = state_;
        uint64_t mixed = splitmix64(s) ^ (0x9e3779b97f4a7c15ull * (tag + 1));
        return Rng(mixed);
    }

    uint64_t next_u64() { return splitmix64(state_); }

    /// Uniform in [0, 1).
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    /// Uniform integer in [0, n).
    uint64_t uniform_int(uint64_t n) { return next_u64() % n; }

    /// Standard normal (Box-Muller, cached spare).
    double normal();

private:
    uint64_t state_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

/// FNV-1a over raw bytes; used for parameter/content hashes.
inline uint64_t fnv1a(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

/// Runs fn(i) for i in [0, n) over `threads` workers, contiguous chunks.
/// Chunk assignment is a pure function of (n, threads), so any reduction
/// done per-chunk and merged in chunk order is deterministic.
void parallel_for(int64_t n, int threads, const std::function<void(int64_t)>& fn);

inline int default_threads() {
    unsigned hc = std::thread::hardware_concurrency();
    return hc == 0 ? 1 : static_cast<int>(hc);
}

}  // namespace lc
