#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>

namespace vsyn {

// Dense extents in (batch, channel, height, width) order.
struct Shape4 {
    int64_t b = 0, c = 0, h = 0, w = 0;

    int64_t numel() const { return b * c * h * w; }
    int64_t hw() const { return h * w; }

    bool operator==(const Shape4&) const = default;

    std::string str() const {
        std::ostringstream os;
        os << "(" << b << "," << c << "," << h << "," << w << ")";
        return os.str();
    }
};

[[noreturn]] inline void fail(const std::string& msg) { throw std::runtime_error(msg); }

inline void require(bool cond, const std::string& msg) {
    if (!cond) fail(msg);
}

// SplitMix64: cheap stateless mixing used to derive independent seed streams
// (per-parameter init, per-step training randomness, per-sprite geometry).
inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline uint64_t mix_seed(uint64_t seed, uint64_t stream) {
    return splitmix64(seed ^ splitmix64(stream + 0x517cc1b727220a95ULL));
}

inline std::mt19937_64 make_rng(uint64_t seed, uint64_t stream) {
    return std::mt19937_64(mix_seed(seed, stream));
}

}  // namespace vsyn
