#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>

#include "finitekin/core/vec3.hpp"

namespace finitekin {

// Philox4x32-10 block function.
inline std::array<std::uint32_t, 4> philox4x32(std::array<std::uint32_t, 4> ctr,
                                               std::array<std::uint32_t, 2> key) {
    constexpr std::uint32_t M0 = 0xD2511F53u, M1 = 0xCD9E8D57u;
    constexpr std::uint32_t W0 = 0x9E3779B9u, W1 = 0xBB67AE85u;
    for (int round = 0; round < 10; ++round) {
        const std::uint64_t p0 = std::uint64_t(M0) * ctr[0];
        const std::uint64_t p1 = std::uint64_t(M1) * ctr[2];
        const auto hi0 = std::uint32_t(p0 >> 32), lo0 = std::uint32_t(p0);
        const auto hi1 = std::uint32_t(p1 >> 32), lo1 = std::uint32_t(p1);
        ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
        key[0] += W0;
        key[1] += W1;
    }
    return ctr;
}

// Named streams so that unrelated consumers of one seed never share counters.
enum class Stream : std::uint32_t {
    InitialState = 1,
    PdfSubsample,
    Occupation,
    PairOccupation,
    Identity,
    Entropy,
    KM,
    KMLaplacian,
    WM,
    Distance,
    Solver,
    SolverInit,
    Test,
};

// Counter-based generator for one (seed, stream, index) triple. Cheap to construct,
// so each MC sample or replica gets its own and results do not depend on scheduling.
class CounterRng {
public:
    CounterRng(std::uint64_t seed, std::uint32_t stream, std::uint64_t index)
        : key_{std::uint32_t(seed), std::uint32_t(seed >> 32)},
          ctr_{0u, std::uint32_t(index), std::uint32_t(index >> 32), stream} {}
    CounterRng(std::uint64_t seed, Stream stream, std::uint64_t index)
        : CounterRng(seed, static_cast<std::uint32_t>(stream), index) {}

    std::uint32_t next_u32() {
        if (pos_ == 4) {
            block_ = philox4x32(ctr_, key_);
            ++ctr_[0];
            pos_ = 0;
        }
        return block_[pos_++];
    }

    std::uint64_t next_u64() {
        const std::uint64_t hi = next_u32();
        return (hi << 32) | next_u32();
    }

    // [0, 1)
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }
    // (0, 1]
    double uniform_pos() { return 1.0 - uniform(); }
    double uniform(double a, double b) { return a + (b - a) * uniform(); }

    std::uint64_t below(std::uint64_t n) { return std::uint64_t(uniform() * double(n)) % n; }

    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const double r = std::sqrt(-2.0 * std::log(uniform_pos()));
        const double phi = 2.0 * std::numbers::pi * uniform();
        spare_ = r * std::sin(phi);
        has_spare_ = true;
        return r * std::cos(phi);
    }

    Vec3 normal3() {
        const double a = normal(), b = normal(), c = normal();
        return {a, b, c};
    }

    Vec3 unit_vector() {
        const double z = 2.0 * uniform() - 1.0;
        const double phi = 2.0 * std::numbers::pi * uniform();
        const double s = std::sqrt(std::max(0.0, 1.0 - z * z));
        return {s * std::cos(phi), s * std::sin(phi), z};
    }

private:
    std::array<std::uint32_t, 2> key_;
    std::array<std::uint32_t, 4> ctr_;
    std::array<std::uint32_t, 4> block_{};
    int pos_ = 4;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

// Derive an independent 64-bit seed from a parent seed and a label.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t label) {
    const auto out = philox4x32({std::uint32_t(label), std::uint32_t(label >> 32), 0xA5A5A5A5u, 0u},
                                {std::uint32_t(seed), std::uint32_t(seed >> 32)});
    return (std::uint64_t(out[0]) << 32) | out[1];
}

}  // namespace finitekin
