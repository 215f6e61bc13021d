#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "finitekin/core/vec3.hpp"

namespace finitekin {

inline constexpr int kDefaultBatches = 32;

struct Estimate {
    double value = 0.0;
    double stderr_ = 0.0;
};

struct Vec3Estimate {
    Vec3 value;
    Vec3 stderr_;
};

// Mean of batch means and its standard error sd/sqrt(B).
Estimate batch_means(std::span<const double> means);

// Ratio of summed numerators to summed denominators; error from the spread of
// per-batch ratios.
Estimate batch_ratio(std::span<const double> num, std::span<const double> den);

// Pool-adjacent-violators fit of a non-increasing sequence (least squares).
std::vector<double> isotonic_nonincreasing(std::span<const double> y, std::span<const double> w = {});

struct LinearFit {
    double slope = 0.0;
    double intercept = 0.0;
};
LinearFit least_squares_line(std::span<const double> x, std::span<const double> y);

// Half-open range [begin, end) of batch b when n items are split in B batches.
inline std::pair<std::uint64_t, std::uint64_t> batch_range(std::uint64_t n, int batches, int b) {
    const std::uint64_t B = std::uint64_t(batches);
    return {n * std::uint64_t(b) / B, n * std::uint64_t(b + 1) / B};
}

}  // namespace finitekin
