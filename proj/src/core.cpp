#include <algorithm>
#include <cmath>
#include <numeric>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "finitekin/core/error.hpp"
#include "finitekin/core/parallel.hpp"
#include "finitekin/core/stats.hpp"

namespace finitekin {

namespace {
std::string join_problems(const std::vector<std::string>& problems) {
    std::string out = "invalid configuration";
    for (const auto& p : problems) out += "\n  " + p;
    return out;
}
}  // namespace

ConfigError::ConfigError(std::vector<std::string> problems)
    : std::runtime_error(join_problems(problems)), problems_(std::move(problems)) {}

Estimate batch_means(std::span<const double> means) {
    const auto B = double(means.size());
    if (means.empty()) return {};
    const double mean = std::accumulate(means.begin(), means.end(), 0.0) / B;
    if (means.size() < 2) return {mean, 0.0};
    double ss = 0.0;
    for (double m : means) ss += (m - mean) * (m - mean);
    return {mean, std::sqrt(ss / (B - 1.0) / B)};
}

Estimate batch_ratio(std::span<const double> num, std::span<const double> den) {
    const double N = std::accumulate(num.begin(), num.end(), 0.0);
    const double D = std::accumulate(den.begin(), den.end(), 0.0);
    if (D == 0.0) return {0.0, 0.0};
    const double r = N / D;
    // Linearized ratio variance; robust when some batches have tiny denominators.
    const auto B = double(num.size());
    if (num.size() < 2) return {r, 0.0};
    const double dbar = D / B;
    double ss = 0.0;
    for (std::size_t b = 0; b < num.size(); ++b) {
        const double e = (num[b] - r * den[b]) / dbar;
        ss += e * e;
    }
    return {r, std::sqrt(ss / (B - 1.0) / B)};
}

std::vector<double> isotonic_nonincreasing(std::span<const double> y, std::span<const double> w) {
    struct Block {
        double sum_wy, sum_w;
        std::size_t count;
    };
    std::vector<Block> blocks;
    for (std::size_t i = 0; i < y.size(); ++i) {
        const double wi = w.empty() ? 1.0 : w[i];
        blocks.push_back({wi * y[i], wi, 1});
        while (blocks.size() > 1) {
            auto& a = blocks[blocks.size() - 2];
            const auto& b = blocks.back();
            if (a.sum_wy / a.sum_w >= b.sum_wy / b.sum_w) break;
            a.sum_wy += b.sum_wy;
            a.sum_w += b.sum_w;
            a.count += b.count;
            blocks.pop_back();
        }
    }
    std::vector<double> fit;
    fit.reserve(y.size());
    for (const auto& b : blocks) fit.insert(fit.end(), b.count, b.sum_wy / b.sum_w);
    return fit;
}

LinearFit least_squares_line(std::span<const double> x, std::span<const double> y) {
    const auto n = double(x.size());
    const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
    const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
    double sxy = 0.0, sxx = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
    }
    const double slope = sxx > 0.0 ? sxy / sxx : 0.0;
    return {slope, my - slope * mx};
}

void set_worker_count(int workers) {
#ifdef _OPENMP
    if (workers > 0) omp_set_num_threads(workers);
#else
    (void)workers;
#endif
}

int worker_count() {
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

}  // namespace finitekin
