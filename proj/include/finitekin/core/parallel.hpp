#pragma once

#include <cstdint>
#include <vector>

#include "finitekin/core/stats.hpp"

namespace finitekin {

// Serial is the reference path; Parallel distributes whole batches over OpenMP
// threads. Batches are reduced in index order, so both give identical bits.
enum class Exec { Serial, Parallel };

void set_worker_count(int workers);
int worker_count();

// Runs body(b) for b in [0, n). Each call must only write its own slot.
template <class Body>
void for_each_index(std::int64_t n, Exec exec, Body&& body) {
    if (exec == Exec::Parallel) {
#pragma omp parallel for schedule(dynamic, 1)
        for (std::int64_t b = 0; b < n; ++b) body(b);
    } else {
        for (std::int64_t b = 0; b < n; ++b) body(b);
    }
}

// Sample mean of f(i), i in [0, n), with batch-means error.
template <class F>
Estimate mc_mean(std::uint64_t n, Exec exec, F&& f, int batches = kDefaultBatches) {
    std::vector<double> means(batches, 0.0);
    for_each_index(batches, exec, [&](std::int64_t b) {
        const auto [lo, hi] = batch_range(n, batches, int(b));
        double s = 0.0;
        for (std::uint64_t i = lo; i < hi; ++i) s += f(i);
        means[b] = hi > lo ? s / double(hi - lo) : 0.0;
    });
    return batch_means(means);
}

// Vector version; f(i) returns Vec3.
template <class F>
Vec3Estimate mc_mean_vec(std::uint64_t n, Exec exec, F&& f, int batches = kDefaultBatches) {
    std::vector<double> mx(batches), my(batches), mz(batches);
    for_each_index(batches, exec, [&](std::int64_t b) {
        const auto [lo, hi] = batch_range(n, batches, int(b));
        Vec3 s;
        for (std::uint64_t i = lo; i < hi; ++i) s += f(i);
        if (hi > lo) s /= double(hi - lo);
        mx[b] = s.x;
        my[b] = s.y;
        mz[b] = s.z;
    });
    const Estimate ex = batch_means(mx), ey = batch_means(my), ez = batch_means(mz);
    return {{ex.value, ey.value, ez.value}, {ex.stderr_, ey.stderr_, ez.stderr_}};
}

}  // namespace finitekin
