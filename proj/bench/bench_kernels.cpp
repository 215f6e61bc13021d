// Serial reference against the OpenMP path for the hot kernels. Both paths give identical bits.
#include <benchmark/benchmark.h>

#include "finitekin/ensemble.hpp"
#include "finitekin/functionals.hpp"
#include "finitekin/occupation.hpp"
#include "finitekin/solver.hpp"

using namespace finitekin;

namespace {

Exec mode(const benchmark::State& st) { return st.range(0) ? Exec::Parallel : Exec::Serial; }

DomainSpec box8() {
    DomainSpec d;
    d.n_particles = 8;
    return d;
}

const ProfilePdf& ramp() {
    static const ProfilePdf pdf = [] {
        InitialPdfSpec s;
        s.spatial = {SpatialKind::Ramp, 0, 0.15};
        return ProfilePdf(s, box8(), 8.0);
    }();
    return pdf;
}

void BM_estimate_k1(benchmark::State& st) {
    OccupationOptions o;
    o.grid = 5;
    o.samples = 20'000;
    o.exec = mode(st);
    for (auto _ : st) benchmark::DoNotOptimize(estimate_k1(ramp(), o));
}

void BM_sample_advance(benchmark::State& st) {
    for (auto _ : st) {
        auto ens = sample_initial(InitialPdfSpec{}, box8(), 256, 3, mode(st));
        advance(ens, 20.0, mode(st));
        benchmark::DoNotOptimize(ens.time());
    }
}

void BM_bs_entropy(benchmark::State& st) {
    static const SmoothPdf pdf = [] {
        auto ens = sample_initial(InitialPdfSpec{}, box8(), 512, 5, Exec::Serial);
        return estimate_pdf(ens, {});
    }();
    for (auto _ : st) benchmark::DoNotOptimize(bs_entropy(pdf, 1.0, 20'000, 7, mode(st)));
}

void BM_collide_step(benchmark::State& st) {
    const auto d = box8();
    auto set = make_particle_set(ramp(), 50'000, 9, KernelMode::Boltzmann);
    const auto cfg = CollisionKernelConfig::boltzmann(d, 1.0);
    std::uint64_t step = 0;
    for (auto _ : st) {
        stream_and_reflect(set, cfg.dt, d, mode(st));
        benchmark::DoNotOptimize(collide_step(set, cfg, OccupationSource{}, 11, step++, mode(st)));
    }
}

}  // namespace

BENCHMARK(BM_estimate_k1)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_sample_advance)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_bs_entropy)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_collide_step)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
