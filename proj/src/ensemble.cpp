#include "finitekin/ensemble.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numbers>
#include <ostream>

#include "finitekin/core/error.hpp"
#include "finitekin/core/format.hpp"

namespace finitekin {

std::vector<PhasePoint> ReplicaEnsemble::phase_samples() const {
    std::vector<PhasePoint> out;
    for (const auto& tr : replicas) {
        for (std::size_t k = 0; k < tr.current.size(); ++k) out.push_back({tr.current.r[k], tr.current.v[k]});
    }
    return out;
}

ReplicaEnsemble sample_initial(const InitialPdfSpec& spec, const DomainSpec& domain, std::size_t replicas,
                               std::uint64_t seed, Exec exec) {
    domain.validate();
    const ProfilePdf profile(spec, domain, 1.0, ProfilePdf::Support::Box);
    constexpr std::uint64_t kMaxAttempts = 1'000'000;
    ReplicaEnsemble ens;
    ens.domain = domain;
    ens.seed = seed;
    ens.replicas.resize(replicas);
    std::vector<std::uint64_t> attempts(replicas, 0);
    std::atomic<bool> exhausted{false};
    for_each_index(std::int64_t(replicas), exec, [&](std::int64_t r) {
        CounterRng rng(seed, Stream::InitialState, std::uint64_t(r));
        NBodyState s;
        s.r.resize(domain.n_particles);
        s.v.resize(domain.n_particles);
        for (;;) {
            if (++attempts[r] > kMaxAttempts) {
                exhausted = true;
                return;
            }
            for (int i = 0; i < domain.n_particles; ++i) {
                s.r[i] = profile.sample_position(rng);
                s.v[i] = profile.sample_velocity(rng);
            }
            if (configuration_admissible(s.r, domain)) break;
        }
        ens.replicas[r] = make_trajectory(s);
    });
    std::uint64_t total = 0;
    for (auto a : attempts) total += a;
    ens.attempts = total;
    ens.acceptance = total > 0 ? double(replicas) / double(total) : 1.0;
    if (exhausted || ens.acceptance < 1e-4) {
        throw NumericalFault("sample_initial: acceptance below 1e-4; packing too dense for rejection sampling");
    }
    return ens;
}

void advance(ReplicaEnsemble& ensemble, double t, Exec exec, bool record_events) {
    SimulationOptions opt;
    opt.record_events = record_events;
    for_each_index(std::int64_t(ensemble.replicas.size()), exec,
                   [&](std::int64_t r) { simulate(ensemble.replicas[r], t, ensemble.domain, opt); });
}

ReplicaEnsemble time_reverse(const ReplicaEnsemble& ensemble, double t_origin) {
    ReplicaEnsemble out = ensemble;
    for (auto& tr : out.replicas) tr = make_trajectory(time_reverse(tr.current, t_origin));
    return out;
}

SmoothPdf estimate_pdf(const ReplicaEnsemble& ensemble, const KdeOptions& options) {
    return SmoothPdf(ensemble.phase_samples(), ensemble.domain, options);
}

double maxwellian_eval(const Vec3& v, const MaxwellianParams& p, double mass) {
    const double s = 2.0 * p.T_o / mass;
    return p.n_o * std::pow(std::numbers::pi, -1.5) * std::pow(s, -1.5) * std::exp(-norm2(v - p.V_o) / s);
}

MaxwellianFit fit_maxwellian(const std::vector<PhasePoint>& samples, const DomainSpec& domain) {
    if (samples.size() < 2) throw NumericalFault("fit_maxwellian: need at least two samples");
    const double m = domain.mass;
    auto moments = [&](std::size_t lo, std::size_t hi, Vec3& mean, double& temp) {
        const auto n = double(hi - lo);
        mean = {};
        for (std::size_t k = lo; k < hi; ++k) mean += samples[k].v;
        mean /= n;
        double ss = 0.0;
        for (std::size_t k = lo; k < hi; ++k) ss += norm2(samples[k].v - mean);
        temp = m * ss / (3.0 * std::max(1.0, n - 1.0));
    };
    MaxwellianFit fit;
    double temp;
    moments(0, samples.size(), fit.params.V_o, temp);
    if (!(temp > 0.0)) throw NumericalFault("fit_maxwellian: non-positive velocity variance");
    fit.params.T_o = temp;
    fit.params.n_o = double(domain.n_particles) / domain.admissible_volume();
    const int batches = int(std::min<std::size_t>(kDefaultBatches, samples.size() / 2));
    std::vector<double> tb(batches), vx(batches), vy(batches), vz(batches);
    for (int b = 0; b < batches; ++b) {
        const auto [lo, hi] = batch_range(samples.size(), batches, b);
        Vec3 mb;
        moments(lo, hi, mb, tb[b]);
        vx[b] = mb.x;
        vy[b] = mb.y;
        vz[b] = mb.z;
    }
    fit.T_err = batch_means(tb).stderr_;
    fit.V_err = {batch_means(vx).stderr_, batch_means(vy).stderr_, batch_means(vz).stderr_};
    return fit;
}

MaxwellianParams fit_maxwellian(const PhaseSpaceDensity& pdf) {
    const Vec3 sd = pdf.velocity_std();
    const double temp = pdf.domain().mass * norm2(sd) / 3.0;
    if (!(temp > 0.0)) throw NumericalFault("fit_maxwellian: non-positive velocity variance");
    return {pdf.mass() / pdf.domain().admissible_volume(), temp, pdf.velocity_mean()};
}

Estimate distance_to_maxwellian(const PhaseSpaceDensity& pdf, const MaxwellianParams& p, std::uint64_t samples,
                                std::uint64_t seed, Exec exec) {
    const DomainSpec& d = pdf.domain();
    const double vadm = d.admissible_volume();
    const MaxwellianParams unit{1.0, p.T_o, p.V_o};
    const double m2 = std::pow(d.mass / (4.0 * std::numbers::pi * p.T_o), 1.5) / vadm;
    const double inv_mass = 1.0 / pdf.mass();
    const Estimate cross = mc_mean(samples, exec, [&](std::uint64_t i) {
        CounterRng rng(seed, Stream::Distance, i);
        const PhasePoint x = pdf.sample(rng);
        const double a = pdf.value(x.r, x.v) * inv_mass;
        const double mx = d.inside_admissible(x.r) ? maxwellian_eval(x.v, unit, d.mass) / vadm : 0.0;
        return a - 2.0 * mx;
    });
    const double d2 = cross.value + m2;
    if (d2 <= 0.0) return {0.0, std::sqrt(cross.stderr_)};
    const double dist = std::sqrt(d2);
    return {dist, cross.stderr_ / (2.0 * dist)};
}

double scale_length(const PhaseSpaceDensity& pdf, const std::vector<PhasePoint>& probes) {
    double worst = 0.0;
    for (const auto& x : probes) {
        const PointDerivs e = pdf.eval(x.r, x.v);
        if (!(e.value > 0.0)) continue;
        worst = std::max(worst, norm(e.grad) / e.value);
    }
    const double extent = norm(pdf.domain().extent());
    if (worst * extent < 1e-9) return kUnboundedScale;
    return 1.0 / worst;
}

double scale_length_spatial(const PhaseSpaceDensity& pdf, const std::vector<PhasePoint>& probes) {
    double worst = 0.0;
    for (const auto& x : probes) {
        const PointDerivs e = pdf.spatial(x.r);
        if (!(e.value > 0.0)) continue;
        worst = std::max(worst, norm(e.grad) / e.value);
    }
    const double extent = norm(pdf.domain().extent());
    if (worst * extent < 1e-9) return kUnboundedScale;
    return 1.0 / worst;
}

std::vector<PhasePoint> default_probes(const PhaseSpaceDensity& pdf, std::size_t count, double margin,
                                       std::uint64_t seed, bool core_velocity) {
    const DomainSpec& d = pdf.domain();
    Vec3 lo = d.admissible_lo() + Vec3{1, 1, 1} * margin;
    Vec3 hi = d.admissible_hi() - Vec3{1, 1, 1} * margin;
    for (int a = 0; a < 3; ++a) {
        if (hi[a] <= lo[a]) lo[a] = hi[a] = d.center()[a];
    }
    const auto k = std::size_t(std::ceil(std::cbrt(double(count))));
    const std::size_t cells = k * k * k;
    std::vector<PhasePoint> probes(count);
    for (std::size_t i = 0; i < count; ++i) {
        CounterRng rng(seed, Stream::Test, i);
        const std::size_t c = i * cells / count;
        const std::size_t idx[3] = {c % k, (c / k) % k, c / (k * k)};
        for (int a = 0; a < 3; ++a) {
            probes[i].r[a] = lo[a] + (hi[a] - lo[a]) * (double(idx[a]) + rng.uniform()) / double(k);
        }
        probes[i].v = core_velocity ? pdf.velocity_mean() : pdf.sample(rng).v;
    }
    return probes;
}

void write_ensemble_csv(std::ostream& os, const ReplicaEnsemble& ensemble, bool header) {
    if (header) os << "replica,t,x,y,z,vx,vy,vz\n";
    for (std::size_t r = 0; r < ensemble.replicas.size(); ++r) {
        const auto& s = ensemble.replicas[r].current;
        for (std::size_t k = 0; k < s.size(); ++k) {
            os << r << ',' << fmt_double(s.t);
            for (int a = 0; a < 3; ++a) os << ',' << fmt_double(s.r[k][a]);
            for (int a = 0; a < 3; ++a) os << ',' << fmt_double(s.v[k][a]);
            os << '\n';
        }
    }
}

}  // namespace finitekin
