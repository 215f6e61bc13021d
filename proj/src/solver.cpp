#include "finitekin/solver.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <numbers>
#include <ostream>
#include <random>

#include "finitekin/core/error.hpp"
#include "finitekin/core/format.hpp"
#include "finitekin/dynamics.hpp"

namespace finitekin {

const char* to_string(KernelMode k) { return k == KernelMode::Master ? "master" : "boltzmann"; }

void KineticParticleSet::validate(const DomainSpec& domain) const {
    if (v.size() != r.size() || w.size() != r.size())
        throw InvariantViolation("particle set: r, v, w sizes differ");
    double sum = 0.0, comp = 0.0;  // Neumaier summation
    for (std::size_t i = 0; i < r.size(); ++i) {
        if (!(w[i] > 0.0) || !std::isfinite(w[i])) throw NumericalFault("particle set: non-positive weight");
        if (!is_finite(r[i]) || !is_finite(v[i])) throw NumericalFault("particle set: non-finite state");
        if (!domain.inside_admissible(r[i])) throw NumericalFault("particle set: particle left the admissible box");
        const double t = sum + w[i];
        comp += std::abs(sum) >= std::abs(w[i]) ? (sum - t) + w[i] : (w[i] - t) + sum;
        sum = t;
    }
    sum += comp;
    if (!r.empty() && std::abs(sum - 1.0) > 1e-12) throw InvariantViolation("particle set: weights do not sum to 1");
}

KineticParticleSet make_particle_set(const PhaseSpaceDensity& pdf, std::size_t count, std::uint64_t seed,
                                     KernelMode kernel, Cbc cbc) {
    if (count == 0) throw ConfigError(std::string("particle set: need at least one particle"));
    const DomainSpec& d = pdf.domain();
    KineticParticleSet set;
    set.kernel = kernel;
    set.cbc = cbc;
    set.r.resize(count);
    set.v.resize(count);
    set.w.assign(count, 1.0 / double(count));
    std::atomic<bool> failed{false};
    for_each_index(std::int64_t(count), Exec::Parallel, [&](std::int64_t i) {
        CounterRng rng(seed, Stream::SolverInit, std::uint64_t(i));
        for (int attempt = 0; attempt < 1000; ++attempt) {
            const PhasePoint p = pdf.sample(rng);
            if (d.inside_admissible(p.r)) {
                set.r[i] = p.r;
                set.v[i] = p.v;
                return;
            }
        }
        failed = true;
    });
    if (failed) throw NumericalFault("particle set: pdf has no mass in the admissible box");
    return set;
}

CollisionKernelConfig CollisionKernelConfig::master(const DomainSpec& domain, double dt) {
    CollisionKernelConfig c;
    c.domain = domain;
    c.dt = dt;
    c.cell_size = domain.sigma;
    c.displacement = domain.sigma;
    c.wall_theta = true;
    c.use_field = true;
    return c;
}

CollisionKernelConfig CollisionKernelConfig::boltzmann(const DomainSpec& domain, double dt) {
    CollisionKernelConfig c;
    c.domain = domain;
    c.dt = dt;
    c.cell_size = domain.sigma;
    c.displacement = 0.0;
    c.wall_theta = false;
    c.use_field = false;
    c.k2_constant = 1.0;
    return c;
}

double mean_free_time(const KineticParticleSet& set, const DomainSpec& domain) {
    const std::size_t P = set.size();
    if (domain.n_particles < 2 || P < 2) return std::numeric_limits<double>::infinity();
    // Mean relative speed from disjoint pairs of a fixed pairing.
    const std::size_t half = P / 2;
    double g = 0.0;
    for (std::size_t i = 0; i < half; ++i) g += norm(set.v[i] - set.v[i + half]);
    g /= double(half);
    const double rate = (domain.n_particles - 1) * domain.sigma * domain.sigma * std::numbers::pi * g /
                        domain.admissible_volume();
    return rate > 0.0 ? 1.0 / rate : std::numeric_limits<double>::infinity();
}

void CollisionKernelConfig::validate(const KineticParticleSet& set) const {
    domain.validate();
    if (!(dt > 0.0) || !std::isfinite(dt)) throw ConfigError(std::string("solver.dt: must be positive"));
    if (!(cell_size > 0.0)) throw ConfigError(std::string("solver.cell_size: must be positive"));
    if (!(displacement >= 0.0)) throw ConfigError(std::string("solver.displacement: must be non-negative"));
    if (displacement > cell_size * 4.0)
        throw ConfigError(std::string("solver.displacement: more than 4 cells"));
    if (!(majorant_factor > 1.0)) throw ConfigError(std::string("solver.majorant_factor: must exceed 1"));
    if (refresh_every < 1) throw ConfigError(std::string("solver.refresh_every: must be >= 1"));
    if (!(k2_constant >= 0.0 && k2_constant <= 1.0))
        throw ConfigError(std::string("solver.k2: constant must lie in [0, 1]"));
    if (use_field && (kde_subsample < 16 || pool_size < 1))
        throw ConfigError(std::string("solver: kde_subsample >= 16 and pool_size >= 1 required"));
    const double tau = mean_free_time(set, domain);
    if (dt > 0.2 * tau)
        throw ConfigError("solver.dt: " + fmt_double(dt) + " exceeds 0.2 x mean free time " + fmt_double(tau));
}

void stream_and_reflect(KineticParticleSet& set, double dt, const DomainSpec& domain, Exec exec) {
    const Vec3 lo = domain.admissible_lo(), hi = domain.admissible_hi();
    std::atomic<bool> escaped{false};
    for_each_index(std::int64_t(set.size()), exec, [&](std::int64_t i) {
        Vec3& r = set.r[i];
        Vec3& v = set.v[i];
        for (int a = 0; a < 3; ++a) {
            const double L = hi[a] - lo[a];
            const double y = r[a] + v[a] * dt - lo[a];
            const double q = std::floor(y / L);
            const double rem = y - q * L;
            if (std::fmod(std::abs(q), 2.0) == 0.0) {
                r[a] = lo[a] + rem;
            } else {
                r[a] = hi[a] - rem;
                v[a] = -v[a];
            }
            if (!(r[a] >= lo[a] && r[a] <= hi[a])) escaped = true;
        }
    });
    if (escaped) throw NumericalFault("stream: particle escaped the admissible box");
    set.t += dt;
}

namespace {

// Adapter so std::poisson_distribution can draw from a counter generator.
struct Urbg {
    CounterRng* rng;
    using result_type = std::uint64_t;
    static constexpr result_type min() { return 0; }
    static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }
    result_type operator()() { return rng->next_u64(); }
};

std::uint64_t poisson(CounterRng& rng, double mean) {
    if (mean <= 0.0) return 0;
    if (mean < 30.0) {
        // Inversion; exact and cheap for the small means of a collide step.
        double p = std::exp(-mean), c = p, u = rng.uniform();
        std::uint64_t k = 0;
        while (u > c && k < 1000) {
            ++k;
            p *= mean / double(k);
            c += p;
        }
        return k;
    }
    Urbg g{&rng};
    std::poisson_distribution<std::uint64_t> dist(mean);
    return dist(g);
}

struct CellGrid {
    Vec3 lo, h;
    int n[3] = {1, 1, 1};
    std::vector<std::uint32_t> start, items;  // CSR

    std::size_t size() const { return std::size_t(n[0]) * n[1] * n[2]; }
    int axis_index(double x, int a) const { return std::clamp(int(std::floor((x - lo[a]) / h[a])), 0, n[a] - 1); }
    std::size_t of(const Vec3& r) const {
        return (std::size_t(axis_index(r.z, 2)) * n[1] + axis_index(r.y, 1)) * n[0] + axis_index(r.x, 0);
    }
    double volume() const { return h.x * h.y * h.z; }
};

CellGrid build_cells(const KineticParticleSet& set, const DomainSpec& d, double cell_size) {
    CellGrid g;
    g.lo = d.admissible_lo();
    const Vec3 ext = d.admissible_hi() - g.lo;
    for (int a = 0; a < 3; ++a) {
        g.n[a] = std::max(1, int(std::floor(ext[a] / cell_size + 1e-9)));
        g.h[a] = ext[a] / g.n[a];
    }
    std::vector<std::uint32_t> count(g.size() + 1, 0);
    std::vector<std::uint32_t> cell(set.size());
    for (std::size_t i = 0; i < set.size(); ++i) {
        cell[i] = std::uint32_t(g.of(set.r[i]));
        ++count[cell[i] + 1];
    }
    for (std::size_t c = 0; c < g.size(); ++c) count[c + 1] += count[c];
    g.start = count;
    g.items.resize(set.size());
    for (std::size_t i = 0; i < set.size(); ++i) g.items[count[cell[i]]++] = std::uint32_t(i);
    return g;
}

}  // namespace

CollideStats collide_step(KineticParticleSet& set, const CollisionKernelConfig& cfg, const OccupationSource& occ,
                          std::uint64_t seed, std::uint64_t step, Exec exec) {
    CollideStats stats;
    const DomainSpec& d = cfg.domain;
    const std::size_t P = set.size();
    if (d.n_particles < 2 || P < 2) return stats;
    const bool field = !occ.is_constant();
    if (field && !occ.k1) throw ConfigError(std::string("collide: occupation field source without k1"));

    const CellGrid cells = build_cells(set, d, cfg.cell_size);
    const double vc = cells.volume();

    // Strict bounds: relative speed, cell density and occupation factor.
    Vec3 mean;
    for (std::size_t i = 0; i < P; ++i) mean += set.w[i] * set.v[i];
    double vmax = 0.0, wmax = 0.0;
    for (std::size_t i = 0; i < P; ++i) {
        vmax = std::max(vmax, norm(set.v[i] - mean));
        wmax = std::max(wmax, set.w[i]);
    }
    std::uint32_t cmax = 0;
    for (std::size_t c = 0; c < cells.size(); ++c) cmax = std::max(cmax, cells.start[c + 1] - cells.start[c]);
    const double rho_max = double(cmax) * wmax / vc;
    const double g_max = 2.0 * vmax;
    double kfac_max = occ.constant;
    if (field) {
        const double kmin = occ.k1->min_value();
        if (!(kmin > 0.0)) throw NumericalFault("collide: k1 field is not positive");
        kfac_max = 1.0 / (kmin * kmin);
    }
    if (!(rho_max > 0.0 && g_max > 0.0 && kfac_max > 0.0)) return stats;

    const double prefactor = (d.n_particles - 1) * d.sigma * d.sigma * 4.0 * std::numbers::pi;
    double majorant = prefactor * g_max * rho_max * kfac_max;

    // Cells of one color are (2R+1) apart on some axis, so their partner neighborhoods are disjoint.
    const int R = int(std::ceil(cfg.displacement / std::min({cells.h.x, cells.h.y, cells.h.z}) - 1e-12));
    const int period = 2 * R + 1;
    const bool anticausal = set.cbc == Cbc::Anticausal;
    const std::uint64_t step_seed = derive_seed(seed, step);

    const std::vector<Vec3> v_start = set.v;
    for (int attempt = 0; attempt < 20; ++attempt) {
        std::uint64_t candidates = 0, accepted = 0, wall = 0;
        bool violated = false;
        for (int color = 0; color < period * period * period && !violated; ++color) {
            const int ox = color % period, oy = (color / period) % period, oz = color / (period * period);
            std::vector<std::size_t> todo;
            for (int k = oz; k < cells.n[2]; k += period)
                for (int j = oy; j < cells.n[1]; j += period)
                    for (int i = ox; i < cells.n[0]; i += period)
                        todo.push_back((std::size_t(k) * cells.n[1] + j) * cells.n[0] + i);
            std::vector<std::uint64_t> c_cand(todo.size()), c_acc(todo.size()), c_wall(todo.size());
            std::vector<char> c_bad(todo.size(), 0);
            for_each_index(std::int64_t(todo.size()), exec, [&](std::int64_t t) {
                const std::size_t c = todo[t];
                for (std::uint32_t s = cells.start[c]; s < cells.start[c + 1]; ++s) {
                    const std::uint32_t i = cells.items[s];
                    CounterRng rng(step_seed, Stream::Solver, i);
                    const std::uint64_t K = poisson(rng, 0.5 * majorant * cfg.dt);
                    for (std::uint64_t k = 0; k < K; ++k) {
                        ++c_cand[t];
                        const Vec3 n21 = rng.unit_vector();
                        const Vec3 r2 = set.r[i] + cfg.displacement * n21;
                        if (cfg.wall_theta && !d.inside_admissible(r2)) {
                            ++c_wall[t];
                            continue;
                        }
                        const std::size_t c2 = cells.of(r2);
                        const std::uint32_t count = cells.start[c2 + 1] - cells.start[c2];
                        if (count == 0) continue;
                        const std::uint32_t j = cells.items[cells.start[c2] + rng.below(count)];
                        if (j == i) continue;
                        const Vec3 n12 = -n21;
                        const double approach = dot(set.v[i] - set.v[j], n12);
                        if (anticausal ? !(approach > 0.0) : !(approach < 0.0)) continue;
                        double kfac = occ.constant;
                        if (field) {
                            kfac = occ.k2->sample(set.r[i], r2, rng) /
                                   (occ.k1->k1(set.r[i]).value * occ.k1->k1(r2).value);
                        }
                        const double rate =
                            prefactor * double(count) * set.w[j] / vc * std::abs(approach) * kfac;
                        const double p = rate / majorant;
                        if (p > 1.0) {
                            c_bad[t] = 1;
                            return;
                        }
                        if (rng.uniform() >= p) continue;
                        const auto [a, b] = anticausal ? invert_binary_collision(set.v[i], set.v[j], n12)
                                                       : apply_binary_collision(set.v[i], set.v[j], n12);
                        set.v[i] = a;
                        set.v[j] = b;
                        ++c_acc[t];
                    }
                }
            });
            for (std::size_t t = 0; t < todo.size(); ++t) {
                candidates += c_cand[t];
                accepted += c_acc[t];
                wall += c_wall[t];
                violated = violated || c_bad[t];
            }
        }
        if (!violated) {
            stats.candidates = candidates;
            stats.accepted = accepted;
            stats.wall_rejected = wall;
            return stats;
        }
        set.v = v_start;
        majorant *= cfg.majorant_factor;
        ++stats.majorant_raises;
    }
    throw NumericalFault("collide: majorant could not be made to bound the acceptance");
}

VelocityMoments velocity_moments(const KineticParticleSet& set) {
    VelocityMoments m;
    const std::size_t P = set.size();
    if (P < 2) return m;
    for (std::size_t i = 0; i < P; ++i) m.mean += set.w[i] * set.v[i];
    double c4[3][3] = {};
    double n_eff_inv = 0.0;
    for (std::size_t i = 0; i < P; ++i) {
        const Vec3 u = set.v[i] - m.mean;
        n_eff_inv += set.w[i] * set.w[i];
        for (int a = 0; a < 3; ++a)
            for (int b = 0; b < 3; ++b) {
                m.cov[a][b] += set.w[i] * u[a] * u[b];
                c4[a][b] += set.w[i] * (u[a] * u[b]) * (u[a] * u[b]);
            }
    }
    for (int a = 0; a < 3; ++a) {
        m.mean_err[a] = std::sqrt(m.cov[a][a] * n_eff_inv);
        for (int b = 0; b < 3; ++b)
            m.cov_err[a][b] = std::sqrt(std::max(0.0, c4[a][b] - m.cov[a][b] * m.cov[a][b]) * n_eff_inv);
    }
    return m;
}

SmoothPdf particle_pdf(const KineticParticleSet& set, const DomainSpec& domain, std::size_t subsample,
                       std::uint64_t seed) {
    const std::size_t P = set.size();
    if (P == 0) throw ConfigError(std::string("particle_pdf: empty set"));
    const std::size_t m = std::min(subsample, P);
    std::vector<PhasePoint> pts(m);
    if (m == P) {
        for (std::size_t i = 0; i < P; ++i) pts[i] = {set.r[i], set.v[i]};
    } else {
        // Partial Fisher-Yates with a counter stream: a uniform subsample without replacement.
        std::vector<std::uint32_t> idx(P);
        for (std::size_t i = 0; i < P; ++i) idx[i] = std::uint32_t(i);
        CounterRng rng(seed, Stream::PdfSubsample, 0);
        for (std::size_t i = 0; i < m; ++i) {
            std::swap(idx[i], idx[i + rng.below(P - i)]);
            pts[i] = {set.r[idx[i]], set.v[idx[i]]};
        }
    }
    KdeOptions opt;
    opt.boundary = KdeBoundary::Reflect;
    return SmoothPdf(std::move(pts), domain, opt);
}

namespace {

SolverRow diagnose(const KineticParticleSet& set, const DomainSpec& domain, const SolverDiagnostics& diag,
                   std::uint64_t seed, int step) {
    SolverRow row;
    row.step = step;
    row.t = set.t;
    row.moments = velocity_moments(set);
    const std::uint64_t s = derive_seed(seed, 0x5000u + (diag.common_random_numbers ? 0u : std::uint64_t(step)));
    const SmoothPdf pdf = particle_pdf(set, domain, diag.subsample, s);
    row.S = bs_entropy(pdf, diag.A1, diag.entropy_samples, derive_seed(s, 1));
    std::vector<PhasePoint> pts(set.size());
    for (std::size_t i = 0; i < set.size(); ++i) pts[i] = {set.r[i], set.v[i]};
    row.maxwellian = fit_maxwellian(pts, domain);
    row.dist_maxwellian = distance_to_maxwellian(pdf, row.maxwellian.params, diag.distance_samples, derive_seed(s, 2));
    return row;
}

}  // namespace

SolverRun run_solver(KineticParticleSet& set, const CollisionKernelConfig& cfg, int steps, std::uint64_t seed,
                     const SolverDiagnostics& diag, const SnapshotHook& hook, Exec exec) {
    if (steps < 0) throw ConfigError(std::string("solver.steps: must be non-negative"));
    cfg.validate(set);
    set.validate(cfg.domain);
    SolverRun out;
    OccupationSource occ;
    occ.constant = cfg.k2_constant;
    const bool field = cfg.use_field && set.kernel == KernelMode::Master && cfg.domain.n_particles >= 2;

    auto refresh = [&](int step) {
        const std::uint64_t s = derive_seed(seed, 0x7000u + std::uint64_t(step));
        const SmoothPdf pdf = particle_pdf(set, cfg.domain, cfg.kde_subsample, s);
        OccupationOptions o = cfg.refresh;
        o.seed = derive_seed(s, 1);
        o.exec = exec;
        auto k1 = std::make_shared<OccupationField>(estimate_k1(pdf, o));
        occ.k2 = std::make_shared<PairOccupation>(pdf, *k1, cfg.pool_size, derive_seed(s, 2));
        occ.k1 = std::move(k1);
        ++out.refreshes;
    };

    std::uint64_t since = 0;
    out.rows.push_back(diagnose(set, cfg.domain, diag, seed, 0));
    if (hook) hook(set, 0);
    for (int step = 1; step <= steps; ++step) {
        if (field && (step - 1) % cfg.refresh_every == 0) refresh(step - 1);
        stream_and_reflect(set, cfg.dt, cfg.domain, exec);
        const CollideStats st = collide_step(set, cfg, occ, seed, std::uint64_t(step), exec);
        out.totals.candidates += st.candidates;
        out.totals.accepted += st.accepted;
        out.totals.wall_rejected += st.wall_rejected;
        out.totals.majorant_raises += st.majorant_raises;
        since += st.accepted;
        if (hook) hook(set, step);
        const bool last = step == steps;
        if (last || (diag.every > 0 && step % diag.every == 0)) {
            out.rows.push_back(diagnose(set, cfg.domain, diag, seed, step));
            out.rows.back().collisions = since;
            since = 0;
        }
    }
    set.validate(cfg.domain);
    if (out.totals.candidates > 0)
        out.wall_rejected_fraction = double(out.totals.wall_rejected) / double(out.totals.candidates);
    return out;
}

void write_particles_csv(std::ostream& os, const KineticParticleSet& set, bool header) {
    if (header) os << "t,x,y,z,vx,vy,vz,w\n";
    for (std::size_t i = 0; i < set.size(); ++i) {
        os << fmt_double(set.t);
        for (int a = 0; a < 3; ++a) os << ',' << fmt_double(set.r[i][a]);
        for (int a = 0; a < 3; ++a) os << ',' << fmt_double(set.v[i][a]);
        os << ',' << fmt_double(set.w[i]) << '\n';
    }
}

}  // namespace finitekin
