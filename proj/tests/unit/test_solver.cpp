#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <limits>
#include <sstream>

#include "finitekin/core/error.hpp"
#include "finitekin/solver.hpp"

using namespace finitekin;

namespace {

DomainSpec box8() {
    DomainSpec d;
    d.n_particles = 8;
    return d;
}

ProfilePdf aniso_pdf(const DomainSpec& d, Vec3 temperature = {1.8, 0.6, 0.6}) {
    InitialPdfSpec spec;
    spec.velocity.temperature = temperature;
    return ProfilePdf(spec, d, d.n_particles);
}

SolverDiagnostics cheap_diag() {
    SolverDiagnostics g;
    g.subsample = 500;
    g.entropy_samples = 500;
    g.distance_samples = 500;
    return g;
}

CollisionKernelConfig cheap_master(const DomainSpec& d, double dt) {
    auto cfg = CollisionKernelConfig::master(d, dt);
    cfg.kde_subsample = 1024;
    cfg.pool_size = 1024;
    cfg.refresh.samples = 100'000;
    return cfg;
}

struct Totals {
    Vec3 p;
    double e = 0.0;
};

Totals totals(const KineticParticleSet& s) {
    Totals t;
    for (std::size_t i = 0; i < s.size(); ++i) {
        t.p += s.w[i] * s.v[i];
        t.e += s.w[i] * norm2(s.v[i]);
    }
    return t;
}

KineticParticleSet single(const Vec3& r, const Vec3& v) {
    KineticParticleSet s;
    s.r = {r};
    s.v = {v};
    s.w = {1.0};
    return s;
}

}  // namespace

TEST_CASE("stream: rest, free flight and reflections") {
    const DomainSpec d = box8();  // admissible [0.5, 9.5]^3
    auto s = single({3, 4, 5}, {});
    stream_and_reflect(s, 2.0, d);
    CHECK(s.r[0] == Vec3{3, 4, 5});
    CHECK(s.t == 2.0);

    s = single({3, 4, 5}, {0.5, -0.25, 1.0});
    stream_and_reflect(s, 2.0, d, Exec::Serial);
    CHECK(norm(s.r[0] - Vec3{4, 3.5, 7}) <= 1e-14);

    // Hits x = 0.5 after 0.2, then travels 0.3 back in.
    s = single({0.7, 5, 5}, {-1.0, 0, 0});
    stream_and_reflect(s, 0.5, d);
    CHECK(s.r[0].x == doctest::Approx(0.8).epsilon(1e-14));
    CHECK(s.v[0].x == 1.0);

    // Two reflections along z: 9.0 -> 9.5 -> 0.5 -> 2.0, path length 11.
    s = single({5, 5, 9.0}, {0, 0, 11.0});
    stream_and_reflect(s, 1.0, d);
    CHECK(s.r[0].z == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(s.v[0].z == 11.0);

    // Corner: both axes reflect, speed preserved.
    s = single({9.4, 0.6, 5}, {1.0, -1.0, 0.3});
    const double speed = norm(s.v[0]);
    stream_and_reflect(s, 0.3, d);
    CHECK(s.r[0].x == doctest::Approx(9.3).epsilon(1e-14));
    CHECK(s.r[0].y == doctest::Approx(0.7).epsilon(1e-14));
    CHECK(norm(s.v[0]) == doctest::Approx(speed).epsilon(1e-15));

    s = single({5, 5, 5}, {std::numeric_limits<double>::quiet_NaN(), 0, 0});
    CHECK_THROWS_AS(stream_and_reflect(s, 0.1, d), NumericalFault);
}

TEST_CASE("stream: random paths stay admissible and match the unfolded oracle") {
    const DomainSpec d = box8();
    const auto pdf = aniso_pdf(d, {4, 4, 4});
    auto s = make_particle_set(pdf, 5000, 3);
    const auto r0 = s.r, v0 = s.v;
    stream_and_reflect(s, 3.7, d);
    const double L = 9.0, lo = 0.5;
    for (std::size_t i = 0; i < s.size(); ++i) {
        CHECK(d.inside_admissible(s.r[i]));
        for (int a = 0; a < 3; ++a) {
            // Unfolded coordinate on the circle of circumference 2L.
            double y = std::fmod(r0[i][a] - lo + v0[i][a] * 3.7, 2 * L);
            if (y < 0) y += 2 * L;
            const double expect = y <= L ? lo + y : lo + 2 * L - y;
            CHECK(std::fabs(s.r[i][a] - expect) <= 1e-12);
            CHECK(std::fabs(std::fabs(s.v[i][a]) - std::fabs(v0[i][a])) == 0.0);
        }
    }
}

TEST_CASE("particle set construction and invariants") {
    const DomainSpec d = box8();
    const auto pdf = aniso_pdf(d);
    auto s = make_particle_set(pdf, 1000, 9);
    CHECK(s.size() == 1000);
    CHECK_NOTHROW(s.validate(d));
    s.r[3] = {0.2, 5, 5};
    CHECK_THROWS_AS(s.validate(d), NumericalFault);
    s.r[3] = {5, 5, 5};
    s.w[0] *= 2;
    CHECK_THROWS_AS(s.validate(d), InvariantViolation);
    CHECK_THROWS_AS(make_particle_set(pdf, 0, 1), ConfigError);

    // Sum of 2e5 equal weights is 1 to the compensated-summation tolerance.
    auto big = make_particle_set(pdf, 200'000, 9);
    CHECK_NOTHROW(big.validate(d));
}

TEST_CASE("config validation") {
    const DomainSpec d = box8();
    const auto s = make_particle_set(aniso_pdf(d), 2000, 1);
    const double tau = mean_free_time(s, d);
    CHECK(tau > 5.0);
    CHECK(tau < 50.0);
    CHECK_NOTHROW(CollisionKernelConfig::master(d, 0.19 * tau).validate(s));
    CHECK_THROWS_AS(CollisionKernelConfig::master(d, 0.21 * tau).validate(s), ConfigError);
    auto c = CollisionKernelConfig::boltzmann(d, 1.0);
    c.cell_size = 0;
    CHECK_THROWS_AS(c.validate(s), ConfigError);
    c = CollisionKernelConfig::boltzmann(d, 1.0);
    c.k2_constant = 1.5;
    CHECK_THROWS_AS(c.validate(s), ConfigError);
    c = CollisionKernelConfig::boltzmann(d, -1.0);
    CHECK_THROWS_AS(c.validate(s), ConfigError);
}

TEST_CASE("collide: trivial cases") {
    const DomainSpec d = box8();
    KineticParticleSet empty;
    OccupationSource occ;
    CHECK(collide_step(empty, CollisionKernelConfig::boltzmann(d, 1.0), occ, 1, 1).accepted == 0);

    auto s = make_particle_set(aniso_pdf(d), 5000, 2);
    const auto v0 = s.v;
    occ.constant = 0.0;
    const auto st = collide_step(s, CollisionKernelConfig::boltzmann(d, 1.0), occ, 1, 1);
    CHECK(st.accepted == 0);
    CHECK(s.v == v0);

    DomainSpec one = d;
    one.n_particles = 1;
    CHECK(collide_step(s, CollisionKernelConfig::boltzmann(one, 1.0), OccupationSource{}, 1, 1).candidates == 0);
}

TEST_CASE("collide: exact conservation, weights and determinism") {
    const DomainSpec d = box8();
    for (Cbc cbc : {Cbc::Causal, Cbc::Anticausal}) {
        auto s = make_particle_set(aniso_pdf(d), 20000, 4, KernelMode::Boltzmann, cbc);
        const Totals t0 = totals(s);
        auto serial = s;
        std::uint64_t accepted = 0;
        for (int step = 1; step <= 10; ++step) {
            accepted += collide_step(s, CollisionKernelConfig::boltzmann(d, 1.0), {}, 5, step).accepted;
            collide_step(serial, CollisionKernelConfig::boltzmann(d, 1.0), {}, 5, step, Exec::Serial);
        }
        CHECK(accepted > 5000);
        const Totals t1 = totals(s);
        CHECK(norm(t1.p - t0.p) <= 1e-12 * std::sqrt(t0.e));
        CHECK(std::fabs(t1.e - t0.e) <= 1e-12 * t0.e);
        CHECK_NOTHROW(s.validate(d));
        CHECK(s.v == serial.v);
    }
}

TEST_CASE("master kernel reduces to the boltzmann kernel") {
    const DomainSpec d = box8();
    const auto pdf = aniso_pdf(d);
    auto a = make_particle_set(pdf, 20000, 6, KernelMode::Master);
    auto b = make_particle_set(pdf, 20000, 6, KernelMode::Boltzmann);
    auto cm = CollisionKernelConfig::master(d, 1.0);
    cm.displacement = 0.0;
    cm.wall_theta = false;
    cm.use_field = false;
    cm.k2_constant = 1.0;
    const auto ra = run_solver(a, cm, 5, 8, cheap_diag());
    const auto rb = run_solver(b, CollisionKernelConfig::boltzmann(d, 1.0), 5, 8, cheap_diag());
    CHECK(ra.totals.accepted == rb.totals.accepted);
    CHECK(a.v == b.v);
    CHECK(a.r == b.r);
    CHECK(ra.refreshes == 0);
}

TEST_CASE("master mode: field refresh, wall rejections, serial equals parallel") {
    const DomainSpec d = box8();
    const auto pdf = aniso_pdf(d);
    auto a = make_particle_set(pdf, 20000, 7);
    auto b = a;
    auto cfg = cheap_master(d, 1.0);
    cfg.refresh_every = 2;
    const auto ra = run_solver(a, cfg, 4, 3, cheap_diag(), {}, Exec::Parallel);
    const auto rb = run_solver(b, cfg, 4, 3, cheap_diag(), {}, Exec::Serial);
    CHECK(ra.refreshes == 2);
    CHECK(ra.totals.accepted > 1000);
    // About 1/6 of displaced partners land outside the admissible box for a uniform gas (box 9, sigma 1).
    CHECK(ra.wall_rejected_fraction > 0.1);
    CHECK(ra.wall_rejected_fraction < 0.25);
    CHECK(a.v == b.v);
    CHECK(ra.rows.back().S.value == rb.rows.back().S.value);

    auto c = make_particle_set(pdf, 20000, 7, KernelMode::Boltzmann);
    CHECK(run_solver(c, CollisionKernelConfig::boltzmann(d, 1.0), 4, 3, cheap_diag()).wall_rejected_fraction == 0.0);
}

TEST_CASE("master mode: Maxwellian moments do not drift") {
    const DomainSpec d = box8();
    auto s = make_particle_set(aniso_pdf(d, {1, 1, 1}), 20000, 11);
    const auto m0 = velocity_moments(s);
    const double e0 = totals(s).e;
    auto cfg = cheap_master(d, 1.0);
    const auto run = run_solver(s, cfg, 100, 12, cheap_diag());
    CHECK(run.totals.accepted > 50000);  // ~6 collisions per particle
    const auto m1 = velocity_moments(s);
    // Walls reverse momentum but keep every speed.
    CHECK(std::fabs(totals(s).e - e0) <= 1e-12 * e0);
    for (int a = 0; a < 3; ++a) {
        CHECK(std::fabs(m1.mean[a] - m0.mean[a]) <= 3.0 * std::hypot(m0.mean_err[a], m1.mean_err[a]));
        for (int b = a; b < 3; ++b) {
            const double err = std::hypot(m0.cov_err[a][b], m1.cov_err[a][b]);
            CHECK(std::fabs(m1.cov[a][b] - m0.cov[a][b]) <= 3.0 * err);
        }
    }
}

TEST_CASE("boltzmann mode: entropy non-decreasing, relaxation toward isotropy") {
    const DomainSpec d = box8();
    auto s = make_particle_set(aniso_pdf(d), 20000, 13, KernelMode::Boltzmann);
    SolverDiagnostics diag;
    diag.every = 10;
    diag.subsample = 4000;
    diag.entropy_samples = 4000;
    diag.distance_samples = 2000;
    const auto run = run_solver(s, CollisionKernelConfig::boltzmann(d, 1.0), 40, 14, diag);
    REQUIRE(run.rows.size() == 5);
    for (std::size_t k = 1; k < run.rows.size(); ++k) {
        const auto &p = run.rows[k - 1], &q = run.rows[k];
        CHECK(q.S.value >= p.S.value - 3.0 * std::hypot(p.S.stderr_, q.S.stderr_));
        CHECK(q.moments.cov[0][0] < p.moments.cov[0][0]);
        CHECK(q.t == doctest::Approx(10.0 * k));
    }
    const double dS = run.rows.back().S.value - run.rows.front().S.value;
    CHECK(dS > 3.0 * std::hypot(run.rows.back().S.stderr_, run.rows.front().S.stderr_));
}

TEST_CASE("step-size robustness") {
    const DomainSpec d = box8();
    const auto pdf = aniso_pdf(d);
    auto a = make_particle_set(pdf, 20000, 15, KernelMode::Boltzmann);
    auto b = a;
    run_solver(a, CollisionKernelConfig::boltzmann(d, 1.0), 20, 16, cheap_diag());
    run_solver(b, CollisionKernelConfig::boltzmann(d, 0.5), 40, 17, cheap_diag());
    CHECK(a.t == doctest::Approx(b.t));
    const auto ma = velocity_moments(a), mb = velocity_moments(b);
    for (int k = 0; k < 3; ++k)
        CHECK(std::fabs(ma.cov[k][k] - mb.cov[k][k]) <= 2.0 * std::hypot(ma.cov_err[k][k], mb.cov_err[k][k]));
    // The relaxation itself is far outside that band.
    CHECK(ma.cov[0][0] < 1.8 - 10 * ma.cov_err[0][0]);
}

TEST_CASE("anticausal run of the reversed set mirrors the causal run") {
    const DomainSpec d = box8();
    const auto pdf = aniso_pdf(d);
    auto fwd = make_particle_set(pdf, 20000, 18, KernelMode::Boltzmann, Cbc::Causal);
    auto rev = fwd;
    rev.cbc = Cbc::Anticausal;
    for (auto& v : rev.v) v = -v;
    run_solver(fwd, CollisionKernelConfig::boltzmann(d, 1.0), 20, 19, cheap_diag());
    run_solver(rev, CollisionKernelConfig::boltzmann(d, 1.0), 20, 20, cheap_diag());
    for (auto& v : rev.v) v = -v;
    const auto mf = velocity_moments(fwd), mr = velocity_moments(rev);
    for (int a = 0; a < 3; ++a) {
        CHECK(std::fabs(mf.mean[a] - mr.mean[a]) <= 3.0 * std::hypot(mf.mean_err[a], mr.mean_err[a]));
        CHECK(std::fabs(mf.cov[a][a] - mr.cov[a][a]) <= 3.0 * std::hypot(mf.cov_err[a][a], mr.cov_err[a][a]));
    }
}

TEST_CASE("hooks and snapshot export") {
    const DomainSpec d = box8();
    auto s = make_particle_set(aniso_pdf(d), 100, 21, KernelMode::Boltzmann);
    int calls = 0;
    run_solver(s, CollisionKernelConfig::boltzmann(d, 1.0), 3, 22, cheap_diag(),
               [&](const KineticParticleSet& x, int step) {
                   CHECK(x.t == doctest::Approx(step * 1.0));
                   ++calls;
               });
    CHECK(calls == 4);
    std::ostringstream os;
    write_particles_csv(os, s);
    std::istringstream is(os.str());
    std::string line;
    std::getline(is, line);
    CHECK(line == "t,x,y,z,vx,vy,vz,w");
    int rows = 0;
    while (std::getline(is, line)) ++rows;
    CHECK(rows == 100);
    CHECK_THROWS_AS(run_solver(s, CollisionKernelConfig::boltzmann(d, 1.0), -1, 1), ConfigError);
}
