#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numbers>
#include <sstream>

#include <json.hpp>

#include "finitekin/core/error.hpp"
#include "finitekin/occupation.hpp"

using namespace finitekin;

namespace {

constexpr double kPi = std::numbers::pi;

DomainSpec box(double side, int n, double sigma = 1.0) {
    DomainSpec d;
    d.box_hi = {side, side, side};
    d.sigma = sigma;
    d.n_particles = n;
    return d;
}

InitialPdfSpec profile(SpatialKind kind, double slope) {
    InitialPdfSpec s;
    s.spatial.kind = kind;
    s.spatial.slope = slope;
    return s;
}

OccupationOptions opts(int grid, std::uint64_t samples, std::uint64_t seed = 1) {
    OccupationOptions o;
    o.grid = grid;
    o.samples = samples;
    o.seed = seed;
    o.exec = Exec::Serial;
    return o;
}

void check_field_invariants(const OccupationField& f) {
    REQUIRE(f.converged);
    for (std::size_t c = 0; c < f.values.size(); ++c) {
        CHECK(f.values[c] > 0.0);
        CHECK(f.values[c] <= 1.0);
    }
    for (std::size_t i = 3; i < f.residuals.size(); ++i) CHECK(f.residuals[i] <= f.residuals[i - 1]);
}

// Integral of q over the union of balls of radius sigma around the centers, by
// uniform sampling of the bounding box.
Estimate union_integral(const PhaseSpaceDensity& pdf, const OccupationField& f, std::vector<Vec3> centers,
                        double sigma, std::uint64_t n) {
    Vec3 lo = centers[0], hi = centers[0];
    for (const auto& c : centers)
        for (int a = 0; a < 3; ++a) lo[a] = std::min(lo[a], c[a]), hi[a] = std::max(hi[a], c[a]);
    lo -= Vec3{sigma, sigma, sigma};
    hi += Vec3{sigma, sigma, sigma};
    const Vec3 e = hi - lo;
    const double vol = e.x * e.y * e.z;
    CounterRng rng(99, Stream::Test, 7);
    double s = 0.0, s2 = 0.0;
    for (std::uint64_t i = 0; i < n; ++i) {
        const Vec3 x{rng.uniform(lo.x, hi.x), rng.uniform(lo.y, hi.y), rng.uniform(lo.z, hi.z)};
        bool in = false;
        for (const auto& c : centers) in = in || norm(x - c) <= sigma;
        const double v = in ? vol * f.q(pdf, x) : 0.0;
        s += v;
        s2 += v * v;
    }
    const double m = s / double(n);
    return {m, std::sqrt(std::max(0.0, s2 / double(n) - m * m) / double(n))};
}

// Cosine mode along x with a flux field vanishing at the admissible faces, so
// the box mass is conserved. Positions by inverse CDF so that nearby amplitudes
// give nearby samples for the same random numbers.
class Slosh final : public PhaseSpaceDensity {
public:
    Slosh(const DomainSpec& d, double amplitude, double flux_amplitude)
        : d_(d), a_(amplitude), j_(flux_amplitude), lo_(d.admissible_lo()), len_(d.admissible_hi() - d.admissible_lo()) {}

    const DomainSpec& domain() const override { return d_; }
    double mass() const override { return double(d_.n_particles); }
    PointDerivs eval(const Vec3& r, const Vec3&) const override { return spatial(r); }
    PointDerivs spatial(const Vec3& r) const override {
        if (!d_.inside_admissible(r)) return {};
        const double c = mass() / d_.admissible_volume(), k = kPi / len_.x, xi = (r.x - lo_.x) * k;
        return {c * (1 + a_ * std::cos(xi)), Vec3{-c * a_ * k * std::sin(xi), 0, 0}, -c * a_ * k * k * std::cos(xi)};
    }
    PointDerivs directional_moment(const Vec3&, const Vec3&) const override { return {}; }
    Vec3 flux(const Vec3& r) const override {
        if (!d_.inside_admissible(r)) return {};
        const double c = mass() / d_.admissible_volume();
        return {c * j_ * std::sin(kPi * (r.x - lo_.x) / len_.x), 0, 0};
    }
    PhasePoint sample(CounterRng& rng) const override { return {sample_position(rng), {}}; }
    Vec3 sample_position(CounterRng& rng) const override {
        const double u = rng.uniform();
        double a = 0.0, b = 1.0;
        for (int it = 0; it < 60; ++it) {
            const double m = 0.5 * (a + b);
            (m + a_ / kPi * std::sin(kPi * m) < u ? a : b) = m;
        }
        return {lo_.x + 0.5 * (a + b) * len_.x, lo_.y + rng.uniform() * len_.y, lo_.z + rng.uniform() * len_.z};
    }
    Vec3 velocity_mean() const override { return {}; }
    Vec3 velocity_std() const override { return {1, 1, 1}; }

    // Amplitude after time t under the continuity equation.
    double amplitude_at(double t) const { return a_ - j_ * kPi / len_.x * t; }

private:
    DomainSpec d_;
    double a_, j_;
    Vec3 lo_, len_;
};

OccupationField hand_field(int n, double (*fn)(const Vec3&)) {
    OccupationField f;
    f.grid = {{0, 0, 0}, {double(n), double(n), double(n)}, n};
    f.values.resize(f.grid.size());
    for (int k = 0; k < n; ++k)
        for (int j = 0; j < n; ++j)
            for (int i = 0; i < n; ++i) f.values[f.grid.index(i, j, k)] = fn(f.grid.center(i, j, k));
    f.errors.assign(f.grid.size(), 0.0);
    f.weights = f.values;
    return f;
}

double quadratic(const Vec3& r) { return 0.3 + 0.02 * r.x - 0.01 * r.y * r.y + 0.005 * r.x * r.z + 0.004 * r.z * r.z; }
double linear(const Vec3& r) { return 0.5 + 0.01 * r.x - 0.02 * r.y + 0.03 * r.z; }

}  // namespace

TEST_CASE("grid stencils and interpolants are exact on low-order fields") {
    const auto f = hand_field(8, quadratic);
    const Vec3 p{3.3, 4.1, 3.7};
    const auto k = f.k1(p);
    CHECK(k.value == doctest::Approx(quadratic(p)).epsilon(1e-12));
    CHECK(k.grad.x == doctest::Approx(0.02 + 0.005 * p.z).epsilon(1e-10));
    CHECK(k.grad.y == doctest::Approx(-0.02 * p.y).epsilon(1e-10));
    CHECK(k.grad.z == doctest::Approx(0.005 * p.x + 0.008 * p.z).epsilon(1e-10));
    CHECK(k.lap == doctest::Approx(-0.02 + 0.008).epsilon(1e-10));
    const Vec3 c = f.grid.center(4, 3, 4);
    const Vec3 g = f.grid_gradient(4, 3, 4);
    CHECK(g.x == doctest::Approx(0.02 + 0.005 * c.z).epsilon(1e-12));
    CHECK(g.y == doctest::Approx(-0.02 * c.y).epsilon(1e-12));
    CHECK(f.grid_laplacian(4, 3, 4) == doctest::Approx(-0.012).epsilon(1e-10));
    CHECK(f.grid_laplacian(4, 3, 4, 1) == doctest::Approx(-0.012).epsilon(1e-10));

    const auto l = hand_field(5, linear);
    const Vec3 r{1.2, 3.9, 2.5};
    CHECK(l.weight_k(r) == doctest::Approx(linear(r)).epsilon(1e-12));
    const Vec3 wg = l.weight_k_gradient(r);
    CHECK(wg.x == doctest::Approx(0.01).epsilon(1e-12));
    CHECK(wg.y == doctest::Approx(-0.02).epsilon(1e-12));
    CHECK(wg.z == doctest::Approx(0.03).epsilon(1e-12));
}

TEST_CASE("N=2 dilute k1 equals one minus the excluded q-mass") {
    const auto d = box(10.0, 2);
    const ProfilePdf pdf(InitialPdfSpec{}, d, 2.0);
    const auto f = estimate_k1(pdf, opts(9, 1'000'000));
    check_field_invariants(f);
    const Vec3 c = f.grid.center(4, 4, 4);
    const Estimate oracle = union_integral(pdf, f, {c}, 1.0, 400'000);
    CHECK(std::fabs(f.at(4, 4, 4) - (1.0 - oracle.value)) <= 3.0 * std::hypot(f.error_at(4, 4, 4), oracle.stderr_));
    // Uniform q: 1 - v_excl / V_adm, up to the small weight non-uniformity.
    CHECK(f.at(4, 4, 4) == doctest::Approx(1.0 - 4.0 / 3.0 * kPi / d.admissible_volume()).epsilon(1e-3));
    // The sphere around a near-wall node is partly outside the admissible box.
    CHECK(f.at(0, 4, 4) > f.at(4, 4, 4));
}

TEST_CASE("k2 is exactly one for N=2") {
    const auto d = box(10.0, 2);
    const ProfilePdf pdf(profile(SpatialKind::Ramp, 0.1), d, 2.0);
    const auto f = estimate_k1(pdf, opts(5, 100'000));
    const PairOccupation pool(pdf, f, 100, 3);
    CHECK(pool.is_constant());
    CounterRng rng(5, Stream::Test, 0);
    for (int i = 0; i < 1000; ++i) {
        const Vec3 r1{rng.uniform(0.5, 9.5), rng.uniform(0.5, 9.5), rng.uniform(0.5, 9.5)};
        const Vec3 r2 = r1 + rng.unit_vector() * rng.uniform(1.0, 3.0);
        const Estimate e = estimate_k2(pdf, f, r1, r2, 1000, 1);
        REQUIRE(e.value == 1.0);
        REQUIRE(e.stderr_ == 0.0);
        const Estimate p = pool.estimate(r1, r2, 10, 1);
        REQUIRE(p.value == 1.0);
        REQUIRE(p.stderr_ == 0.0);
    }
}

TEST_CASE("N=3 contact k2 equals one minus the union q-mass") {
    const auto d = box(10.0, 3);
    const ProfilePdf pdf(InitialPdfSpec{}, d, 3.0);
    const auto f = estimate_k1(pdf, opts(9, 400'000));
    check_field_invariants(f);
    const Vec3 c = d.center(), h{0.5, 0, 0};
    const Estimate k2 = estimate_k2(pdf, f, c - h, c + h, 1'000'000, 4);
    const Estimate oracle = union_integral(pdf, f, {c - h, c + h}, 1.0, 400'000);
    CHECK(std::fabs(k2.value - (1.0 - oracle.value)) <= 3.0 * std::hypot(k2.stderr_, oracle.stderr_));
    const double v_union = 8.0 / 3.0 * kPi - 5.0 * kPi / 12.0;
    CHECK(k2.value == doctest::Approx(1.0 - v_union / d.admissible_volume()).epsilon(2e-3));

    // The exact pool sampler agrees with the direct ratio estimator.
    const PairOccupation pool(pdf, f, 20'000, 8);
    const Estimate p = pool.estimate(c - h, c + h, 200'000, 2);
    CHECK(std::fabs(p.value - k2.value) <= 3.0 * std::hypot(p.stderr_, k2.stderr_) + 2e-3);
}

TEST_CASE("k2 is exchange symmetric") {
    const auto d = box(10.0, 6);
    const ProfilePdf pdf(profile(SpatialKind::Ramp, 0.12), d, 6.0);
    const auto f = estimate_k1(pdf, opts(7, 200'000));
    const Vec3 r1{3.0, 5.0, 5.0}, r2{4.3, 5.4, 4.8};
    const Estimate a = estimate_k2(pdf, f, r1, r2, 400'000, 11);
    const Estimate b = estimate_k2(pdf, f, r2, r1, 400'000, 12);
    CHECK(std::fabs(a.value - b.value) <= 3.0 * std::hypot(a.stderr_, b.stderr_));
    CHECK(a.value > 0.0);
    CHECK(a.value <= 1.0);
}

TEST_CASE("fixed point is independent of the starting value") {
    const auto d = box(10.0, 8);
    const ProfilePdf pdf(profile(SpatialKind::Ramp, 0.1), d, 8.0);
    auto o = opts(7, 200'000);
    const auto f1 = estimate_k1(pdf, o);
    o.k_init = 0.5;
    const auto f2 = estimate_k1(pdf, o);
    check_field_invariants(f1);
    check_field_invariants(f2);
    CHECK(f2.iterations > f1.iterations);
    for (std::size_t c = 0; c < f1.values.size(); ++c) {
        CHECK(std::fabs(f1.values[c] - f2.values[c]) <= 2.0 * std::hypot(f1.errors[c], f2.errors[c]));
    }
}

TEST_CASE("serial and parallel builds are bit-identical") {
    const auto d = box(10.0, 20, 1.0);
    const ProfilePdf pdf(profile(SpatialKind::Exponential, 0.1), d, 20.0);
    auto o = opts(5, 40'000);
    const auto a = estimate_k1(pdf, o);
    o.exec = Exec::Parallel;
    const auto b = estimate_k1(pdf, o);
    CHECK(a.values == b.values);
    CHECK(a.errors == b.errors);
    CHECK(a.residuals == b.residuals);
}

TEST_CASE("k1 decreases as the spheres grow") {
    std::vector<double> k;
    for (double s : {0.5, 1.0, 1.5, 2.0}) {
        const auto d = box(10.0, 4, s);
        const ProfilePdf pdf(InitialPdfSpec{}, d, 4.0);
        const auto f = estimate_k1(pdf, opts(5, 100'000));
        k.push_back(f.at(2, 2, 2));
    }
    for (std::size_t i = 1; i < k.size(); ++i) CHECK(k[i] < k[i - 1]);
}

TEST_CASE("non-convergence and bad options raise") {
    const auto d = box(10.0, 6);
    const ProfilePdf pdf(InitialPdfSpec{}, d, 6.0);
    auto o = opts(5, 20'000);
    o.max_iterations = 1;
    o.tolerance = 1e-9;
    CHECK_THROWS_AS(estimate_k1(pdf, o), NumericalFault);
    o = opts(0, 20'000);
    o.damping = 0.0;
    try {
        estimate_k1(pdf, o);
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        CHECK(e.problems().size() == 2);
    }
    const auto f = estimate_k1(pdf, opts(5, 20'000));
    CHECK_THROWS_AS(estimate_k2(pdf, f, d.center(), d.center() + Vec3{0.5, 0, 0}, 100, 1), ConfigError);
}

TEST_CASE("gradient identity") {
    SUBCASE("uniform density far from walls gives zero on both sides") {
        const auto d = box(10.0, 4);
        const ProfilePdf pdf(InitialPdfSpec{}, d, 4.0);
        const auto f = estimate_k1(pdf, opts(7, 400'000));
        const auto rep = check_grad_k1_identity(pdf, f, d.center(), 400'000, 3, Exec::Serial);
        // Scale of a ramp signal at this density, for comparison.
        const double scale = 3.0 * 4.0 / 3.0 * kPi * 0.15 / d.admissible_volume();
        CHECK(norm(rep.lhs) < 0.1 * scale);
        CHECK(norm(rep.rhs) < 0.02 * scale);
    }
    SUBCASE("linear ramp, N=4") {
        const auto d = box(10.0, 4);
        const ProfilePdf pdf(profile(SpatialKind::Ramp, 0.15), d, 4.0);
        const auto f = estimate_k1(pdf, opts(7, 1'000'000));
        check_field_invariants(f);
        const auto rep = check_grad_k1_identity(pdf, f, d.center(), 1'000'000, 7, Exec::Serial);
        CHECK(rep.rhs.x < 0.0);
        CHECK(rep.discrepancy <= 0.05);
    }
    SUBCASE("linear ramp, N=2 uses k2 = 1") {
        const auto d = box(10.0, 2);
        const ProfilePdf pdf(profile(SpatialKind::Ramp, 0.15), d, 2.0);
        const auto f = estimate_k1(pdf, opts(7, 1'000'000));
        const auto rep = check_grad_k1_identity(pdf, f, d.center(), 1'000'000, 7, Exec::Serial);
        CHECK(rep.discrepancy <= 0.05);
    }
}

TEST_CASE("laplacian identity") {
    SUBCASE("exponential profile, N=4") {
        const auto d = box(10.0, 4);
        const ProfilePdf pdf(profile(SpatialKind::Exponential, 0.25), d, 4.0);
        const auto f = estimate_k1(pdf, opts(7, 1'000'000));
        const auto rep = check_laplacian_identity(pdf, f, d.center(), 1'000'000, 9, Exec::Serial);
        CHECK(rep.rhs.x < 0.0);
        CHECK(rep.discrepancy <= 0.10);
    }
    SUBCASE("exponential profile, N=2") {
        const auto d = box(10.0, 2);
        const ProfilePdf pdf(profile(SpatialKind::Exponential, 0.25), d, 2.0);
        const auto f = estimate_k1(pdf, opts(7, 1'000'000));
        const auto rep = check_laplacian_identity(pdf, f, d.center(), 1'000'000, 9, Exec::Serial);
        CHECK(rep.discrepancy <= 0.10);
    }
}

TEST_CASE("streaming identity") {
    const auto d = box(10.0, 4);
    SUBCASE("sloshing mode: time and transport terms match the flux integral") {
        const double dt = 0.1;
        const Slosh now(d, 0.5, 1.5);
        const Slosh before(d, now.amplitude_at(-dt), 0.0), after(d, now.amplitude_at(dt), 0.0);
        const auto f = estimate_k1(now, opts(7, 1'000'000));
        const auto fb = reevaluate_k1(before, f, 1'000'000, 1, Exec::Serial);
        const auto fa = reevaluate_k1(after, f, 1'000'000, 1, Exec::Serial);
        const Vec3 r1 = f.grid.center(1, 3, 3), v1{0.4, 0.3, 0.0};
        const auto rep = check_streaming_identity(now, f, fb, fa, dt, r1, v1, 1'000'000, 5, Exec::Serial);
        CHECK(std::fabs(rep.rhs.x) > 5.0 * rep.rhs_err.x);
        CHECK(rep.discrepancy <= 0.10);
        // Without the transport velocity only the time term remains.
        const auto rest = check_streaming_identity(now, f, fb, fa, dt, r1, {}, 1'000'000, 5, Exec::Serial);
        CHECK(rest.discrepancy <= 0.10);
    }
    SUBCASE("stationary uniform gas gives zero on both sides") {
        const ProfilePdf pdf(InitialPdfSpec{}, d, 4.0);
        const auto f = estimate_k1(pdf, opts(7, 200'000));
        const Vec3 v1{0.5, -0.2, 0.1};
        const auto rep = check_streaming_identity(pdf, f, f, f, 0.1, d.center(), v1, 200'000, 5, Exec::Serial);
        const double scale = 3.0 * 4.0 / 3.0 * kPi * 0.15 * 0.5 / d.admissible_volume();
        CHECK(std::fabs(rep.lhs.x) < 0.2 * scale);
        CHECK(std::fabs(rep.rhs.x) < 0.05 * scale);
    }
}

TEST_CASE("contact derivative of k2") {
    const auto d = box(10.0, 3);
    const ProfilePdf pdf(InitialPdfSpec{}, d, 3.0);
    const auto f = estimate_k1(pdf, opts(9, 200'000));
    const Vec3 c = d.center(), r1 = c - Vec3{0.5, 0, 0};
    const auto rep = check_contact_k2_gradient(pdf, f, r1, {1, 0, 0}, 0.1, 1'000'000, 13, Exec::Serial);
    // Oracle: the union of the two excluded balls shrinks at rate 3*pi*sigma^2/4
    // as the pair closes, so moving r1 alone does not leave k2 stationary.
    const double expected = 0.75 * kPi * f.q(pdf, c);
    CHECK(std::fabs(rep.partial.x - expected) <= 3.5 * rep.partial_err.x + 0.01 * expected);
    CHECK(std::fabs(rep.partial.y) <= 3.5 * rep.partial_err.y + 1e-6);
    // Translating the contact pair in a uniform interior leaves k2 unchanged.
    for (int a = 0; a < 3; ++a) CHECK(std::fabs(rep.translation[a]) <= 3.5 * rep.translation_err[a] + 1e-6);
}

TEST_CASE("BG sweep bookkeeping") {
    CHECK_THROWS_AS(bg_sweep({{4, 1.0}, {16, 0.5}}, box(10.0, 1), InitialPdfSpec{}, opts(5, 10'000), 1000),
                    ConfigError);
    const auto t = bg_sweep({{2, 2.0}, {8, 1.0}, {32, 0.5}}, box(10.0, 1), InitialPdfSpec{}, opts(5, 40'000), 20'000);
    REQUIRE(t.rows.size() == 3);
    CHECK(t.rows[0].k2.value == 1.0);
    CHECK(t.rows[0].k2.stderr_ == 0.0);
    CHECK(t.monotone);
    for (const auto& r : t.rows) {
        CHECK(r.k1.value > 0.0);
        CHECK(r.k1.value <= 1.0);
    }
}

TEST_CASE("export formats") {
    const auto d = box(10.0, 3);
    const ProfilePdf pdf(InitialPdfSpec{}, d, 3.0);
    const auto f = estimate_k1(pdf, opts(3, 20'000));
    std::ostringstream csv;
    write_occupation_csv(csv, f);
    std::istringstream in(csv.str());
    std::string line;
    std::getline(in, line);
    CHECK(line == "x,y,z,k1,stderr");
    int rows = 0;
    while (std::getline(in, line)) ++rows;
    CHECK(rows == 27);

    const auto rep = check_grad_k1_identity(pdf, f, d.center(), 10'000, 1, Exec::Serial);
    std::ostringstream js;
    write_identity_json(js, {rep});
    const auto j = nlohmann::json::parse(js.str());
    REQUIRE(j.size() == 1);
    CHECK(j[0]["identity"] == "grad_k1");
    CHECK(j[0]["samples"] == 10'000);
    CHECK(j[0]["lhs"].size() == 3);
    CHECK(j[0].contains("discrepancy"));
}
