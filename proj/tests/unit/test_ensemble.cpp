#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numbers>

#include "finitekin/core/error.hpp"
#include "finitekin/ensemble.hpp"

using namespace finitekin;

namespace {

DomainSpec box(double side, int n, double sigma = 1.0) {
    DomainSpec d;
    d.box_hi = {side, side, side};
    d.sigma = sigma;
    d.n_particles = n;
    return d;
}

InitialPdfSpec ramp_spec(double slope) {
    InitialPdfSpec s;
    s.spatial.kind = SpatialKind::Ramp;
    s.spatial.slope = slope;
    return s;
}

double rel(double a, double b) { return std::fabs(a - b) / std::max(std::fabs(b), 1e-300); }

class Mixture final : public PhaseSpaceDensity {
public:
    Mixture(const PhaseSpaceDensity& a, const PhaseSpaceDensity& b, double lambda) : a_(a), b_(b), l_(lambda) {}
    const DomainSpec& domain() const override { return a_.domain(); }
    double mass() const override { return a_.mass(); }
    PointDerivs eval(const Vec3& r, const Vec3& v) const override {
        const auto x = a_.eval(r, v), y = b_.eval(r, v);
        return {l_ * x.value + (1 - l_) * y.value, x.grad * l_ + y.grad * (1 - l_), l_ * x.lap + (1 - l_) * y.lap};
    }
    PointDerivs spatial(const Vec3& r) const override { return a_.spatial(r); }
    PointDerivs directional_moment(const Vec3& r, const Vec3& b) const override { return a_.directional_moment(r, b); }
    Vec3 flux(const Vec3& r) const override { return a_.flux(r); }
    PhasePoint sample(CounterRng& rng) const override { return rng.uniform() < l_ ? a_.sample(rng) : b_.sample(rng); }
    Vec3 velocity_mean() const override { return a_.velocity_mean(); }
    Vec3 velocity_std() const override { return a_.velocity_std(); }

private:
    const PhaseSpaceDensity& a_;
    const PhaseSpaceDensity& b_;
    double l_;
};

}  // namespace

TEST_CASE("single particle acceptance equals free-volume fraction") {
    const auto d = box(4.0, 1);
    const auto ens = sample_initial(InitialPdfSpec{}, d, 4000, 5);
    const double p = d.admissible_volume() / d.volume();
    const double se = std::sqrt(p * (1 - p) / double(ens.attempts));
    CHECK(std::fabs(ens.acceptance - p) <= 3.5 * se * (1.0 / p) * p + 3.5 * se);
}

TEST_CASE("dilute N=4 acceptance matches independent volume estimate") {
    const auto d = box(5.0, 4);
    const auto ens = sample_initial(InitialPdfSpec{}, d, 20000, 9);
    for (const auto& tr : ens.replicas) REQUIRE(ensemble_theta(tr.current.r, d, ThetaVariant::A) == 1);
    // Oracle: fraction of uniform box configurations with clearance and no overlap.
    CounterRng rng(123, Stream::Test, 0);
    const int trials = 200000;
    int ok = 0;
    for (int t = 0; t < trials; ++t) {
        Vec3 p[4];
        bool good = true;
        for (auto& x : p) {
            x = {rng.uniform(0, 5), rng.uniform(0, 5), rng.uniform(0, 5)};
            for (int a = 0; a < 3; ++a) good = good && x[a] > 0.5 && x[a] < 4.5;
        }
        for (int i = 0; i < 4 && good; ++i)
            for (int j = i + 1; j < 4; ++j) good = good && norm(p[i] - p[j]) > 1.0;
        ok += good;
    }
    const double po = double(ok) / trials;
    const double se_o = std::sqrt(po * (1 - po) / trials);
    const double pa = ens.acceptance;
    const double se_a = std::sqrt(pa * (1 - pa) / double(ens.attempts));
    CHECK(std::fabs(po - pa) <= 3.0 * std::hypot(se_o, se_a));
}

TEST_CASE("too dense packing raises") {
    const auto d = box(3.0, 27, 1.0);
    CHECK_THROWS_AS(sample_initial(InitialPdfSpec{}, d, 1, 1), NumericalFault);
}

TEST_CASE("sampling and advancement are schedule independent") {
    const auto d = box(10.0, 8);
    auto a = sample_initial(ramp_spec(0.1), d, 32, 77, Exec::Serial);
    auto b = sample_initial(ramp_spec(0.1), d, 32, 77, Exec::Parallel);
    for (std::size_t r = 0; r < 32; ++r) REQUIRE(a.replicas[r].current.r == b.replicas[r].current.r);
    advance(a, 30.0, Exec::Serial);
    advance(b, 30.0, Exec::Parallel);
    for (std::size_t r = 0; r < 32; ++r) {
        REQUIRE(a.replicas[r].current.r == b.replicas[r].current.r);
        REQUIRE(a.replicas[r].current.v == b.replicas[r].current.v);
    }
}

TEST_CASE("kde peaks at a common velocity") {
    const auto d = box(10.0, 8);
    std::vector<PhasePoint> pts;
    CounterRng rng(1, Stream::Test, 0);
    const Vec3 v0{0.3, -0.2, 0.5};
    for (int k = 0; k < 200; ++k) pts.push_back({{rng.uniform(1, 9), rng.uniform(1, 9), rng.uniform(1, 9)}, v0});
    CHECK_THROWS_AS(SmoothPdf(pts, d), NumericalFault);
    KdeOptions opt;
    opt.h_v = {0.8, 0.8, 0.8};
    const SmoothPdf pdf(pts, d, opt);
    const Vec3 r{5, 5, 5};
    const double peak = pdf.value(r, v0);
    for (const Vec3& dv : {Vec3{0.2, 0, 0}, Vec3{0, -0.3, 0}, Vec3{0, 0, 0.1}}) CHECK(pdf.value(r, v0 + dv) < peak);
}

TEST_CASE("kde derivatives match finite differences") {
    const auto d = box(10.0, 8);
    const auto ens = sample_initial(ramp_spec(0.15), d, 64, 3);
    for (auto boundary : {KdeBoundary::None, KdeBoundary::Reflect}) {
        KdeOptions opt;
        opt.boundary = boundary;
        const SmoothPdf pdf = estimate_pdf(ens, opt);
        CounterRng rng(4, Stream::Test, 1);
        for (int k = 0; k < 100; ++k) {
            const PhasePoint x{{rng.uniform(1, 9), rng.uniform(1, 9), rng.uniform(1, 9)}, rng.normal3()};
            const auto e = pdf.eval(x.r, x.v);
            const double h = 1e-5;
            Vec3 fd;
            double lap = 0.0;
            for (int a = 0; a < 3; ++a) {
                Vec3 dr;
                dr[a] = h;
                const auto p = pdf.eval(x.r + dr, x.v), m = pdf.eval(x.r - dr, x.v);
                fd[a] = (p.value - m.value) / (2 * h);
                lap += (p.grad[a] - m.grad[a]) / (2 * h);
            }
            CHECK(norm(fd - e.grad) <= 1e-6 * norm(e.grad) + 1e-14);
            CHECK(std::fabs(lap - e.lap) <= 1e-6 * (std::fabs(e.lap) + norm(e.grad)) + 1e-14);
            const auto s = pdf.spatial(x.r);
            const auto sp = pdf.spatial(x.r + Vec3{h, 0, 0}), sm = pdf.spatial(x.r - Vec3{h, 0, 0});
            CHECK(std::fabs((sp.value - sm.value) / (2 * h) - s.grad.x) <= 1e-6 * norm(s.grad) + 1e-14);
        }
    }
}

TEST_CASE("kde value fast path agrees with eval") {
    const auto d = box(10.0, 8);
    const auto ens = sample_initial(ramp_spec(0.15), d, 64, 3);
    for (auto boundary : {KdeBoundary::None, KdeBoundary::Reflect}) {
        KdeOptions opt;
        opt.boundary = boundary;
        const SmoothPdf pdf = estimate_pdf(ens, opt);
        // Kernels below exp(-40) are skipped under slightly different rules on the two paths.
        const double floor = 1e-15 * pdf.eval(d.center(), {}).value;
        CounterRng rng(5, Stream::Test, 2);
        for (int k = 0; k < 400; ++k) {
            // Includes points inside the wall layer, where image terms matter.
            const Vec3 r{rng.uniform(0.5, 9.5), rng.uniform(0.5, 9.5), rng.uniform(0.5, 9.5)};
            const Vec3 v = rng.normal3() * 1.5;
            const double e = pdf.eval(r, v).value;
            CHECK(std::fabs(pdf.value(r, v) - e) <= 1e-12 * e + floor);
        }
        CHECK(pdf.value({0.4, 5, 5}, {}) == (boundary == KdeBoundary::Reflect ? 0.0 : pdf.eval({0.4, 5, 5}, {}).value));
    }
}

TEST_CASE("kde integrates to N") {
    const auto d = box(10.0, 8);
    const auto ens = sample_initial(InitialPdfSpec{}, d, 64, 8);
    for (auto boundary : {KdeBoundary::None, KdeBoundary::Reflect}) {
        KdeOptions opt;
        opt.boundary = boundary;
        const SmoothPdf pdf = estimate_pdf(ens, opt);
        // Uniform quadrature over a phase box that contains the kernel mass.
        const double pad = boundary == KdeBoundary::None ? 7.0 * pdf.h_r().x : 0.0;
        const Vec3 lo = d.admissible_lo() - Vec3{1, 1, 1} * pad, hi = d.admissible_hi() + Vec3{1, 1, 1} * pad;
        const double vmax = 6.5;
        const double vol = std::pow(hi.x - lo.x, 3) * std::pow(2 * vmax, 3);
        const Estimate I = mc_mean(200000, Exec::Parallel, [&](std::uint64_t i) {
            CounterRng rng(99, Stream::Test, i);
            const Vec3 r{rng.uniform(lo.x, hi.x), rng.uniform(lo.y, hi.y), rng.uniform(lo.z, hi.z)};
            const Vec3 v{rng.uniform(-vmax, vmax), rng.uniform(-vmax, vmax), rng.uniform(-vmax, vmax)};
            return vol * pdf.value(r, v);
        });
        CHECK(std::fabs(I.value - 8.0) <= 3.0 * I.stderr_);
    }
}

TEST_CASE("kde time-reversal covariance") {
    const auto d = box(10.0, 8);
    const auto ens = sample_initial(ramp_spec(0.1), d, 16, 12);
    const SmoothPdf a = estimate_pdf(ens);
    const SmoothPdf b = estimate_pdf(time_reverse(ens));
    CounterRng rng(6, Stream::Test, 0);
    for (int k = 0; k < 50; ++k) {
        const Vec3 r{rng.uniform(1, 9), rng.uniform(1, 9), rng.uniform(1, 9)}, v = rng.normal3();
        CHECK(rel(b.value(r, -v), a.value(r, v)) < 1e-12);
    }
}

TEST_CASE("maxwellian evaluation") {
    const MaxwellianParams p{1.0, 0.5, {0.2, 0, -1}};
    CHECK(maxwellian_eval(p.V_o, p, 1.0) == doctest::Approx(std::pow(std::numbers::pi, -1.5)));
    const MaxwellianParams q{2.5, 1.3, {0.5, -0.5, 0}};
    CHECK(maxwellian_eval(q.V_o, q, 2.0) ==
          doctest::Approx(2.5 * std::pow(std::numbers::pi, -1.5) * std::pow(2 * 1.3 / 2.0, -1.5)));
    // Midpoint quadrature over a cube of +-8 thermal widths.
    const double h = 0.08, m = 2.0, width = 8.0 * std::sqrt(q.T_o / m);
    const int n = int(2 * width / h);
    double sum = 0.0;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
            for (int k = 0; k < n; ++k) {
                const Vec3 v = q.V_o + Vec3{-width + (i + 0.5) * h, -width + (j + 0.5) * h, -width + (k + 0.5) * h};
                sum += maxwellian_eval(v, q, m);
            }
    CHECK(sum * h * h * h == doctest::Approx(2.5).epsilon(1e-6));
}

TEST_CASE("maxwellian fit") {
    const auto d = box(10.0, 8);
    InitialPdfSpec s;
    s.velocity.temperature = {1.7, 1.7, 1.7};
    s.velocity.drift = {0.3, 0, -0.2};
    const ProfilePdf pdf(s, d, 8.0);
    std::vector<PhasePoint> pts;
    for (int k = 0; k < 20000; ++k) {
        CounterRng rng(5, Stream::Test, k);
        pts.push_back(pdf.sample(rng));
    }
    const auto fit = fit_maxwellian(pts, d);
    CHECK(std::fabs(fit.params.T_o - 1.7) <= 3 * fit.T_err);
    for (int a = 0; a < 3; ++a) CHECK(std::fabs(fit.params.V_o[a] - s.velocity.drift[a]) <= 3 * fit.V_err[a]);
    CHECK(fit.params.n_o == doctest::Approx(8.0 / d.admissible_volume()));
    auto shifted = pts;
    for (auto& p : shifted) p.v += Vec3{1, 2, 3};
    const auto fit2 = fit_maxwellian(shifted, d);
    CHECK(norm(fit2.params.V_o - fit.params.V_o - Vec3{1, 2, 3}) < 1e-12);
    CHECK(fit2.params.T_o == doctest::Approx(fit.params.T_o).epsilon(1e-9));
    std::vector<PhasePoint> flat(10, PhasePoint{{5, 5, 5}, {1, 1, 1}});
    CHECK_THROWS_AS(fit_maxwellian(flat, d), NumericalFault);
}

TEST_CASE("distance to maxwellian") {
    const auto d = box(10.0, 8);
    InitialPdfSpec eq;
    const ProfilePdf m(eq, d, 8.0);
    const MaxwellianParams p = fit_maxwellian(m);
    const Estimate zero = distance_to_maxwellian(m, p, 100000, 1);
    CHECK((zero.value == 0.0 || zero.value <= 6.0 * zero.stderr_));

    InitialPdfSpec far;
    far.velocity.drift = {60, 0, 0};
    const ProfilePdf a(far, d, 8.0);
    const Estimate dd = distance_to_maxwellian(a, p, 100000, 2);
    const double expect = std::sqrt(a.l2_norm_squared() / 64.0 + m.l2_norm_squared() / 64.0);
    CHECK(std::fabs(dd.value - expect) <= 3.0 * dd.stderr_ + 1e-12 * expect);

    InitialPdfSpec hot;
    hot.velocity.temperature = {3.0, 0.4, 0.4};
    const ProfilePdf h(hot, d, 8.0);
    double prev = HUGE_VAL;
    for (double lambda : {1.0, 0.6, 0.3, 0.1}) {
        const Mixture mix(h, m, lambda);
        const Estimate e = distance_to_maxwellian(mix, p, 100000, 3);
        CHECK(e.value < prev);
        prev = e.value;
    }
}

TEST_CASE("scale length") {
    const auto d = box(10.0, 8);
    const ProfilePdf u(InitialPdfSpec{}, d, 8.0);
    CHECK(scale_length(u, default_probes(u, 512, 0.0, 1)) == kUnboundedScale);

    InitialPdfSpec e;
    e.spatial.kind = SpatialKind::Exponential;
    e.spatial.slope = -0.4;
    const ProfilePdf ex(e, d, 8.0);
    CHECK(scale_length(ex, default_probes(ex, 512, 0.0, 2)) == doctest::Approx(2.5).epsilon(1e-9));

    // KDE of a linear ramp, probed away from the walls.
    const double g = 0.12;
    const auto ens = sample_initial(ramp_spec(g), d, 4000, 4);
    KdeOptions opt;
    opt.boundary = KdeBoundary::Reflect;
    opt.bandwidth_scale = 1.5;  // Gaussian smoothing leaves a linear ramp unbiased in the interior
    const SmoothPdf kde = estimate_pdf(ens, opt);
    const double margin = 2.5 * kde.h_r().x;
    REQUIRE(margin < 3.5);
    const auto probes = default_probes(kde, 512, margin, 3, true);
    double lo_x = 1e9;
    for (const auto& pr : probes) lo_x = std::min(lo_x, pr.r.x);
    const double analytic = (1.0 + g * (lo_x - 5.0)) / g;
    CHECK(rel(scale_length_spatial(kde, probes), analytic) <= 0.10);
    CHECK(scale_length_spatial(u, default_probes(u, 64, 0.0, 1)) == kUnboundedScale);
}
