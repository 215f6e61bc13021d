#include "finitekin/functionals.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numbers>
#include <ostream>

#include "finitekin/core/error.hpp"
#include "finitekin/core/format.hpp"
#include "finitekin/dynamics.hpp"

namespace finitekin {

namespace {

// grad and Laplacian of u = m / k.
struct Ratio {
    double value;
    Vec3 grad;
    double lap;
};

Ratio ratio(const PointDerivs& m, const PointDerivs& k) {
    const double k2 = k.value * k.value;
    Ratio u;
    u.value = m.value / k.value;
    u.grad = m.grad / k.value - k.grad * (m.value / k2);
    u.lap = m.lap / k.value - 2.0 * dot(m.grad, k.grad) / k2 - m.value * k.lap / k2 +
            2.0 * m.value * norm2(k.grad) / (k2 * k.value);
    return u;
}

Vec3 uniform_in(const Vec3& lo, const Vec3& hi, CounterRng& rng) {
    return {rng.uniform(lo.x, hi.x), rng.uniform(lo.y, hi.y), rng.uniform(lo.z, hi.z)};
}

// Uniform point on the surface of [lo, hi] with its outward normal.
std::pair<Vec3, Vec3> uniform_on_surface(const Vec3& lo, const Vec3& hi, CounterRng& rng) {
    const Vec3 e = hi - lo;
    const double area[3] = {e.y * e.z, e.x * e.z, e.x * e.y};
    double u = rng.uniform() * (area[0] + area[1] + area[2]);
    int axis = 0;
    while (axis < 2 && u >= area[axis]) u -= area[axis++];
    Vec3 r = uniform_in(lo, hi, rng), n;
    const bool upper = rng.uniform() < 0.5;
    r[axis] = upper ? hi[axis] : lo[axis];
    n[axis] = upper ? 1.0 : -1.0;
    return {r, n};
}

double surface_area(const Vec3& lo, const Vec3& hi) {
    const Vec3 e = hi - lo;
    return 2.0 * (e.y * e.z + e.x * e.z + e.x * e.y);
}

// Gaussian velocity proposal around the pdf's velocity marginal.
struct Proposal {
    Vec3 mean, sd;

    Vec3 draw(CounterRng& rng) const {
        const Vec3 z = rng.normal3();
        return {mean.x + sd.x * z.x, mean.y + sd.y * z.y, mean.z + sd.z * z.z};
    }
    double density(const Vec3& v) const {
        double e = 0.0, norm = 1.0;
        for (int a = 0; a < 3; ++a) {
            const double z = (v[a] - mean[a]) / sd[a];
            e += 0.5 * z * z;
            norm *= sd[a] * std::sqrt(2.0 * std::numbers::pi);
        }
        return std::exp(-e) / norm;
    }
};

Vec3 gradient_hat_k1(const PhaseSpaceDensity& pdf, const OccupationField& occ, const Vec3& r, const Vec3& v) {
    const PointDerivs rho = pdf.eval(r, v);
    const PointDerivs k = occ.k1(r);
    return rho.grad / k.value - k.grad * (rho.value / (k.value * k.value));
}

// Partner side in the normalization of the contact integral: grad of rho / (mass k_w).
Vec3 gradient_hat_partner(const PhaseSpaceDensity& pdf, const OccupationField& occ, const Vec3& r, const Vec3& v) {
    const PointDerivs rho = pdf.eval(r, v);
    const double k = occ.weight_k(r);
    return (rho.grad / k - occ.weight_k_gradient(r) * (rho.value / (k * k))) / pdf.mass();
}

Estimate average(const std::vector<Estimate>& xs) {
    Estimate out;
    double var = 0.0;
    for (const auto& x : xs) {
        out.value += x.value;
        var += x.stderr_ * x.stderr_;
    }
    out.value /= double(xs.size());
    out.stderr_ = std::sqrt(var) / double(xs.size());
    return out;
}

}  // namespace

DirectionSpec::DirectionSpec(const Vec3& unit) : b(unit) {
    if (!is_finite(unit) || std::abs(norm(unit) - 1.0) > 1e-9)
        throw ConfigError(std::string("direction.b: must be a unit vector"));
}

DirectionSpec DirectionSpec::axis(int a) {
    if (a < 0 || a > 2) throw ConfigError(std::string("direction.axis: must be 0, 1 or 2"));
    Vec3 e;
    e[a] = 1.0;
    return DirectionSpec(e);
}

double directional_energy(const Vec3& v, const DirectionSpec& b) {
    const double c = dot(v, b.b);
    return c * c;
}

double total_directional_energy(const Vec3& v1, const Vec3& v2, const DirectionSpec& b) {
    return 0.5 * (directional_energy(v1, b) + directional_energy(v2, b));
}

double delta_M(const Vec3& v1_out, const Vec3& v2_out, const Vec3& n12, const DirectionSpec& b) {
    const Vec3 v12 = v1_out - v2_out;
    const double bn = dot(b.b, n12), nv = dot(n12, v12);
    return bn * std::abs(nv) * dot(v12, b.b) - bn * bn * nv * nv;
}

Estimate bs_entropy(const PhaseSpaceDensity& pdf, double A1, std::uint64_t samples, std::uint64_t seed, Exec exec) {
    if (!(A1 > 0.0)) throw ConfigError(std::string("bs_entropy: A1 must be positive"));
    if (samples == 0) throw ConfigError(std::string("bs_entropy: samples must be positive"));
    std::atomic<bool> bad{false};
    const Estimate e = mc_mean(samples, exec, [&](std::uint64_t i) {
        CounterRng rng(seed, Stream::Entropy, i);
        const PhasePoint x = pdf.sample(rng);
        const double l = std::log(pdf.value(x.r, x.v) / A1);
        if (!std::isfinite(l)) {
            bad = true;
            return 0.0;
        }
        return l;
    });
    if (bad)
        throw NumericalFault("bs_entropy: non-finite integrand (density underflow)");
    return {-pdf.mass() * e.value, pdf.mass() * e.stderr_};
}

KMResult compute_KM(const PhaseSpaceDensity& pdf, const OccupationField& occ, const DirectionSpec& b,
                    const KMOptions& options) {
    if (options.samples == 0) throw ConfigError(std::string("compute_KM: samples must be positive"));
    const DomainSpec& domain = pdf.domain();
    KMResult out;
    out.value = contact_pair_integral(
        pdf, occ, options.samples, options.seed, Stream::KM, options.exec,
        [&](const Vec3& r1, const Vec3& r2, const Vec3& n21, CounterRng&) {
            const Ratio u = ratio(pdf.directional_moment(r1, b.b), occ.k1(r1));
            return -dot(u.grad, n21) * pdf.spatial(r2).value / (pdf.mass() * occ.weight_k(r2));
        });
    out.negative = out.value.value < -3.0 * out.value.stderr_;
    if (options.cross_check) {
        const Vec3 lo = domain.admissible_lo(), hi = domain.admissible_hi();
        const double vol = domain.admissible_volume(), area = surface_area(lo, hi);
        const Estimate lap = mc_mean(options.samples, options.exec, [&](std::uint64_t i) {
            CounterRng rng(options.seed, Stream::KMLaplacian, i);
            const Vec3 r = stratified_point(lo, hi, i, rng);
            const PointDerivs k = occ.k1(r);
            return -k.value * ratio(pdf.directional_moment(r, b.b), k).lap;
        });
        const Estimate surf = mc_mean(options.samples, options.exec, [&](std::uint64_t i) {
            CounterRng rng(options.seed, Stream::KMLaplacian, options.samples + i);
            const auto [r, n] = uniform_on_surface(lo, hi, rng);
            const PointDerivs k = occ.k1(r);
            return k.value * dot(ratio(pdf.directional_moment(r, b.b), k).grad, n);
        });
        out.laplacian = {lap.value * vol, lap.stderr_ * vol};
        out.surface = {surf.value * area, surf.stderr_ * area};
        const double d = std::abs(out.value.value);
        out.discrepancy = std::abs(out.value.value - out.laplacian.value) / (d > 0.0 ? d : 1.0);
    }
    if (options.strict && out.negative)
        throw InvariantViolation("compute_KM: K_M = " + fmt_double(out.value.value) + " below -3 stderr (" +
                                 fmt_double(out.value.stderr_) + ")");
    return out;
}

KMoResult compute_KMo(const Estimate& K_M_initial) {
    KMoResult out;
    out.value = std::max(1.0, K_M_initial.value);
    out.degenerate = std::abs(K_M_initial.value) <= 3.0 * K_M_initial.stderr_;
    return out;
}

IMResult compute_IM(const Estimate& K_M, double K_Mo) {
    if (!(K_Mo > 0.0)) throw ConfigError(std::string("compute_IM: K_Mo must be positive"));
    IMResult out;
    out.raw = K_M.value / K_Mo;
    out.stderr_ = K_M.stderr_ / K_Mo;
    const double tol = 3.0 * out.stderr_;
    out.value = out.raw;
    if (out.raw < 0.0 || out.raw > 1.0) {
        const double excess = out.raw < 0.0 ? -out.raw : out.raw - 1.0;
        if (excess <= tol)
            out.value = std::clamp(out.raw, 0.0, 1.0);
        else
            out.out_of_band = true;
    }
    return out;
}

const char* to_string(Cbc c) { return c == Cbc::Causal ? "causal" : "anticausal"; }

Estimate compute_WM(const PhaseSpaceDensity& pdf, const OccupationField& occ, const DirectionSpec& b, Cbc cbc,
                    const WMOptions& options) {
    if (options.samples == 0) throw ConfigError(std::string("compute_WM: samples must be positive"));
    if (!(options.proposal_widen > 0.0)) throw ConfigError(std::string("compute_WM: proposal_widen must be positive"));
    Proposal prop{pdf.velocity_mean(), pdf.velocity_std() * options.proposal_widen};
    for (int a = 0; a < 3; ++a) {
        if (!(prop.sd[a] > 0.0)) throw NumericalFault("compute_WM: degenerate velocity marginal");
    }
    const SphereRule rule = sphere_rule();
    return contact_pair_integral(
        pdf, occ, options.samples, options.seed, Stream::WM, options.exec,
        [&](const Vec3& r1, const Vec3& r2, const Vec3& n21, CounterRng& rng) {
            const Vec3 n12 = -n21;
            const Vec3 v1 = prop.draw(rng), v2 = prop.draw(rng);
            const double u = dot(n12, v1 - v2);
            // Causal integrates over incoming pairs, anticausal over outgoing ones.
            if (cbc == Cbc::Causal ? !(u < 0.0) : !(u > 0.0)) return 0.0;
            const auto [a, c] = cbc == Cbc::Causal ? apply_binary_collision(v1, v2, n12)
                                                   : invert_binary_collision(v1, v2, n12);
            const double w = 1.0 / (prop.density(v1) * prop.density(v2));
            const double bn = dot(b.b, n12);
            const double g = dot(gradient_hat_k1(pdf, occ, r1, a), gradient_hat_partner(pdf, occ, r2, c));
            const double sign = cbc == Cbc::Causal ? -1.0 : 1.0;
            return sign * std::abs(u) * bn * bn * u * u * g * w;
        },
        options.quadrature ? &rule : nullptr);
}

FunctionalSample evaluate_functionals(const ReplicaEnsemble& ensemble, const FunctionalConfig& config, double K_Mo,
                                      int index) {
    const auto seed = [&](std::uint64_t label) { return derive_seed(config.seed, std::uint64_t(index) * 16 + label); };
    const SmoothPdf pdf = estimate_pdf(ensemble, config.kde);
    OccupationOptions oo = config.occupation;
    oo.seed = seed(1);
    oo.exec = config.exec;
    const OccupationField occ = estimate_k1(pdf, oo);

    FunctionalSample row;
    row.t = ensemble.time();
    row.b = config.b.b;
    row.cbc = config.cbc;
    row.k1_min = occ.min_value();
    row.k1_max = occ.max_value();
    row.S = bs_entropy(pdf, config.A1, config.entropy_samples, seed(2), config.exec);

    std::vector<DirectionSpec> dirs{config.b};
    if (config.average_axes) dirs = {DirectionSpec::axis(0), DirectionSpec::axis(1), DirectionSpec::axis(2)};
    std::vector<Estimate> km, wm;
    std::vector<double> lap;
    for (std::size_t d = 0; d < dirs.size(); ++d) {
        KMOptions ko;
        ko.samples = config.km_samples;
        ko.seed = seed(3 + d);
        ko.cross_check = config.km_cross_check;
        ko.strict = false;
        ko.exec = config.exec;
        const KMResult r = compute_KM(pdf, occ, dirs[d], ko);
        km.push_back(r.value);
        lap.push_back(r.laplacian.value);
        WMOptions wo;
        wo.samples = config.wm_samples;
        wo.seed = seed(6 + d);
        wo.exec = config.exec;
        wm.push_back(compute_WM(pdf, occ, dirs[d], config.cbc, wo));
    }
    row.K_M = average(km);
    row.W_M = average(wm);
    if (config.km_cross_check) {
        row.km_laplacian = 0.0;
        for (double x : lap) row.km_laplacian += x / double(lap.size());
    }

    if (K_Mo <= 0.0) {
        const KMoResult k = compute_KMo(row.K_M);
        row.degenerate_start = k.degenerate;
        K_Mo = k.value;
    }
    row.K_Mo = K_Mo;
    const IMResult im = compute_IM(row.K_M, K_Mo);
    row.I_M = im.value;
    row.I_M_raw = im.raw;

    const double h = std::max({pdf.h_r().x, pdf.h_r().y, pdf.h_r().z});
    row.L_rho = scale_length_spatial(pdf, default_probes(pdf, config.probes, 2.5 * h, seed(9)));
    row.maxwellian = fit_maxwellian(ensemble.phase_samples(), ensemble.domain);
    row.dist_maxwellian = distance_to_maxwellian(pdf, row.maxwellian.params, config.distance_samples, seed(10),
                                                 config.exec);
    return row;
}

std::vector<FunctionalSample> functional_timeseries(ReplicaEnsemble& ensemble, const std::vector<double>& times,
                                                    const FunctionalConfig& config) {
    if (times.empty()) throw ConfigError(std::string("functional_timeseries: no output times"));
    for (std::size_t i = 0; i < times.size(); ++i) {
        if (times[i] < ensemble.time() - 1e-12 || (i > 0 && times[i] < times[i - 1]))
            throw ConfigError(std::string("functional_timeseries: times must be ascending from the current time"));
    }
    std::vector<FunctionalSample> rows;
    double K_Mo = 0.0;
    for (std::size_t i = 0; i < times.size(); ++i) {
        if (times[i] > ensemble.time()) advance(ensemble, times[i], config.exec);
        FunctionalSample row = evaluate_functionals(ensemble, config, K_Mo, int(i));
        if (i == 0) K_Mo = row.K_Mo;
        row.degenerate_start = rows.empty() ? row.degenerate_start : rows.front().degenerate_start;
        rows.push_back(row);
    }
    return rows;
}

void write_timeseries_csv(std::ostream& os, const std::vector<FunctionalSample>& rows, bool header) {
    if (header)
        os << "t,S,S_err,K_M,K_M_err,K_Mo,I_M,W_M,W_M_err,L_rho,dist_maxwellian,dist_err,b_x,b_y,b_z,cbc,"
              "I_M_raw,T_o,T_err,km_laplacian,k1_min,k1_max\n";
    for (const auto& r : rows) {
        os << fmt_double(r.t) << ',' << fmt_double(r.S.value) << ',' << fmt_double(r.S.stderr_) << ','
           << fmt_double(r.K_M.value) << ',' << fmt_double(r.K_M.stderr_) << ',' << fmt_double(r.K_Mo) << ','
           << fmt_double(r.I_M) << ',' << fmt_double(r.W_M.value) << ',' << fmt_double(r.W_M.stderr_) << ','
           << fmt_double(r.L_rho) << ',' << fmt_double(r.dist_maxwellian.value) << ','
           << fmt_double(r.dist_maxwellian.stderr_) << ',' << fmt_double(r.b.x) << ',' << fmt_double(r.b.y) << ','
           << fmt_double(r.b.z) << ',' << to_string(r.cbc) << ',' << fmt_double(r.I_M_raw) << ','
           << fmt_double(r.maxwellian.params.T_o) << ',' << fmt_double(r.maxwellian.T_err) << ','
           << fmt_double(r.km_laplacian) << ',' << fmt_double(r.k1_min) << ',' << fmt_double(r.k1_max) << '\n';
    }
}

}  // namespace finitekin
