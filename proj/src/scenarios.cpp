#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <sstream>

#include "json.hpp"

#include "finitekin/core/error.hpp"
#include "finitekin/core/format.hpp"
#include "finitekin/ensemble.hpp"
#include "finitekin/harness.hpp"

namespace fs = std::filesystem;

namespace finitekin {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

void write_file(const fs::path& path, const std::string& content) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open " + path.string() + " for writing");
    os << content;
    os.close();
    if (!os) throw IoError("failed writing " + path.string());
}

std::string hex64(std::uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

std::vector<double> linspace(double a, double b, int n) {
    std::vector<double> t(n);
    for (int i = 0; i < n; ++i) t[i] = n == 1 ? a : a + (b - a) * i / (n - 1);
    return t;
}

GateResult pass_fail(std::string name, bool ok, std::string detail) {
    return {std::move(name), ok ? GateOutcome::Pass : GateOutcome::Fail, std::move(detail)};
}

GateResult not_applicable(std::string name) { return {std::move(name), GateOutcome::NotApplicable, ""}; }

std::string csv_of(const std::vector<FunctionalSample>& rows) {
    std::ostringstream os;
    write_timeseries_csv(os, rows);
    return os.str();
}

// I_M and its stderr from a functionals series.
void im_columns(const CsvTable& s, std::vector<double>& im, std::vector<double>& se) {
    im = s.numeric("I_M_raw");
    const auto err = s.numeric("K_M_err"), kmo = s.numeric("K_Mo");
    se.resize(im.size());
    for (std::size_t i = 0; i < im.size(); ++i) se[i] = err[i] / kmo[i];
}

// Isotonic non-increasing fit of I_M: RMS residual against 2 x pooled stderr.
GateResult monotone_gate(const std::string& name, const CsvTable& s) {
    std::vector<double> im, se;
    im_columns(s, im, se);
    std::vector<double> w(im.size());
    double pooled = 0.0;
    for (std::size_t i = 0; i < im.size(); ++i) {
        w[i] = 1.0 / std::max(se[i] * se[i], 1e-300);
        pooled += se[i] * se[i];
    }
    pooled = std::sqrt(pooled / double(im.size()));
    const auto fit = isotonic_nonincreasing(im, w);
    double rss = 0.0;
    for (std::size_t i = 0; i < im.size(); ++i) rss += (im[i] - fit[i]) * (im[i] - fit[i]);
    const double rms = std::sqrt(rss / double(im.size()));
    return pass_fail(name, rms <= 2.0 * pooled,
                     "isotonic residual " + fmt_double(rms) + " vs 2 x pooled stderr " + fmt_double(2.0 * pooled));
}

std::vector<FunctionalSample> solver_rows(const SolverRun& run, const DomainSpec& d) {
    std::vector<FunctionalSample> out;
    for (const auto& r : run.rows) {
        FunctionalSample f;
        f.t = r.t;
        f.S = r.S;
        f.K_M = {kNaN, kNaN};
        f.K_Mo = kNaN;
        f.I_M = f.I_M_raw = kNaN;
        f.W_M = {kNaN, kNaN};
        f.L_rho = kNaN;
        f.dist_maxwellian = r.dist_maxwellian;
        f.maxwellian = r.maxwellian;
        f.b = {kNaN, kNaN, kNaN};
        f.k1_min = f.k1_max = kNaN;
        (void)d;
        out.push_back(f);
    }
    return out;
}

CollisionKernelConfig kernel_config(const RunConfig& c, KernelMode mode) {
    auto k = mode == KernelMode::Master ? CollisionKernelConfig::master(c.domain, c.solver.dt)
                                        : CollisionKernelConfig::boltzmann(c.domain, c.solver.dt);
    if (c.solver.cell_size > 0.0) k.cell_size = c.solver.cell_size;
    k.refresh_every = c.solver.refresh_every;
    k.kde_subsample = c.solver.kde_subsample;
    k.pool_size = c.solver.pool_size;
    k.refresh = c.occupation;
    k.refresh.samples = c.solver.occupation_samples;
    return k;
}

SolverDiagnostics solver_diag(const RunConfig& c, int every) {
    SolverDiagnostics g;
    g.every = every;
    g.subsample = c.solver.diag_subsample;
    g.entropy_samples = c.solver.diag_samples;
    g.distance_samples = c.solver.diag_samples;
    g.A1 = c.functionals.A1;
    return g;
}

struct Context {
    const RunConfig& cfg;
    fs::path out;
    RunSummary& summary;

    void emit(const std::string& name, const std::string& content) {
        write_file(out / name, content);
        summary.artifacts.push_back(name);
    }
    std::uint64_t seed(const std::string& label) {
        const std::uint64_t s = derive_seed(cfg.seed, fnv1a(label));
        summary.seeds[label] = s;
        return s;
    }
};

void run_dke(Context& ctx) {
    const RunConfig& c = ctx.cfg;
    auto ens = sample_initial(c.initial, c.domain, c.ensemble.replicas, ctx.seed("initial"));
    auto fc = functional_config(c);
    fc.seed = ctx.seed("functionals");
    // K_Mo needs the start to carry K_M signal; a degenerate start is a numerical fault, not a gate failure.
    const auto rows = functional_timeseries(ens, linspace(0.0, c.ensemble.t_end, c.ensemble.outputs), fc);
    ctx.emit("series.csv", csv_of(rows));
    if (c.ensemble.record_events && !ens.replicas.empty()) {
        std::ostringstream ev;
        write_events_csv(ev, ens.replicas.front().events);
        ctx.emit("events.csv", ev.str());
    }
    if (rows.front().degenerate_start)
        throw NumericalFault("dke-decay: K_M at t = 0 is zero within noise, I_M is undefined (degenerate start)");
}

constexpr double kProbeHorizon = 1e5;

// Particles placed one at a time from the profile restricted to the admissible box, each redrawn
// until it clears the ones already placed. Joint rejection is hopeless at retrace densities.
NBodyState sequential_state(const InitialPdfSpec& spec, const DomainSpec& d, std::uint64_t seed, std::uint64_t index) {
    const ProfilePdf profile(spec, d, double(d.n_particles), ProfilePdf::Support::Admissible);
    CounterRng rng(seed, Stream::InitialState, index);
    NBodyState s;
    for (int i = 0; i < d.n_particles; ++i) {
        for (int attempt = 0;; ++attempt) {
            if (attempt == 1'000'000) throw NumericalFault("reverse: cannot place particle " + std::to_string(i));
            const Vec3 r = profile.sample_position(rng);
            bool clear = true;
            for (const Vec3& q : s.r) clear = clear && norm(r - q) > d.sigma;
            if (!clear) continue;
            s.r.push_back(r);
            break;
        }
        s.v.push_back(profile.sample_velocity(rng));
    }
    if (!configuration_admissible(s.r, d)) throw InvariantViolation("reverse: placed configuration is not admissible");
    return s;
}

double retrace_error(const NBodyState& s, const DomainSpec& d, std::uint64_t collisions, double& horizon,
                     std::uint64_t& seen) {
    auto probe = make_trajectory(s);
    SimulationOptions stop;
    stop.max_pair_events = collisions + 1;
    simulate(probe, s.t + kProbeHorizon, d, stop);
    double t_last = 0.0;
    std::uint64_t pairs = 0;
    for (const auto& e : probe.events)
        if (e.kind == EventKind::Pair && ++pairs == collisions) t_last = e.t;
    // Midway between the last counted collision and the next one.
    seen = std::min(pairs, collisions);
    horizon = pairs >= collisions ? 0.5 * (t_last + probe.current.t) : probe.current.t;
    auto fwd = make_trajectory(s);
    simulate(fwd, horizon, d);
    auto back = make_trajectory(time_reverse(fwd.current));
    simulate(back, -s.t, d);
    const auto end = time_reverse(back.current);
    const Vec3 ext = d.extent();
    const double scale = std::max({ext.x, ext.y, ext.z});
    double err = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i) {
        err = std::max(err, norm(end.r[i] - s.r[i]) / scale);
        err = std::max(err, norm(end.v[i] - s.v[i]) / std::max(norm(s.v[i]), 1e-300));
    }
    return err;
}

void run_reverse(Context& ctx) {
    const RunConfig& c = ctx.cfg;
    DomainSpec rd = c.domain;
    rd.n_particles = c.reverse.n_particles;
    const std::uint64_t rs = ctx.seed("retrace");
    std::ostringstream rt;
    rt << "replica,collisions,horizon,error\n";
    for (std::size_t r = 0; r < c.reverse.replicas_checked; ++r) {
        const RetraceResult x = retrace_check(c.initial, rd, c.reverse.collisions, rs, r);
        rt << r << ',' << x.collisions << ',' << fmt_double(x.horizon) << ',' << fmt_double(x.error) << '\n';
    }
    ctx.emit("retrace.csv", rt.str());

    auto ens = sample_initial(c.initial, c.domain, c.ensemble.replicas, ctx.seed("initial"));
    auto fc = functional_config(c);
    fc.seed = ctx.seed("functionals");
    const double T = c.ensemble.t_end;
    const auto fwd = functional_timeseries(ens, linspace(0.0, T, c.ensemble.outputs), fc);
    ctx.emit("series.csv", csv_of(fwd));
    // Reversed orientation: velocities negated at T, then run for the same duration.
    auto rev = time_reverse(ens, T);
    const auto back = functional_timeseries(rev, linspace(T, 2.0 * T, c.ensemble.outputs), fc);
    ctx.emit("series_reversed.csv", csv_of(back));
}

void run_compare_cbc(Context& ctx) {
    const RunConfig& c = ctx.cfg;
    auto ens = sample_initial(c.initial, c.domain, c.ensemble.replicas, ctx.seed("initial"));
    const auto fc = functional_config(c);
    const std::uint64_t s = ctx.seed("functionals");
    std::ostringstream os;
    os << "t,W_causal,W_causal_err,W_anticausal,W_anticausal_err\n";
    for (double t : linspace(0.0, c.ensemble.t_end, c.ensemble.outputs)) {
        if (t > ens.time()) advance(ens, t);
        const SmoothPdf pdf = estimate_pdf(ens, fc.kde);
        OccupationOptions oo = fc.occupation;
        oo.seed = derive_seed(s, 1);
        const auto occ = estimate_k1(pdf, oo);
        WMOptions wo;
        wo.samples = fc.wm_samples;
        wo.seed = derive_seed(s, 2);  // same draws for both conditions
        const DirectionSpec b(fc.b.b);
        const Estimate wc = compute_WM(pdf, occ, b, Cbc::Causal, wo);
        const Estimate wa = compute_WM(pdf, occ, b, Cbc::Anticausal, wo);
        os << fmt_double(t) << ',' << fmt_double(wc.value) << ',' << fmt_double(wc.stderr_) << ','
           << fmt_double(wa.value) << ',' << fmt_double(wa.stderr_) << '\n';
    }
    ctx.emit("wm_cbc.csv", os.str());
}

void run_sweep(Context& ctx) {
    const RunConfig& c = ctx.cfg;
    OccupationOptions oo = c.occupation;
    oo.seed = ctx.seed("occupation");
    const BgTable t = bg_sweep(c.sweep.members, c.domain, c.initial, oo, c.sweep.k2_samples);
    std::ostringstream os;
    os << "n_particles,sigma,k1,k1_err,k2,k2_err,iterations,residual\n";
    for (const auto& r : t.rows)
        os << r.n_particles << ',' << fmt_double(r.sigma) << ',' << fmt_double(r.k1.value) << ','
           << fmt_double(r.k1.stderr_) << ',' << fmt_double(r.k2.value) << ',' << fmt_double(r.k2.stderr_) << ','
           << r.iterations << ',' << fmt_double(r.residual) << '\n';
    ctx.emit("sweep.csv", os.str());
}

void run_n2(Context& ctx) {
    const RunConfig& c = ctx.cfg;
    if (c.domain.n_particles != 2) throw ConfigError(std::string("domain.n_particles: n2-case requires 2"));
    const ProfilePdf pdf(c.initial, c.domain, 2.0);
    OccupationOptions oo = c.occupation;
    oo.seed = ctx.seed("occupation");
    const auto field = estimate_k1(pdf, oo);
    const std::uint64_t s = ctx.seed("probes");
    std::ostringstream os;
    os << "r1_x,r1_y,r1_z,r2_x,r2_y,r2_z,k2,k2_err\n";
    const Vec3 lo = c.domain.admissible_lo(), hi = c.domain.admissible_hi();
    for (std::size_t i = 0; i < c.n2.probes; ++i) {
        CounterRng rng(s, Stream::Test, i);
        Vec3 r1, r2;
        for (int a = 0; a < 3; ++a) r1[a] = rng.uniform(lo[a], hi[a]);
        r2 = r1 + c.domain.sigma * rng.unit_vector();
        const Estimate k2 = estimate_k2(pdf, field, r1, r2, c.n2.samples, derive_seed(s, i));
        for (int a = 0; a < 3; ++a) os << fmt_double(r1[a]) << ',';
        for (int a = 0; a < 3; ++a) os << fmt_double(r2[a]) << ',';
        os << fmt_double(k2.value) << ',' << fmt_double(k2.stderr_) << '\n';
    }
    ctx.emit("k2.csv", os.str());
    std::ostringstream occ;
    write_occupation_csv(occ, field);
    ctx.emit("occupation.csv", occ.str());
}

void run_solver_compare(Context& ctx) {
    const RunConfig& c = ctx.cfg;
    const ProfilePdf pdf(c.initial, c.domain, double(c.domain.n_particles), ProfilePdf::Support::Admissible);
    const std::uint64_t init = ctx.seed("solver_initial");
    const std::uint64_t run_seed = ctx.seed("solver");
    nlohmann::json meta;
    for (KernelMode mode : {KernelMode::Boltzmann, KernelMode::Master}) {
        if (c.solver.steps == 0) break;
        auto set = make_particle_set(pdf, c.solver.particles, init, mode, c.functionals.cbc);
        const auto kc = kernel_config(c, mode);
        const auto run = run_solver(set, kc, c.solver.steps, run_seed, solver_diag(c, c.solver.diag_every));
        ctx.emit(std::string("series_") + to_string(mode) + ".csv", csv_of(solver_rows(run, c.domain)));
        meta[to_string(mode)] = {{"accepted", run.totals.accepted},
                                 {"candidates", run.totals.candidates},
                                 {"wall_rejected_fraction", run.wall_rejected_fraction},
                                 {"majorant_raises", run.totals.majorant_raises},
                                 {"occupation_refreshes", run.refreshes},
                                 {"k2_source", mode == KernelMode::Master && kc.use_field
                                                   ? "pair pool, frozen between refreshes every " +
                                                         std::to_string(kc.refresh_every) + " steps"
                                                   : "constant " + fmt_double(kc.k2_constant)}};
    }
    if (c.solver.fixed_point_steps > 0) {
        // Maxwellian at the mean temperature of the configured start, uniform in the admissible box.
        InitialPdfSpec mx;
        const Vec3 T = c.initial.velocity.temperature;
        const double Tm = (T.x + T.y + T.z) / 3.0;
        mx.velocity.temperature = {Tm, Tm, Tm};
        mx.velocity.drift = c.initial.velocity.drift;
        const ProfilePdf mpdf(mx, c.domain, double(c.domain.n_particles), ProfilePdf::Support::Admissible);
        auto set = make_particle_set(mpdf, c.solver.particles, ctx.seed("fixed_point_initial"), KernelMode::Master,
                                     c.functionals.cbc);
        const auto run = run_solver(set, kernel_config(c, KernelMode::Master), c.solver.fixed_point_steps,
                                    ctx.seed("fixed_point"), solver_diag(c, c.solver.fixed_point_every));
        ctx.emit("series_fixed_point.csv", csv_of(solver_rows(run, c.domain)));
        meta["fixed_point"] = {{"accepted", run.totals.accepted},
                               {"wall_rejected_fraction", run.wall_rejected_fraction}};
    }
    ctx.emit("solver.json", meta.dump(2) + "\n");
}

IdentityReport contact_as_report(const ContactGradientReport& c, std::uint64_t samples) {
    IdentityReport r;
    r.name = "k2_contact_translation";
    r.lhs = c.translation;
    r.rhs = {};
    r.rhs_err = c.translation_err;
    double worst = 0.0;
    for (int a = 0; a < 3; ++a) worst = std::max(worst, std::fabs(c.translation[a]) / std::max(c.translation_err[a], 1e-300));
    r.discrepancy = worst;  // in stderr units
    r.samples = samples;
    return r;
}

void run_identities(Context& ctx) {
    const RunConfig& c = ctx.cfg;
    const std::uint64_t s = ctx.seed("identities");
    std::vector<IdentityReport> reports;
    const ProfilePdf ramp(c.initial, c.domain, double(c.domain.n_particles));
    OccupationOptions oo = c.occupation;
    oo.seed = derive_seed(s, 1);
    const auto field = estimate_k1(ramp, oo);
    reports.push_back(check_grad_k1_identity(ramp, field, c.domain.center(), c.identities.samples, derive_seed(s, 2)));
    // Error scaling over the configured budget range, four log-spaced budgets.
    const double lmin = std::log(double(c.identities.scaling_min)), lmax = std::log(double(c.identities.scaling_max));
    for (int k = 0; k < 4; ++k) {
        const auto n = std::uint64_t(std::llround(std::exp(lmin + (lmax - lmin) * k / 3.0)));
        auto rep = check_grad_k1_identity(ramp, field, c.domain.center(), n, derive_seed(s, 10 + k));
        rep.name = "grad_k1_scaling";
        reports.push_back(rep);
    }
    // Laplacian identity on a curved profile (a linear ramp makes both sides vanish).
    InitialPdfSpec ex = c.initial;
    ex.spatial.kind = SpatialKind::Exponential;
    ex.spatial.slope = 0.25;
    const ProfilePdf expo(ex, c.domain, double(c.domain.n_particles));
    oo.seed = derive_seed(s, 3);
    const auto efield = estimate_k1(expo, oo);
    reports.push_back(check_laplacian_identity(expo, efield, c.domain.center(), c.identities.samples, derive_seed(s, 4)));
    if (c.domain.n_particles >= 3) {
        const ProfilePdf uni(InitialPdfSpec{}, c.domain, double(c.domain.n_particles));
        oo.seed = derive_seed(s, 5);
        const auto ufield = estimate_k1(uni, oo);
        const Vec3 r1 = c.domain.center() - Vec3{0.5 * c.domain.sigma, 0, 0};
        reports.push_back(contact_as_report(
            check_contact_k2_gradient(uni, ufield, r1, {1, 0, 0}, 0.1 * c.domain.sigma, c.identities.samples,
                                      derive_seed(s, 6)),
            c.identities.samples));
    }
    std::ostringstream os;
    write_identity_json(os, reports);
    ctx.emit("identities.json", os.str());
}

}  // namespace

RetraceResult retrace_check(const InitialPdfSpec& spec, const DomainSpec& domain, std::uint64_t collisions,
                            std::uint64_t seed, std::uint64_t index) {
    RetraceResult out;
    out.error = retrace_error(sequential_state(spec, domain, seed, index), domain, collisions, out.horizon, out.collisions);
    return out;
}

const char* to_string(GateOutcome g) {
    switch (g) {
        case GateOutcome::Pass: return "pass";
        case GateOutcome::Fail: return "fail";
        case GateOutcome::NotApplicable: return "not_applicable";
    }
    return "not_applicable";
}

bool RunSummary::all_pass() const {
    for (const auto& g : gates)
        if (g.outcome == GateOutcome::Fail) return false;
    return true;
}

FunctionalConfig functional_config(const RunConfig& c) {
    FunctionalConfig f;
    f.b = DirectionSpec(c.functionals.b);
    f.average_axes = c.functionals.average_axes;
    f.A1 = c.functionals.A1;
    f.cbc = c.functionals.cbc;
    f.entropy_samples = c.functionals.entropy_samples;
    f.km_samples = c.functionals.km_samples;
    f.wm_samples = c.functionals.wm_samples;
    f.distance_samples = c.functionals.distance_samples;
    f.km_cross_check = c.functionals.km_cross_check;
    f.occupation = c.occupation;
    f.kde.boundary = c.functionals.kde_boundary;
    f.kde.bandwidth_scale = c.functionals.bandwidth_scale;
    f.probes = c.functionals.probes;
    f.seed = c.seed;
    return f;
}

// ---- artifacts -> gates

CsvTable CsvTable::read(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot read " + path.string());
    std::ostringstream ss;
    ss << is.rdbuf();
    return parse(ss.str());
}

CsvTable CsvTable::parse(const std::string& text) {
    CsvTable t;
    std::istringstream in(text);
    std::string line;
    auto split = [](const std::string& l) {
        std::vector<std::string> out;
        std::stringstream ss(l);
        std::string cell;
        while (std::getline(ss, cell, ',')) out.push_back(cell);
        if (!l.empty() && l.back() == ',') out.emplace_back();
        return out;
    };
    if (!std::getline(in, line)) throw IoError("csv: empty file");
    t.header_ = split(line);
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        auto cells = split(line);
        if (cells.size() != t.header_.size()) throw IoError("csv: ragged row");
        t.cells_.push_back(std::move(cells));
    }
    return t;
}

bool CsvTable::has(const std::string& column) const {
    return std::find(header_.begin(), header_.end(), column) != header_.end();
}

std::size_t CsvTable::index(const std::string& column) const {
    const auto it = std::find(header_.begin(), header_.end(), column);
    if (it == header_.end()) throw IoError("csv: missing column " + column);
    return std::size_t(it - header_.begin());
}

std::vector<double> CsvTable::numeric(const std::string& column) const {
    const std::size_t k = index(column);
    std::vector<double> out;
    for (const auto& row : cells_) {
        double x = kNaN;
        const auto& s = row[k];
        const auto res = std::from_chars(s.data(), s.data() + s.size(), x);
        out.push_back(res.ec == std::errc() ? x : kNaN);
    }
    return out;
}

std::vector<std::string> CsvTable::text(const std::string& column) const {
    const std::size_t k = index(column);
    std::vector<std::string> out;
    for (const auto& row : cells_) out.push_back(row[k]);
    return out;
}

GateResult gate_thm1(const CsvTable& s) {
    const auto km = s.numeric("K_M"), err = s.numeric("K_M_err");
    std::vector<double> im, se;
    im_columns(s, im, se);
    int bad_k = 0, bad_i = 0;
    double worst = kUnboundedScale;
    for (std::size_t i = 0; i < km.size(); ++i) {
        if (!(km[i] >= -3.0 * err[i])) ++bad_k;
        if (!(im[i] >= -3.0 * se[i] && im[i] <= 1.0 + 3.0 * se[i])) ++bad_i;
        worst = std::min(worst, km[i] / std::max(err[i], 1e-300));
    }
    return pass_fail("thm1", bad_k == 0 && bad_i == 0,
                     std::to_string(bad_k) + " of " + std::to_string(km.size()) + " rows with K_M < -3 stderr, " +
                         std::to_string(bad_i) + " with I_M outside its band; min K_M/stderr " + fmt_double(worst));
}

GateResult gate_thm2(const CsvTable& s) {
    const auto cbc = s.text("cbc");
    for (const auto& x : cbc)
        if (x != "causal") return not_applicable("thm2");
    const auto w = s.numeric("W_M"), err = s.numeric("W_M_err");
    int bad = 0;
    for (std::size_t i = 0; i < w.size(); ++i)
        if (!(w[i] <= 3.0 * err[i])) ++bad;
    const GateResult mono = monotone_gate("thm2", s);
    return pass_fail("thm2", bad == 0 && mono.outcome == GateOutcome::Pass,
                     std::to_string(bad) + " rows with W_M > 3 stderr; " + mono.detail);
}

GateResult gate_thm3(const CsvTable& s) {
    const auto dist = s.numeric("dist_maxwellian");
    std::vector<double> im, se;
    im_columns(s, im, se);
    const auto T = s.numeric("T_o"), Te = s.numeric("T_err");
    const std::size_t n = dist.size();
    if (n < 2) return pass_fail("thm3", false, "fewer than two rows");
    const bool d_ok = dist[n - 1] <= dist[0] / 5.0;
    const bool i_ok = im[n - 1] <= 0.1 * im[0];
    const double dT = std::fabs(T[n - 1] - T[n - 2]), dT_err = std::hypot(Te[n - 1], Te[n - 2]);
    const bool t_ok = dT <= 3.0 * dT_err;
    return pass_fail("thm3", d_ok && i_ok && t_ok,
                     "dist " + fmt_double(dist[0]) + " -> " + fmt_double(dist[n - 1]) + ", I_M " + fmt_double(im[0]) +
                         " -> " + fmt_double(im[n - 1]) + ", |dT_o| " + fmt_double(dT) + " (3 stderr " +
                         fmt_double(3.0 * dT_err) + ")");
}

GateResult gate_cbc_sign(const CsvTable& s) {
    const auto wc = s.numeric("W_causal"), ec = s.numeric("W_causal_err");
    const auto wa = s.numeric("W_anticausal"), ea = s.numeric("W_anticausal_err");
    int tested = 0, bad = 0;
    for (std::size_t i = 0; i < wc.size(); ++i) {
        if (!(wc[i] <= -3.0 * ec[i])) continue;
        ++tested;
        if (!(wa[i] >= -3.0 * ea[i])) ++bad;
    }
    return pass_fail("cbc_sign", bad == 0,
                     std::to_string(tested) + " snapshots with causal W_M below -3 stderr, " + std::to_string(bad) +
                         " with anticausal W_M below -3 stderr");
}

GateResult gate_bg_limit(const CsvTable& s) {
    const auto k1 = s.numeric("k1"), err = s.numeric("k1_err");
    bool ok = true;
    std::string detail = "|k1 - 1|:";
    for (std::size_t i = 0; i < k1.size(); ++i) {
        detail += " " + fmt_double(std::fabs(k1[i] - 1.0));
        if (i > 0) {
            const double drop = std::fabs(k1[i - 1] - 1.0) - std::fabs(k1[i] - 1.0);
            if (!(drop > 3.0 * std::hypot(err[i], err[i - 1]))) ok = false;
        }
    }
    const std::size_t n = k1.size();
    if (n == 0 || !(std::fabs(k1[n - 1] - 1.0) + 3.0 * err[n - 1] < 0.05)) ok = false;
    return pass_fail("bg_limit", ok, detail);
}

GateResult gate_n2(const CsvTable& s) {
    const auto k2 = s.numeric("k2"), err = s.numeric("k2_err");
    int bad = 0;
    for (std::size_t i = 0; i < k2.size(); ++i)
        if (!(k2[i] == 1.0 && err[i] == 0.0)) ++bad;
    return pass_fail("n2_k2_unity", bad == 0 && !k2.empty(),
                     std::to_string(bad) + " of " + std::to_string(k2.size()) + " probe pairs differ from exactly 1");
}

namespace {
Estimate delta_S(const CsvTable& s) {
    const auto S = s.numeric("S"), e = s.numeric("S_err");
    const std::size_t n = S.size();
    return {S[n - 1] - S[0], std::hypot(e[n - 1], e[0])};
}
}  // namespace

GateResult gate_boltzmann_entropy(const CsvTable& b) {
    const Estimate d = delta_S(b);
    return pass_fail("boltzmann_entropy_increase", d.value > 3.0 * d.stderr_,
                     "dS = " + fmt_double(d.value) + " +- " + fmt_double(d.stderr_));
}

GateResult gate_constant_h(const CsvTable& m, const CsvTable& b) {
    const Estimate dm = delta_S(m), db = delta_S(b);
    return pass_fail("constant_h", std::fabs(dm.value) < 0.25 * db.value,
                     "master dS = " + fmt_double(dm.value) + " +- " + fmt_double(dm.stderr_) + ", boltzmann dS = " +
                         fmt_double(db.value) + " +- " + fmt_double(db.stderr_));
}

GateResult gate_fixed_point(const CsvTable& f) {
    const auto d = f.numeric("dist_maxwellian"), e = f.numeric("dist_err");
    double worst = 0.0;
    for (std::size_t i = 1; i < d.size(); ++i) worst = std::max(worst, std::fabs(d[i] - d[0]));
    return pass_fail("maxwellian_fixed_point", !d.empty() && worst <= 3.0 * e[0],
                     "max |dist - dist(0)| " + fmt_double(worst) + " vs 3 stderr(0) " + fmt_double(3.0 * e[0]));
}

GateResult gate_retrace(const CsvTable& r, double tolerance, double required) {
    const auto e = r.numeric("error");
    double worst = 0.0;
    for (double x : e) worst = std::max(worst, std::isfinite(x) ? x : kUnboundedScale);
    double fewest = kUnboundedScale;
    if (r.has("collisions"))
        for (double n : r.numeric("collisions")) fewest = std::min(fewest, n);
    return pass_fail("retrace", !e.empty() && worst <= tolerance && !(fewest < required),
                     "fewest pair collisions " + fmt_double(fewest) + ", " +
                     "max relative error " + fmt_double(worst) + " over " + std::to_string(e.size()) + " replicas");
}

GateResult gate_pmi(const std::string& name, const CsvTable& s) { return monotone_gate(name, s); }

std::vector<GateResult> gates_identities(const fs::path& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot read " + path.string());
    const auto j = nlohmann::json::parse(is);
    std::vector<GateResult> out;
    std::vector<double> ln_n, ln_e;
    for (const auto& r : j) {
        const std::string id = r["identity"];
        const double disc = r["discrepancy"].is_number() ? r["discrepancy"].get<double>() : kNaN;
        if (id == "grad_k1")
            out.push_back(pass_fail("grad_k1_identity", disc <= 0.05, "relative discrepancy " + fmt_double(disc)));
        else if (id == "laplacian_k1")
            out.push_back(pass_fail("laplacian_identity", disc <= 0.10, "relative discrepancy " + fmt_double(disc)));
        else if (id == "k2_contact_translation")
            out.push_back(pass_fail("k2_contact_translation", disc <= 3.5, "max |d k2| / stderr " + fmt_double(disc)));
        else if (id == "grad_k1_scaling") {
            double e2 = 0.0;
            for (const auto& x : r["rhs_stderr"]) e2 += x.get<double>() * x.get<double>();
            ln_n.push_back(std::log(r["samples"].get<double>()));
            ln_e.push_back(0.5 * std::log(e2));
        }
    }
    if (ln_n.size() >= 2) {
        const auto fit = least_squares_line(ln_n, ln_e);
        out.push_back(pass_fail("grad_k1_scaling", std::fabs(fit.slope + 0.5) <= 0.15,
                                "stderr slope " + fmt_double(fit.slope) + " (expected -0.5 +- 0.15)"));
    }
    return out;
}

std::vector<GateResult> evaluate_gates(const std::string& scenario, const fs::path& out, const RunConfig& c) {
    std::vector<GateResult> g;
    auto na = [&](std::initializer_list<const char*> names) {
        for (auto n : names) g.push_back(not_applicable(n));
    };
    if (scenario == "dke-decay") {
        const auto s = CsvTable::read(out / "series.csv");
        g = {gate_thm1(s), gate_thm2(s), gate_thm3(s)};
        na({"constant_h", "identity_suite"});
    } else if (scenario == "reverse") {
        g.push_back(gate_retrace(CsvTable::read(out / "retrace.csv"), c.reverse.tolerance, double(c.reverse.collisions)));
        g.push_back(gate_pmi("pmi_forward", CsvTable::read(out / "series.csv")));
        g.push_back(gate_pmi("pmi_reversed", CsvTable::read(out / "series_reversed.csv")));
        na({"thm1", "thm2", "thm3", "constant_h", "identity_suite"});
    } else if (scenario == "compare-cbc") {
        g.push_back(gate_cbc_sign(CsvTable::read(out / "wm_cbc.csv")));
        na({"thm1", "thm2", "thm3", "constant_h", "identity_suite"});
    } else if (scenario == "sweep-bg") {
        g.push_back(gate_bg_limit(CsvTable::read(out / "sweep.csv")));
        na({"thm1", "thm2", "thm3", "constant_h", "identity_suite"});
    } else if (scenario == "n2-case") {
        g.push_back(gate_n2(CsvTable::read(out / "k2.csv")));
        na({"thm1", "thm2", "thm3", "constant_h", "identity_suite"});
    } else if (scenario == "solver-compare") {
        if (c.solver.steps > 0) {
            const auto b = CsvTable::read(out / "series_boltzmann.csv");
            const auto m = CsvTable::read(out / "series_master.csv");
            g.push_back(gate_boltzmann_entropy(b));
            g.push_back(gate_constant_h(m, b));
        } else {
            na({"constant_h"});
        }
        if (c.solver.fixed_point_steps > 0)
            g.push_back(gate_fixed_point(CsvTable::read(out / "series_fixed_point.csv")));
        na({"thm1", "thm2", "thm3", "identity_suite"});
    } else if (scenario == "identities") {
        g = gates_identities(out / "identities.json");
        bool all = !g.empty();
        for (const auto& x : g) all = all && x.outcome == GateOutcome::Pass;
        g.push_back(pass_fail("identity_suite", all, std::to_string(g.size()) + " identity checks"));
        na({"thm1", "thm2", "thm3", "constant_h"});
    } else {
        throw ConfigError("run.scenario: '" + scenario + "' is not in the scenario catalog");
    }
    return g;
}

void write_summary_json(const fs::path& path, const RunSummary& s) {
    nlohmann::json j;
    j["scenario"] = s.scenario;
    j["config_hash"] = hex64(s.config_hash);
    j["seed"] = s.seed;
    j["seeds"] = nlohmann::json::object();
    for (const auto& [k, v] : s.seeds) j["seeds"][k] = v;
    j["gates"] = nlohmann::json::array();
    for (const auto& g : s.gates) j["gates"].push_back({{"name", g.name}, {"outcome", to_string(g.outcome)}, {"detail", g.detail}});
    j["all_pass"] = s.all_pass();
    j["artifacts"] = s.artifacts;
    write_file(path, j.dump(2) + "\n");
}

RunSummary run_scenario(const RunConfig& config) {
    validate_config(config);
    const auto t0 = std::chrono::steady_clock::now();
    RunSummary summary;
    summary.scenario = config.scenario;
    summary.seed = config.seed;
    summary.config_hash = fnv1a(canonical_config(config));
    const fs::path out(config.out_dir);
    std::error_code ec;
    fs::create_directories(out, ec);
    if (ec) throw IoError("cannot create " + out.string() + ": " + ec.message());
    Context ctx{config, out, summary};
    ctx.emit("config.ini", canonical_config(config));

    const std::string& s = config.scenario;
    if (s == "dke-decay") run_dke(ctx);
    else if (s == "reverse") run_reverse(ctx);
    else if (s == "compare-cbc") run_compare_cbc(ctx);
    else if (s == "sweep-bg") run_sweep(ctx);
    else if (s == "n2-case") run_n2(ctx);
    else if (s == "solver-compare") run_solver_compare(ctx);
    else if (s == "identities") run_identities(ctx);

    summary.gates = evaluate_gates(s, out, config);
    summary.artifacts.push_back("summary.json");
    summary.wall_clock_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    write_summary_json(out / "summary.json", summary);
    // Wall clock kept out of summary.json so that every byte there is reproducible.
    write_file(out / "timing.json", nlohmann::json{{"wall_clock_s", summary.wall_clock_s}}.dump() + "\n");
    return summary;
}

int exit_code(const RunSummary& summary) { return summary.all_pass() ? 0 : 1; }

}  // namespace finitekin
