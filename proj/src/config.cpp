#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <algorithm>
#include <charconv>
#include <functional>
#include <set>
#include <sstream>

#include "finitekin/core/error.hpp"
#include "finitekin/core/format.hpp"
#include "finitekin/harness.hpp"

namespace finitekin {

namespace {

std::string trim(std::string s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

double to_double(const std::string& s) {
    double x = 0.0;
    const auto t = trim(s);
    const auto res = std::from_chars(t.data(), t.data() + t.size(), x);
    if (res.ec != std::errc() || res.ptr != t.data() + t.size() || t.empty())
        throw std::invalid_argument("expected a number, got '" + s + "'");
    return x;
}

std::uint64_t to_u64(const std::string& s) {
    const auto t = trim(s);
    std::uint64_t x = 0;
    auto res = std::from_chars(t.data(), t.data() + t.size(), x);
    if (res.ec == std::errc() && res.ptr == t.data() + t.size() && !t.empty()) return x;
    // Allow exact scientific notation such as 1e6.
    const double d = to_double(t);
    if (d < 0.0 || d != std::floor(d) || d > 1.8e19) throw std::invalid_argument("expected a non-negative integer, got '" + s + "'");
    return std::uint64_t(d);
}

int to_int(const std::string& s) {
    const auto t = trim(s);
    int x = 0;
    const auto res = std::from_chars(t.data(), t.data() + t.size(), x);
    if (res.ec != std::errc() || res.ptr != t.data() + t.size() || t.empty())
        throw std::invalid_argument("expected an integer, got '" + s + "'");
    return x;
}

bool to_bool(const std::string& s) {
    const auto t = trim(s);
    if (t == "true" || t == "1" || t == "yes") return true;
    if (t == "false" || t == "0" || t == "no") return false;
    throw std::invalid_argument("expected true or false, got '" + s + "'");
}

Vec3 to_vec3(const std::string& s) {
    std::vector<double> xs;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) xs.push_back(to_double(item));
    if (xs.size() != 3) throw std::invalid_argument("expected three comma-separated numbers, got '" + s + "'");
    return {xs[0], xs[1], xs[2]};
}

std::string fmt_vec(const Vec3& v) { return fmt_double(v.x) + "," + fmt_double(v.y) + "," + fmt_double(v.z); }

struct Field {
    std::string path;
    std::function<void(RunConfig&, const std::string&)> set;
    std::function<std::string(const RunConfig&)> get;
};

template <class T>
Field num(std::string path, T RunConfig::*sec, auto member) {
    return {path,
            [sec, member](RunConfig& c, const std::string& v) {
                auto& field = (c.*sec).*member;
                using F = std::remove_reference_t<decltype(field)>;
                if constexpr (std::is_same_v<F, double>) field = to_double(v);
                else if constexpr (std::is_same_v<F, int>) field = to_int(v);
                else if constexpr (std::is_same_v<F, bool>) field = to_bool(v);
                else if constexpr (std::is_same_v<F, Vec3>) field = to_vec3(v);
                else field = F(to_u64(v));
            },
            [sec, member](const RunConfig& c) {
                const auto& field = (c.*sec).*member;
                using F = std::remove_cvref_t<decltype(field)>;
                if constexpr (std::is_same_v<F, double>) return fmt_double(field);
                else if constexpr (std::is_same_v<F, bool>) return std::string(field ? "true" : "false");
                else if constexpr (std::is_same_v<F, Vec3>) return fmt_vec(field);
                else return std::to_string(field);
            }};
}

const char* spatial_name(SpatialKind k) {
    switch (k) {
        case SpatialKind::Uniform: return "uniform";
        case SpatialKind::Ramp: return "ramp";
        case SpatialKind::Exponential: return "exponential";
    }
    return "uniform";
}

const std::vector<Field>& schema() {
    static const std::vector<Field> fields = [] {
        std::vector<Field> f;
        f.push_back({"run.scenario", [](RunConfig& c, const std::string& v) { c.scenario = trim(v); },
                     [](const RunConfig& c) { return c.scenario; }});
        f.push_back({"run.seed", [](RunConfig& c, const std::string& v) { c.seed = to_u64(v); },
                     [](const RunConfig& c) { return std::to_string(c.seed); }});

        f.push_back(num("domain.box_lo", &RunConfig::domain, &DomainSpec::box_lo));
        f.push_back(num("domain.box_hi", &RunConfig::domain, &DomainSpec::box_hi));
        f.push_back({"domain.box",
                     [](RunConfig& c, const std::string& v) {
                         const double s = to_double(v);
                         c.domain.box_lo = {};
                         c.domain.box_hi = {s, s, s};
                     },
                     nullptr});
        f.push_back(num("domain.sigma", &RunConfig::domain, &DomainSpec::sigma));
        f.push_back(num("domain.n_particles", &RunConfig::domain, &DomainSpec::n_particles));
        f.push_back(num("domain.mass", &RunConfig::domain, &DomainSpec::mass));

        f.push_back({"initial.spatial",
                     [](RunConfig& c, const std::string& v) {
                         const auto t = trim(v);
                         if (t == "uniform") c.initial.spatial.kind = SpatialKind::Uniform;
                         else if (t == "ramp") c.initial.spatial.kind = SpatialKind::Ramp;
                         else if (t == "exponential") c.initial.spatial.kind = SpatialKind::Exponential;
                         else throw std::invalid_argument("expected uniform, ramp or exponential, got '" + t + "'");
                     },
                     [](const RunConfig& c) { return std::string(spatial_name(c.initial.spatial.kind)); }});
        f.push_back({"initial.spatial_axis", [](RunConfig& c, const std::string& v) { c.initial.spatial.axis = to_int(v); },
                     [](const RunConfig& c) { return std::to_string(c.initial.spatial.axis); }});
        f.push_back({"initial.spatial_slope", [](RunConfig& c, const std::string& v) { c.initial.spatial.slope = to_double(v); },
                     [](const RunConfig& c) { return fmt_double(c.initial.spatial.slope); }});
        f.push_back({"initial.temperature",
                     [](RunConfig& c, const std::string& v) { c.initial.velocity.temperature = to_vec3(v); },
                     [](const RunConfig& c) { return fmt_vec(c.initial.velocity.temperature); }});
        f.push_back({"initial.drift", [](RunConfig& c, const std::string& v) { c.initial.velocity.drift = to_vec3(v); },
                     [](const RunConfig& c) { return fmt_vec(c.initial.velocity.drift); }});
        f.push_back({"initial.beam_speed",
                     [](RunConfig& c, const std::string& v) { c.initial.velocity.beam_speed = to_double(v); },
                     [](const RunConfig& c) { return fmt_double(c.initial.velocity.beam_speed); }});
        f.push_back({"initial.beam_axis",
                     [](RunConfig& c, const std::string& v) { c.initial.velocity.beam_axis = to_int(v); },
                     [](const RunConfig& c) { return std::to_string(c.initial.velocity.beam_axis); }});

        f.push_back(num("ensemble.replicas", &RunConfig::ensemble, &EnsembleConfig::replicas));
        f.push_back(num("ensemble.t_end", &RunConfig::ensemble, &EnsembleConfig::t_end));
        f.push_back(num("ensemble.outputs", &RunConfig::ensemble, &EnsembleConfig::outputs));
        f.push_back(num("ensemble.record_events", &RunConfig::ensemble, &EnsembleConfig::record_events));

        f.push_back({"functionals.b",
                     [](RunConfig& c, const std::string& v) {
                         const auto t = trim(v);
                         if (t == "x" || t == "y" || t == "z") c.functionals.b = DirectionSpec::axis(t[0] - 'x').b;
                         else c.functionals.b = to_vec3(t);
                     },
                     [](const RunConfig& c) { return fmt_vec(c.functionals.b); }});
        f.push_back(num("functionals.average_axes", &RunConfig::functionals, &FunctionalsConfig::average_axes));
        f.push_back(num("functionals.A1", &RunConfig::functionals, &FunctionalsConfig::A1));
        f.push_back({"functionals.cbc",
                     [](RunConfig& c, const std::string& v) {
                         const auto t = trim(v);
                         if (t == "causal") c.functionals.cbc = Cbc::Causal;
                         else if (t == "anticausal") c.functionals.cbc = Cbc::Anticausal;
                         else throw std::invalid_argument("expected causal or anticausal, got '" + t + "'");
                     },
                     [](const RunConfig& c) { return std::string(to_string(c.functionals.cbc)); }});
        f.push_back(num("functionals.entropy_samples", &RunConfig::functionals, &FunctionalsConfig::entropy_samples));
        f.push_back(num("functionals.km_samples", &RunConfig::functionals, &FunctionalsConfig::km_samples));
        f.push_back(num("functionals.wm_samples", &RunConfig::functionals, &FunctionalsConfig::wm_samples));
        f.push_back(num("functionals.distance_samples", &RunConfig::functionals, &FunctionalsConfig::distance_samples));
        f.push_back(num("functionals.km_cross_check", &RunConfig::functionals, &FunctionalsConfig::km_cross_check));
        f.push_back(num("functionals.probes", &RunConfig::functionals, &FunctionalsConfig::probes));
        f.push_back({"functionals.kde_boundary",
                     [](RunConfig& c, const std::string& v) {
                         const auto t = trim(v);
                         if (t == "none") c.functionals.kde_boundary = KdeBoundary::None;
                         else if (t == "reflect") c.functionals.kde_boundary = KdeBoundary::Reflect;
                         else throw std::invalid_argument("expected none or reflect, got '" + t + "'");
                     },
                     [](const RunConfig& c) {
                         return std::string(c.functionals.kde_boundary == KdeBoundary::None ? "none" : "reflect");
                     }});
        f.push_back(num("functionals.bandwidth_scale", &RunConfig::functionals, &FunctionalsConfig::bandwidth_scale));

        f.push_back(num("occupation.grid", &RunConfig::occupation, &OccupationOptions::grid));
        f.push_back(num("occupation.samples", &RunConfig::occupation, &OccupationOptions::samples));
        f.push_back(num("occupation.max_iterations", &RunConfig::occupation, &OccupationOptions::max_iterations));
        f.push_back(num("occupation.tolerance", &RunConfig::occupation, &OccupationOptions::tolerance));
        f.push_back(num("occupation.damping", &RunConfig::occupation, &OccupationOptions::damping));
        f.push_back({"occupation.variant",
                     [](RunConfig& c, const std::string& v) {
                         const auto t = trim(v);
                         if (t == "A") c.occupation.variant = ThetaVariant::A;
                         else if (t == "B") c.occupation.variant = ThetaVariant::B;
                         else throw std::invalid_argument("expected A or B, got '" + t + "'");
                     },
                     [](const RunConfig& c) { return std::string(to_string(c.occupation.variant)); }});

        f.push_back(num("solver.particles", &RunConfig::solver, &SolverConfig::particles));
        f.push_back(num("solver.steps", &RunConfig::solver, &SolverConfig::steps));
        f.push_back(num("solver.dt", &RunConfig::solver, &SolverConfig::dt));
        f.push_back(num("solver.cell_size", &RunConfig::solver, &SolverConfig::cell_size));
        f.push_back(num("solver.refresh_every", &RunConfig::solver, &SolverConfig::refresh_every));
        f.push_back(num("solver.kde_subsample", &RunConfig::solver, &SolverConfig::kde_subsample));
        f.push_back(num("solver.pool_size", &RunConfig::solver, &SolverConfig::pool_size));
        f.push_back(num("solver.occupation_samples", &RunConfig::solver, &SolverConfig::occupation_samples));
        f.push_back(num("solver.diag_subsample", &RunConfig::solver, &SolverConfig::diag_subsample));
        f.push_back(num("solver.diag_samples", &RunConfig::solver, &SolverConfig::diag_samples));
        f.push_back(num("solver.diag_every", &RunConfig::solver, &SolverConfig::diag_every));
        f.push_back(num("solver.fixed_point_steps", &RunConfig::solver, &SolverConfig::fixed_point_steps));
        f.push_back(num("solver.fixed_point_every", &RunConfig::solver, &SolverConfig::fixed_point_every));

        f.push_back({"sweep.members",
                     [](RunConfig& c, const std::string& v) {
                         // "N:sigma,N:sigma,..."
                         std::vector<BgMember> m;
                         std::stringstream ss(v);
                         std::string item;
                         while (std::getline(ss, item, ',')) {
                             const auto colon = item.find(':');
                             if (colon == std::string::npos)
                                 throw std::invalid_argument("expected N:sigma pairs, got '" + trim(item) + "'");
                             m.push_back({to_int(item.substr(0, colon)), to_double(item.substr(colon + 1))});
                         }
                         if (m.empty()) throw std::invalid_argument("no members");
                         c.sweep.members = m;
                     },
                     [](const RunConfig& c) {
                         std::string s;
                         for (const auto& m : c.sweep.members)
                             s += (s.empty() ? "" : ",") + std::to_string(m.n_particles) + ":" + fmt_double(m.sigma);
                         return s;
                     }});
        f.push_back(num("sweep.k2_samples", &RunConfig::sweep, &SweepConfig::k2_samples));

        f.push_back(num("reverse.n_particles", &RunConfig::reverse, &ReverseConfig::n_particles));
        f.push_back(num("reverse.collisions", &RunConfig::reverse, &ReverseConfig::collisions));
        f.push_back(num("reverse.replicas_checked", &RunConfig::reverse, &ReverseConfig::replicas_checked));
        f.push_back(num("reverse.tolerance", &RunConfig::reverse, &ReverseConfig::tolerance));

        f.push_back(num("identities.samples", &RunConfig::identities, &IdentitiesConfig::samples));
        f.push_back(num("identities.scaling_min", &RunConfig::identities, &IdentitiesConfig::scaling_min));
        f.push_back(num("identities.scaling_max", &RunConfig::identities, &IdentitiesConfig::scaling_max));

        f.push_back(num("n2.probes", &RunConfig::n2, &N2Config::probes));
        f.push_back(num("n2.samples", &RunConfig::n2, &N2Config::samples));
        return f;
    }();
    return fields;
}

void check(std::vector<std::string>& errs, bool ok, const std::string& path, const std::string& what) {
    if (!ok) errs.push_back(path + ": " + what);
}

}  // namespace

RunConfig parse_config(const std::string& text) {
    boost::property_tree::ptree tree;
    std::istringstream in(text);
    try {
        boost::property_tree::ini_parser::read_ini(in, tree);
    } catch (const boost::property_tree::ini_parser_error& e) {
        throw ConfigError("config: line " + std::to_string(e.line()) + ": " + e.message());
    }
    std::map<std::string, const Field*> by_path;
    for (const auto& f : schema()) by_path[f.path] = &f;

    RunConfig c;
    std::vector<std::string> errs;
    for (const auto& [section, body] : tree) {
        if (body.empty()) {
            errs.push_back(section + ": keys must be inside a [section]");
            continue;
        }
        for (const auto& [key, value] : body) {
            const std::string path = section + "." + key;
            const auto it = by_path.find(path);
            if (it == by_path.end()) {
                errs.push_back(path + ": unknown key");
                continue;
            }
            try {
                it->second->set(c, value.data());
            } catch (const std::exception& e) {
                errs.push_back(path + ": " + e.what());
            }
        }
    }
    // Range problems are reported alongside parse problems; unparsed fields keep their defaults.
    try {
        validate_config(c);
    } catch (const ConfigError& e) {
        errs.insert(errs.end(), e.problems().begin(), e.problems().end());
    }
    if (!errs.empty()) throw ConfigError(errs);
    return c;
}

void validate_config(const RunConfig& c) {
    std::vector<std::string> e;
    const auto& cat = scenario_catalog();
    check(e, std::find(cat.begin(), cat.end(), c.scenario) != cat.end(), "run.scenario",
          "'" + c.scenario + "' is not in the scenario catalog");
    try {
        c.domain.validate();
    } catch (const ConfigError& err) {
        e.insert(e.end(), err.problems().begin(), err.problems().end());
    }
    try {
        c.initial.validate(c.domain);
    } catch (const ConfigError& err) {
        e.insert(e.end(), err.problems().begin(), err.problems().end());
    } catch (const std::exception& err) {
        e.push_back(std::string("initial: ") + err.what());
    }
    check(e, c.ensemble.replicas > 0, "ensemble.replicas", "must be > 0");
    check(e, c.ensemble.t_end >= 0.0, "ensemble.t_end", "must be >= 0");
    check(e, c.ensemble.outputs >= 2, "ensemble.outputs", "must be >= 2");
    check(e, std::abs(norm(c.functionals.b) - 1.0) <= 1e-9, "functionals.b", "must be a unit vector");
    check(e, c.functionals.A1 > 0.0, "functionals.A1", "must be > 0");
    check(e, c.functionals.entropy_samples > 0, "functionals.entropy_samples", "must be > 0");
    check(e, c.functionals.km_samples > 0, "functionals.km_samples", "must be > 0");
    check(e, c.functionals.wm_samples > 0, "functionals.wm_samples", "must be > 0");
    check(e, c.functionals.distance_samples > 0, "functionals.distance_samples", "must be > 0");
    check(e, c.functionals.probes > 0, "functionals.probes", "must be > 0");
    check(e, c.functionals.bandwidth_scale > 0.0, "functionals.bandwidth_scale", "must be > 0");
    check(e, c.occupation.grid >= 3, "occupation.grid", "must be >= 3");
    check(e, c.occupation.samples > 0, "occupation.samples", "must be > 0");
    check(e, c.occupation.max_iterations >= 1, "occupation.max_iterations", "must be >= 1");
    check(e, c.occupation.tolerance > 0.0, "occupation.tolerance", "must be > 0");
    check(e, c.occupation.damping > 0.0 && c.occupation.damping <= 1.0, "occupation.damping", "must lie in (0, 1]");
    check(e, c.solver.particles >= 2, "solver.particles", "must be >= 2");
    check(e, c.solver.steps >= 0, "solver.steps", "must be >= 0 (0 skips the kernel comparison)");
    check(e, c.solver.steps > 0 || c.solver.fixed_point_steps > 0, "solver.steps",
          "solver.steps and solver.fixed_point_steps cannot both be 0");
    check(e, c.solver.dt > 0.0, "solver.dt", "must be > 0");
    check(e, c.solver.cell_size >= 0.0, "solver.cell_size", "must be >= 0 (0 selects sigma)");
    check(e, c.solver.refresh_every >= 1, "solver.refresh_every", "must be >= 1");
    check(e, c.solver.kde_subsample >= 16, "solver.kde_subsample", "must be >= 16");
    check(e, c.solver.pool_size > 0, "solver.pool_size", "must be > 0");
    check(e, c.solver.occupation_samples > 0, "solver.occupation_samples", "must be > 0");
    check(e, c.solver.diag_subsample >= 16, "solver.diag_subsample", "must be >= 16");
    check(e, c.solver.diag_samples > 0, "solver.diag_samples", "must be > 0");
    check(e, c.solver.diag_every >= 0, "solver.diag_every", "must be >= 0");
    check(e, c.solver.fixed_point_steps >= 0, "solver.fixed_point_steps", "must be >= 0");
    check(e, c.solver.fixed_point_every >= 1, "solver.fixed_point_every", "must be >= 1");
    check(e, c.sweep.members.size() >= 2, "sweep.members", "need at least two members");
    for (const auto& m : c.sweep.members)
        check(e, m.n_particles >= 1 && m.sigma > 0.0, "sweep.members", "N >= 1 and sigma > 0 required");
    check(e, c.sweep.k2_samples > 0, "sweep.k2_samples", "must be > 0");
    check(e, c.reverse.n_particles >= 2, "reverse.n_particles", "must be >= 2");
    check(e, c.reverse.collisions > 0, "reverse.collisions", "must be > 0");
    check(e, c.reverse.replicas_checked > 0, "reverse.replicas_checked", "must be > 0");
    check(e, c.reverse.tolerance > 0.0, "reverse.tolerance", "must be > 0");
    check(e, c.identities.samples > 0, "identities.samples", "must be > 0");
    check(e, c.identities.scaling_min > 0 && c.identities.scaling_max >= 10 * c.identities.scaling_min,
          "identities.scaling_max", "must be >= 10 x identities.scaling_min");
    check(e, c.n2.probes > 0, "n2.probes", "must be > 0");
    check(e, c.n2.samples > 0, "n2.samples", "must be > 0");
    if (!e.empty()) throw ConfigError(e);
}

std::string canonical_config(const RunConfig& c) {
    std::string out, section;
    for (const auto& f : schema()) {
        if (!f.get) continue;
        const auto dot = f.path.find('.');
        if (f.path.compare(0, dot, section) != 0 || section.size() != dot) {
            section = f.path.substr(0, dot);
            out += (out.empty() ? "[" : "\n[") + section + "]\n";
        }
        out += f.path.substr(dot + 1) + " = " + f.get(c) + "\n";
    }
    return out;
}

std::uint64_t fnv1a(const std::string& bytes) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char ch : bytes) {
        h ^= ch;
        h *= 0x100000001b3ull;
    }
    return h;
}

RunConfig smoke_config(RunConfig c) {
    auto cap = [](auto& x, auto limit) { x = std::min<std::remove_reference_t<decltype(x)>>(x, limit); };
    cap(c.ensemble.replicas, std::size_t(64));
    cap(c.ensemble.outputs, 3);
    cap(c.ensemble.t_end, 10.0);
    cap(c.functionals.entropy_samples, std::uint64_t(4000));
    cap(c.functionals.km_samples, std::uint64_t(4000));
    cap(c.functionals.wm_samples, std::uint64_t(4000));
    cap(c.functionals.distance_samples, std::uint64_t(4000));
    cap(c.functionals.probes, std::size_t(64));
    cap(c.occupation.samples, std::uint64_t(20'000));
    cap(c.occupation.grid, 5);
    cap(c.solver.particles, std::size_t(5000));
    cap(c.solver.steps, 10);
    cap(c.solver.kde_subsample, std::size_t(512));
    cap(c.solver.pool_size, std::size_t(512));
    cap(c.solver.occupation_samples, std::uint64_t(20'000));
    cap(c.solver.diag_subsample, std::size_t(1000));
    cap(c.solver.diag_samples, std::uint64_t(1000));
    cap(c.solver.fixed_point_steps, 10);
    c.solver.diag_every = std::min(c.solver.diag_every, 5);
    c.solver.fixed_point_every = std::min(c.solver.fixed_point_every, 5);
    cap(c.sweep.k2_samples, std::uint64_t(5000));
    cap(c.reverse.replicas_checked, std::size_t(2));
    cap(c.identities.samples, std::uint64_t(20'000));
    cap(c.identities.scaling_min, std::uint64_t(2000));
    cap(c.identities.scaling_max, std::uint64_t(20'000));
    cap(c.n2.probes, std::size_t(100));
    cap(c.n2.samples, std::uint64_t(1000));
    return c;
}

}  // namespace finitekin
