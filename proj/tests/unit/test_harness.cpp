#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "finitekin/core/error.hpp"
#include "finitekin/harness.hpp"

using namespace finitekin;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

std::vector<std::string> problems_of(const std::string& text) {
    try {
        parse_config(text);
    } catch (const ConfigError& e) {
        return e.problems();
    }
    return {};
}

bool mentions(const std::vector<std::string>& problems, const std::string& path) {
    for (const auto& p : problems)
        if (p.rfind(path, 0) == 0) return true;
    return false;
}

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("finitekin_test_harness_" + name);
    fs::remove_all(p);
    return p;
}

// A ramp start keeps K_M(0) away from zero.
const std::string kRamp = "[initial]\nspatial = ramp\nspatial_slope = 0.15\n";

RunConfig smoke(const std::string& scenario, const std::string& extra, const std::string& out,
                std::uint64_t seed = 1) {
    auto c = smoke_config(parse_config("[run]\nscenario = " + scenario + "\nseed = " + std::to_string(seed) + "\n" + extra));
    c.out_dir = scratch(out).string();
    return c;
}

}  // namespace

TEST_CASE("minimal config fills defaults") {
    const auto c = parse_config("[run]\nscenario = dke-decay\n");
    const RunConfig d;
    CHECK(c.scenario == "dke-decay");
    CHECK(c.seed == d.seed);
    CHECK(c.domain.sigma == d.domain.sigma);
    CHECK(c.domain.n_particles == 8);
    CHECK(c.ensemble.replicas == 512);
    CHECK(c.ensemble.outputs == 20);
    CHECK(c.solver.particles == 200'000);
    CHECK(canonical_config(c) == canonical_config(d));
    CHECK(parse_config("").scenario == d.scenario);
}

TEST_CASE("sigma <= 0 is rejected with its field path") {
    for (const char* s : {"0", "-1"}) {
        const auto p = problems_of(std::string("[domain]\nsigma = ") + s + "\n");
        CHECK(mentions(p, "domain.sigma"));
    }
}

TEST_CASE("unknown keys and sections are rejected") {
    CHECK(mentions(problems_of("[domain]\nsigmaa = 1\n"), "domain.sigmaa"));
    CHECK(!problems_of("[nonsense]\nx = 1\n").empty());
    CHECK(!problems_of("seed = 3\n").empty());
    CHECK(!problems_of("[run]\nscenario = nope\n").empty());
}

TEST_CASE("errors are aggregated") {
    const auto p = problems_of("[domain]\nsigma = -1\n[ensemble]\nreplicas = 0\n[run]\nseed = x\n");
    CHECK(mentions(p, "domain.sigma"));
    CHECK(mentions(p, "ensemble.replicas"));
    CHECK(mentions(p, "run.seed"));
}

TEST_CASE("scientific integer budgets") {
    CHECK(parse_config("[identities]\nsamples = 1e6\n").identities.samples == 1'000'000);
    CHECK(!problems_of("[identities]\nsamples = 1.5\n").empty());
}

TEST_CASE("canonical text round trips and hashes stably") {
    const auto c = parse_config(
        "[run]\nscenario = sweep-bg\nseed = 99\n[domain]\nn_particles = 4\nbox = 12\n[functionals]\nb = 0,1,0\n"
        "cbc = anticausal\n[sweep]\nmembers = 4:2,16:1\n");
    const std::string text = canonical_config(c);
    const auto back = parse_config(text);
    CHECK(canonical_config(back) == text);
    CHECK(fnv1a(text) == fnv1a(canonical_config(back)));
    CHECK(back.sweep.members.size() == 2);
    CHECK(back.functionals.cbc == Cbc::Anticausal);
    CHECK(fnv1a(text) != fnv1a(canonical_config(RunConfig{})));
    CHECK(fnv1a("") == 0xcbf29ce484222325ull);
}

TEST_CASE("csv table reads columns by name") {
    const auto t = CsvTable::parse("a,b,c\n1,x,2.5\n-3,y,\n");
    CHECK(t.rows() == 2);
    CHECK(t.has("b"));
    CHECK(!t.has("d"));
    CHECK(t.numeric("a") == std::vector<double>{1.0, -3.0});
    CHECK(t.text("b") == std::vector<std::string>{"x", "y"});
    CHECK(std::isnan(t.numeric("c")[1]));
    CHECK_THROWS_AS(t.numeric("d"), IoError);
    CHECK_THROWS_AS(CsvTable::parse("a,b\n1\n"), IoError);
}

TEST_CASE("gates on synthetic artifacts") {
    const auto ok = CsvTable::parse("k2,k2_err\n1,0\n1,0\n");
    CHECK(gate_n2(ok).outcome == GateOutcome::Pass);
    CHECK(gate_n2(CsvTable::parse("k2,k2_err\n1,0\n0.999,0.001\n")).outcome == GateOutcome::Fail);

    const auto sweep = CsvTable::parse("k1,k1_err\n0.7,0.001\n0.9,0.001\n0.97,0.001\n0.99,0.001\n");
    CHECK(gate_bg_limit(sweep).outcome == GateOutcome::Pass);
    const auto flat = CsvTable::parse("k1,k1_err\n0.7,0.001\n0.7,0.001\n0.99,0.001\n");
    CHECK(gate_bg_limit(flat).outcome == GateOutcome::Fail);

    const auto cbc = CsvTable::parse(
        "W_causal,W_causal_err,W_anticausal,W_anticausal_err\n-1,0.1,0.9,0.1\n0.05,0.1,-0.05,0.1\n");
    CHECK(gate_cbc_sign(cbc).outcome == GateOutcome::Pass);
    const auto bad = CsvTable::parse("W_causal,W_causal_err,W_anticausal,W_anticausal_err\n-1,0.1,-0.9,0.1\n");
    CHECK(gate_cbc_sign(bad).outcome == GateOutcome::Fail);

    const auto b = CsvTable::parse("S,S_err\n1,0.01\n2,0.01\n");
    const auto m = CsvTable::parse("S,S_err\n1,0.01\n1.1,0.01\n");
    CHECK(gate_boltzmann_entropy(b).outcome == GateOutcome::Pass);
    CHECK(gate_constant_h(m, b).outcome == GateOutcome::Pass);
    CHECK(gate_constant_h(b, b).outcome == GateOutcome::Fail);

    CHECK(gate_retrace(CsvTable::parse("error\n1e-12\n3e-9\n"), 1e-6).outcome == GateOutcome::Pass);
    CHECK(gate_retrace(CsvTable::parse("error\n1e-12\nnan\n"), 1e-6).outcome == GateOutcome::Fail);
    const auto short_run = CsvTable::parse("collisions,error\n50,1e-12\n12,1e-12\n");
    CHECK(gate_retrace(short_run, 1e-6, 12).outcome == GateOutcome::Pass);
    CHECK(gate_retrace(short_run, 1e-6, 50).outcome == GateOutcome::Fail);
}

TEST_CASE("dke-decay smoke run emits rows and a complete summary") {
    const auto c = smoke("dke-decay", kRamp + "[ensemble]\nrecord_events = true\n", "dke");
    const auto s = run_scenario(c);
    const fs::path out(c.out_dir);
    const auto series = CsvTable::read(out / "series.csv");
    CHECK(series.rows() >= 2);
    CHECK(fs::exists(out / "summary.json"));
    CHECK(fs::exists(out / "events.csv"));
    for (const char* g : {"thm1", "thm2", "thm3", "constant_h", "identity_suite"}) {
        bool found = false;
        for (const auto& r : s.gates) found = found || r.name == g;
        CHECK_MESSAGE(found, g);
    }
    CHECK(s.config_hash == fnv1a(canonical_config(c)));
    CHECK(parse_config(slurp(out / "config.ini")).seed == c.seed);
    // Offline gate evaluation from the stored artifacts matches the run.
    const auto again = evaluate_gates("dke-decay", out, c);
    REQUIRE(again.size() == s.gates.size());
    for (std::size_t i = 0; i < again.size(); ++i) CHECK(again[i].outcome == s.gates[i].outcome);
}

TEST_CASE("same config and seed give identical bytes") {
    auto a = smoke("dke-decay", kRamp, "det_a", 5);
    auto b = a;
    b.out_dir = scratch("det_b").string();
    run_scenario(a);
    run_scenario(b);
    for (const char* f : {"series.csv", "summary.json", "config.ini"})
        CHECK_MESSAGE(slurp(fs::path(a.out_dir) / f) == slurp(fs::path(b.out_dir) / f), f);
    auto c = a;
    c.seed = 6;
    c.out_dir = scratch("det_c").string();
    run_scenario(c);
    CHECK(slurp(fs::path(a.out_dir) / "series.csv") != slurp(fs::path(c.out_dir) / "series.csv"));
}

TEST_CASE("n2-case k2 column is identically 1") {
    const auto c = smoke("n2-case", "[domain]\nn_particles = 2\n", "n2");
    const auto s = run_scenario(c);
    const auto k2 = CsvTable::read(fs::path(c.out_dir) / "k2.csv");
    CHECK(k2.rows() == c.n2.probes);
    for (double x : k2.numeric("k2")) CHECK(x == 1.0);
    for (double x : k2.numeric("k2_err")) CHECK(x == 0.0);
    CHECK(exit_code(s) == 0);
}

TEST_CASE("n2-case refuses other particle counts") {
    const auto c = smoke("n2-case", "[domain]\nn_particles = 3\n", "n3");
    CHECK_THROWS_AS(run_scenario(c), ConfigError);
}

TEST_CASE("every scenario runs at smoke scale") {
    for (const auto& name : scenario_catalog()) {
        if (name == "dke-decay" || name == "n2-case") continue;
        std::string extra;
        if (name == "sweep-bg") extra = "[sweep]\nmembers = 4:1,16:0.5,64:0.25\n";
        if (name == "reverse") extra = kRamp;
        if (name == "compare-cbc") extra = kRamp;
        if (name == "identities") extra = "[domain]\nn_particles = 4\n" + kRamp;
        const auto c = smoke(name, extra, "all_" + name);
        RunSummary s;
        CHECK_NOTHROW(s = run_scenario(c));
        bool any = false;
        for (const auto& g : s.gates) any = any || g.outcome != GateOutcome::NotApplicable;
        CHECK_MESSAGE(any, name);
    }
}
