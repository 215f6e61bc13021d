#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "finitekin/functionals.hpp"
#include "finitekin/occupation.hpp"
#include "finitekin/solver.hpp"

namespace finitekin {

inline const std::vector<std::string>& scenario_catalog() {
    static const std::vector<std::string> c{"dke-decay", "reverse",   "compare-cbc", "sweep-bg",
                                            "n2-case",   "solver-compare", "identities"};
    return c;
}

struct EnsembleConfig {
    std::size_t replicas = 512;
    double t_end = 60.0;
    int outputs = 20;
    bool record_events = false;
};

struct FunctionalsConfig {
    Vec3 b{1.0, 0.0, 0.0};
    bool average_axes = false;
    double A1 = 1.0;
    Cbc cbc = Cbc::Causal;
    std::uint64_t entropy_samples = 100'000;
    std::uint64_t km_samples = 200'000;
    std::uint64_t wm_samples = 200'000;
    std::uint64_t distance_samples = 100'000;
    bool km_cross_check = false;
    std::size_t probes = 512;
    KdeBoundary kde_boundary = KdeBoundary::None;
    double bandwidth_scale = 1.0;
};

struct SolverConfig {
    std::size_t particles = 200'000;
    int steps = 500;
    double dt = 1.0;
    double cell_size = 0.0;  // 0: sigma
    int refresh_every = 10;
    std::size_t kde_subsample = 4096;
    std::size_t pool_size = 4096;
    std::uint64_t occupation_samples = 200'000;
    std::size_t diag_subsample = 20'000;
    std::uint64_t diag_samples = 20'000;
    int diag_every = 100;
    int fixed_point_steps = 200;  // master run from a Maxwellian start; 0 skips it
    int fixed_point_every = 20;
};

struct SweepConfig {
    std::vector<BgMember> members{{4, 2.0}, {16, 1.0}, {64, 0.5}, {256, 0.25}};
    std::uint64_t k2_samples = 200'000;
};

struct ReverseConfig {
    // Retrace system size; its states are built by sequential placement, not by sample_initial.
    int n_particles = 32;
    std::uint64_t collisions = 50;
    std::size_t replicas_checked = 8;
    double tolerance = 1e-6;
};

struct IdentitiesConfig {
    std::uint64_t samples = 1'000'000;
    std::uint64_t scaling_min = 10'000;  // budget range for the error-scaling fit
    std::uint64_t scaling_max = 1'000'000;
};

struct N2Config {
    std::size_t probes = 1000;
    std::uint64_t samples = 10'000;
};

struct RunConfig {
    std::string scenario = "dke-decay";
    std::uint64_t seed = 1;
    std::string out_dir = "out";
    DomainSpec domain = [] {
        DomainSpec d;
        d.n_particles = 8;
        return d;
    }();
    InitialPdfSpec initial;
    EnsembleConfig ensemble;
    FunctionalsConfig functionals;
    OccupationOptions occupation;
    SolverConfig solver;
    SweepConfig sweep;
    ReverseConfig reverse;
    IdentitiesConfig identities;
    N2Config n2;
};

// Parses INI text ([section] key = value), fills defaults, range-checks. Throws ConfigError
// listing every problem with its field path; unknown sections and keys are errors.
RunConfig parse_config(const std::string& text);
// Range checks only (parse_config calls it).
void validate_config(const RunConfig& config);
// Every field in a fixed order as INI text that parse_config reads back to the same config.
std::string canonical_config(const RunConfig& config);
std::uint64_t fnv1a(const std::string& bytes);

// Budgets cut to smoke-test size (< 60 s per scenario).
RunConfig smoke_config(RunConfig config);

FunctionalConfig functional_config(const RunConfig& config);

enum class GateOutcome { Pass, Fail, NotApplicable };
const char* to_string(GateOutcome g);

struct GateResult {
    std::string name;
    GateOutcome outcome = GateOutcome::NotApplicable;
    std::string detail;
};

struct RunSummary {
    std::string scenario;
    std::uint64_t config_hash = 0;
    std::uint64_t seed = 0;
    std::map<std::string, std::uint64_t> seeds;
    std::vector<GateResult> gates;
    double wall_clock_s = 0.0;
    std::vector<std::string> artifacts;

    bool all_pass() const;
};

// Columns of a CSV file by header name. Non-numeric cells parse as NaN in numeric().
class CsvTable {
public:
    static CsvTable read(const std::filesystem::path& path);
    static CsvTable parse(const std::string& text);
    std::size_t rows() const { return cells_.size(); }
    bool has(const std::string& column) const;
    std::vector<double> numeric(const std::string& column) const;
    std::vector<std::string> text(const std::string& column) const;

private:
    std::vector<std::string> header_;
    std::vector<std::vector<std::string>> cells_;
    std::size_t index(const std::string& column) const;
};

struct RetraceResult {
    std::uint64_t collisions = 0;  // pair collisions inside the horizon
    double horizon = 0.0;
    double error = 0.0;  // max over particles of |dr| / box side and |dv| / |v0|
};

// simulate(T), reverse, simulate(T), reverse on one sequentially placed state, with T midway
// between the collisions-th and the next pair collision.
RetraceResult retrace_check(const InitialPdfSpec& spec, const DomainSpec& domain, std::uint64_t collisions,
                            std::uint64_t seed, std::uint64_t index);

// Gate checks over emitted artifacts.
GateResult gate_thm1(const CsvTable& series);
GateResult gate_thm2(const CsvTable& series);
GateResult gate_thm3(const CsvTable& series);
GateResult gate_cbc_sign(const CsvTable& wm);
GateResult gate_bg_limit(const CsvTable& sweep);
GateResult gate_n2(const CsvTable& k2);
GateResult gate_boltzmann_entropy(const CsvTable& boltzmann);
GateResult gate_constant_h(const CsvTable& master, const CsvTable& boltzmann);
GateResult gate_fixed_point(const CsvTable& fixed_point);
// Fails when any replica saw fewer than required_collisions pair collisions.
GateResult gate_retrace(const CsvTable& retrace, double tolerance, double required_collisions = 0.0);
GateResult gate_pmi(const std::string& name, const CsvTable& series);
std::vector<GateResult> gates_identities(const std::filesystem::path& identities_json);

// Re-evaluates the gates of a finished run from its output directory.
std::vector<GateResult> evaluate_gates(const std::string& scenario, const std::filesystem::path& out_dir,
                                       const RunConfig& config);

// Runs the scenario, writes artifacts into config.out_dir and summary.json, returns the summary.
// ConfigError, NumericalFault, InvariantViolation and IoError propagate.
RunSummary run_scenario(const RunConfig& config);

void write_summary_json(const std::filesystem::path& path, const RunSummary& summary);

// Exit code mapping: 0 pass, 1 gates failed, 2 config, 3 numerical, 4 I/O.
int exit_code(const RunSummary& summary);

}  // namespace finitekin
