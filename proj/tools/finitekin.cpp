#include <CLI11.hpp>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include "finitekin/core/error.hpp"
#include "finitekin/core/parallel.hpp"
#include "finitekin/harness.hpp"

using namespace finitekin;

namespace {

std::string read_text(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot read config " + path);
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

void print_summary(const RunSummary& s, const std::string& out) {
    std::cout << "scenario " << s.scenario << "  seed " << s.seed << "  out " << out << '\n';
    for (const auto& g : s.gates) {
        std::cout << "  " << to_string(g.outcome) << "  " << g.name;
        if (!g.detail.empty()) std::cout << "  (" << g.detail << ')';
        std::cout << '\n';
    }
    std::cout << (s.all_pass() ? "all gates pass" : "gates failed") << "  (" << s.wall_clock_s << " s)\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"finitekin: finite-N hard-sphere kinetic experiments"};
    std::string scenario, config_path, out;
    std::uint64_t seed = 0;
    int workers = 0;
    bool smoke = false, print_config = false;
    std::string catalog;
    for (const auto& s : scenario_catalog()) catalog += (catalog.empty() ? "" : ", ") + s;
    app.add_option("scenario", scenario, "one of: " + catalog)->required();
    app.add_option("--config", config_path, "INI config file");
    auto* seed_opt = app.add_option("--seed", seed, "master seed (overrides run.seed)");
    app.add_option("--out", out, "output directory (else $FINITEKIN_OUT, else out/<scenario>)");
    app.add_option("--workers", workers, "OpenMP threads (0: runtime default)")->check(CLI::NonNegativeNumber);
    app.add_flag("--smoke", smoke, "cut budgets to smoke size");
    app.add_flag("--print-config", print_config, "print the resolved config as INI and exit");
    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        RunConfig cfg = config_path.empty() ? parse_config("") : parse_config(read_text(config_path));
        cfg.scenario = scenario;  // the positional scenario wins over run.scenario
        if (seed_opt->count() > 0) cfg.seed = seed;
        if (smoke) cfg = smoke_config(cfg);
        if (out.empty()) {
            const char* env = std::getenv("FINITEKIN_OUT");
            out = env && *env ? std::string(env) : "out/" + scenario;
        }
        cfg.out_dir = out;
        validate_config(cfg);
        if (print_config) {
            std::cout << canonical_config(cfg);
            return 0;
        }
        if (workers > 0) set_worker_count(workers);
        const RunSummary s = run_scenario(cfg);
        print_summary(s, out);
        return exit_code(s);
    } catch (const ConfigError& e) {
        std::cerr << "config error:\n";
        for (const auto& p : e.problems()) std::cerr << "  " << p << '\n';
        return 2;
    } catch (const NumericalFault& e) {
        std::cerr << "numerical fault: " << e.what() << '\n';
        return 3;
    } catch (const InvariantViolation& e) {
        std::cerr << "invariant violation: " << e.what() << '\n';
        return 3;
    } catch (const IoError& e) {
        std::cerr << "i/o error: " << e.what() << '\n';
        return 4;
    } catch (const std::filesystem::filesystem_error& e) {
        std::cerr << "i/o error: " << e.what() << '\n';
        return 4;
    }
}
