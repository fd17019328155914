#include "pathfbsde/errors.hpp"
#include "pathfbsde/experiment.hpp"

#include "CLI11.hpp"

#include <iostream>
#include <optional>

namespace {

constexpr int kUsageError = 2;

int run_command(const std::string& file, bool require_sweep, const std::optional<std::uint64_t>& seed,
                const std::optional<std::string>& out, bool quiet) {
    using namespace pathfbsde;
    ExperimentConfig cfg = load_config(file);
    if (seed) cfg.solver.seed = *seed;
    if (out) cfg.output_dir = *out;
    if (require_sweep && !cfg.sweep) throw ConfigError("config field 'sweep' is required by the sweep command", "sweep");
    if (cfg.checks.empty()) throw ConfigError("config field 'checks' lists no checks", "checks");

    Logger log;
    if (!quiet) log = [](const std::string& line) { std::cerr << "[pathfbsde] " << line << '\n'; };
    const RunRecord rec = run_experiment(cfg, log);
    write_outputs(rec, cfg.output_dir);
    if (!quiet) {
        for (const auto& c : rec.checks) std::cout << c.name << ": " << to_string(c.verdict) << '\n';
        for (const auto& p : rec.sweep_points)
            for (const auto& c : p.checks) std::cout << cfg.sweep->field << "=" << p.value << " " << c.name << ": " << to_string(c.verdict) << '\n';
        if (rec.sweep) std::cout << "sweep slope: " << rec.sweep_summary["slope"] << '\n';
        if (!rec.error.empty()) std::cout << "diverged: " << rec.error << '\n';
        std::cout << "record: " << (std::filesystem::path(cfg.output_dir) / "record.json").string() << '\n';
    }
    return rec.exit_code;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Path-dependent FBSDE solver and verification harness"};
    app.require_subcommand(1);

    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
    bool quiet = false;
    std::string file;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("config", file, "experiment config (JSON)")->required();
        sub->add_option("--seed", seed, "override solver.seed");
        sub->add_option("--out", out, "override output_dir");
        sub->add_flag("--quiet", quiet, "suppress progress and summary output");
    };
    CLI::App* run = app.add_subcommand("run", "run the configured checks");
    add_common(run);
    CLI::App* sweep = app.add_subcommand("sweep", "run a config that carries a sweep");
    add_common(sweep);
    app.add_subcommand("list-problems", "list the built-in oracle problems");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kUsageError;
    }

    try {
        if (app.got_subcommand("list-problems")) {
            std::cout << pathfbsde::list_problems_text();
            return 0;
        }
        return run_command(file, app.got_subcommand("sweep"), seed, out, quiet);
    } catch (const pathfbsde::ConfigError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kUsageError;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kUsageError;
    }
}
