#pragma once

#include "pathfbsde/feynman_kac.hpp"
#include "pathfbsde/functional_calculus.hpp"
#include "pathfbsde/problem.hpp"
#include "pathfbsde/solver.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace pathfbsde {

inline constexpr const char* kArtifactVersion = "1.0.0";

/// Names accepted in the `checks` list, in execution order.
const std::vector<std::string>& known_checks();

struct StartPoint {
    double t = 0.0;            ///< start time, rounded to the grid
    double level = 0.0;        ///< γ_t is constant at this level on [0, t]
    std::vector<double> x = {1.0};
};

struct UValueSettings {
    double abs_tol = 0.01;
    double rel_tol = 0.0;
    double n_se = 3.0;
};

struct ZRepSettings {
    double max_discrepancy = 0.05;
};

struct PpdeSettings {
    double max_budget = 0.1;
};

struct AssumptionSettings {
    std::size_t samples = 10000;
    double scale = 1.0;
};

struct ItoSettings {
    std::size_t paths = 64;
    std::vector<std::size_t> log2_steps = {4, 5, 6, 7, 8};
    double min_slope = 0.4;
};

struct SweepSpec {
    std::string field;          ///< dotted path, e.g. "solver.n_steps"
    std::vector<double> values;
};

struct ExperimentConfig {
    std::string problem = "coupled_ou";
    std::map<std::string, double> params;
    SolverConfig solver;
    FDConfig fd = [] {
        FDConfig f;
        f.h_vert = 0.1;
        return f;
    }();
    CheckSettings estimator;    ///< h_z is taken from fd.h_vert
    StartPoint start;
    std::vector<std::string> checks;
    UValueSettings u_value;
    ZRepSettings z_representation;
    FlowSettings flow;
    PpdeSettings ppde;
    RegularitySettings regularity;
    AssumptionSettings assumptions;
    ItoSettings ito;
    std::optional<SweepSpec> sweep;
    std::string output_dir = "pathfbsde_out";
};

/// Strict parse: unknown keys, wrong types and invalid values throw
/// ConfigError naming the field path and its line in `text`.
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& file);

/// Canonical document with every field present.
nlohmann::json to_json(const ExperimentConfig& cfg);

/// SHA-256 of the canonical document.
std::string config_fingerprint(const ExperimentConfig& cfg);
std::string sha256_hex(const std::string& bytes);

struct Table {
    std::string name;
    std::vector<std::string> header;
    std::vector<std::vector<double>> rows;
};

struct CheckResult {
    std::string name;
    Verdict verdict = Verdict::inconclusive;
    nlohmann::json report;
    std::vector<Table> tables;
};

struct SweepPoint {
    double value = 0.0;
    std::vector<CheckResult> checks;
};

struct RunRecord {
    std::string fingerprint;
    nlohmann::json config;
    std::vector<CheckResult> checks;
    std::vector<SweepPoint> sweep_points;
    std::optional<Table> sweep;     ///< value, step, u, se, exact, |error|, picard iterations
    nlohmann::json sweep_summary;
    std::string error;          ///< divergence diagnostics
    int exit_code = 0;
    double seconds = 0.0;

    /// Record without timing fields.
    nlohmann::json payload() const;
    nlohmann::json to_json() const;
    /// SHA-256 of payload().
    std::string payload_hash() const;
};

using Logger = std::function<void(const std::string&)>;

/// Runs the configured checks (and sweep, if present). Solver divergence is
/// captured in the record with exit code 3.
RunRecord run_experiment(const ExperimentConfig& cfg, const Logger& log = {});

/// record.json plus one CSV per table.
void write_outputs(const RunRecord& record, const std::filesystem::path& dir);

void write_csv(const Table& table, const std::filesystem::path& file);

/// Least-squares slope of log y against log x.
double loglog_slope(const std::vector<double>& x, const std::vector<double>& y);

/// Text table of the registry: id, parameters, formula.
std::string list_problems_text();

} // namespace pathfbsde
