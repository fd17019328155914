#include "pathfbsde/errors.hpp"
#include "pathfbsde/experiment.hpp"

#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

using namespace pathfbsde;

namespace {

const char* kSmall = R"({
  "problem": {"id": "path_integral"},
  "solver": {"n_steps": 8, "n_paths": 2000, "seed": 99},
  "start": {"t": 0.25, "level": 0.1, "x": [0.0]},
  "checks": ["u_value", "assumptions", "ito_residual"]
})";

ConfigError parse_error(const std::string& text) {
    try {
        parse_config(text);
    } catch (const ConfigError& e) {
        return e;
    }
    ADD_FAILURE() << "no ConfigError for: " << text;
    return ConfigError("", "");
}

} // namespace

TEST(Experiment, UnknownKeyNamesFieldAndLine) {
    const ConfigError e = parse_error("{\n  \"solver\": {\n    \"n_stepss\": 8\n  }\n}");
    EXPECT_EQ(e.field(), "solver.n_stepss");
    EXPECT_EQ(e.line(), 3u);
    EXPECT_NE(std::string(e.what()).find("n_stepss"), std::string::npos);
    EXPECT_EQ(parse_error("{\"verbose\": true}").field(), "verbose");
    EXPECT_EQ(parse_error("{\"settings\": {\"flow_property\": {\"nodes\": 3}}}").field(), "settings.flow_property.nodes");
}

TEST(Experiment, TypeAndValueErrors) {
    EXPECT_EQ(parse_error(R"({"solver": {"n_steps": "64"}})").field(), "solver.n_steps");
    EXPECT_EQ(parse_error(R"({"solver": {"n_paths": 10.5}})").field(), "solver.n_paths");
    EXPECT_EQ(parse_error(R"({"solver": {"damping": 0}})").field(), "solver");
    EXPECT_EQ(parse_error(R"({"checks": ["u_value", "magic"]})").field(), "checks");
    EXPECT_EQ(parse_error(R"({"checks": ["u_value", "u_value"]})").field(), "checks");
    EXPECT_EQ(parse_error(R"({"problem": {"id": "heston"}})").field(), "problem");
    EXPECT_EQ(parse_error(R"({"problem": {"params": {"kappa": 1}}})").field(), "problem");
    EXPECT_EQ(parse_error(R"({"start": {"x": [1, 2]}})").field(), "start");
    EXPECT_EQ(parse_error(R"({"fd": {"first_order": "backward"}})").field(), "fd");
    const ConfigError syntax = parse_error("{\n  \"checks\": [\n}");
    EXPECT_EQ(syntax.line(), 3u);
}

TEST(Experiment, SweepFieldMustExist) {
    EXPECT_EQ(parse_error(R"({"sweep": {"field": "solver.n_stepss", "values": [8]}})").field(), "sweep");
    EXPECT_EQ(parse_error(R"({"sweep": {"field": "problem.id", "values": [8]}})").field(), "sweep");
    EXPECT_EQ(parse_error(R"({"sweep": {"field": "solver.n_steps", "values": []}})").field(), "sweep");
    EXPECT_EQ(parse_error(R"({"sweep": {"field": "solver.damping", "values": [0.5, 2.0]}})").field(), "sweep");
    const ExperimentConfig cfg = parse_config(R"({"sweep": {"field": "solver.n_steps", "values": [8, 16]}})");
    ASSERT_TRUE(cfg.sweep.has_value());
    EXPECT_EQ(cfg.sweep->values.size(), 2u);
}

TEST(Experiment, CanonicalDocumentRoundTrips) {
    const ExperimentConfig cfg = parse_config(kSmall);
    EXPECT_EQ(cfg.solver.n_steps, 8u);
    EXPECT_EQ(cfg.solver.seed, 99u);
    EXPECT_EQ(cfg.solver.n_paths, 2000u);
    EXPECT_DOUBLE_EQ(cfg.fd.h_vert, 0.1);
    const ExperimentConfig again = parse_config(to_json(cfg).dump());
    EXPECT_EQ(to_json(again), to_json(cfg));
    EXPECT_EQ(config_fingerprint(again), config_fingerprint(cfg));
    ExperimentConfig other = cfg;
    other.solver.seed = 100;
    EXPECT_NE(config_fingerprint(other), config_fingerprint(cfg));
    other = cfg;
    other.output_dir = "elsewhere";
    EXPECT_EQ(config_fingerprint(other), config_fingerprint(cfg));
}

TEST(Experiment, Sha256KnownAnswer) {
    EXPECT_EQ(sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST(Experiment, LogLogSlope) {
    EXPECT_NEAR(loglog_slope({1.0, 2.0, 4.0}, {3.0, 12.0, 48.0}), 2.0, 1e-12);
    EXPECT_THROW(loglog_slope({1.0}, {1.0}), InvalidArgument);
    EXPECT_THROW(loglog_slope({1.0, 2.0}, {1.0, 0.0}), InvalidArgument);
}

TEST(Experiment, ListProblemsShowsEveryOracleAndFormula) {
    const std::string text = list_problems_text();
    for (const auto& e : problem_registry()) {
        EXPECT_NE(text.find(e.id), std::string::npos);
        EXPECT_NE(text.find(e.formula), std::string::npos);
    }
    EXPECT_NE(text.find("coupled_ou"), std::string::npos);
    EXPECT_NE(text.find("riccati"), std::string::npos);
    EXPECT_NE(text.find("path_integral"), std::string::npos);
}

TEST(Experiment, RunWritesRecordAndTables) {
    ExperimentConfig cfg = parse_config(kSmall);
    const auto dir = std::filesystem::temp_directory_path() / "pathfbsde_test_run";
    std::filesystem::remove_all(dir);
    const RunRecord rec = run_experiment(cfg);
    write_outputs(rec, dir);
    ASSERT_EQ(rec.checks.size(), 3u);
    EXPECT_EQ(rec.checks[0].name, "u_value");
    EXPECT_EQ(rec.checks[0].verdict, Verdict::pass);
    // g ignores x here, so the sampled g-monotonicity margin is zero.
    EXPECT_EQ(rec.checks[1].verdict, Verdict::fail);
    EXPECT_EQ(rec.checks[1].report["g_mono_hat"], 0.0);
    EXPECT_EQ(rec.checks[2].verdict, Verdict::pass);
    EXPECT_EQ(rec.exit_code, 1);
    EXPECT_TRUE(std::filesystem::exists(dir / "record.json"));
    EXPECT_TRUE(std::filesystem::exists(dir / "u_value_z.csv"));
    EXPECT_TRUE(std::filesystem::exists(dir / "ito_residual.csv"));
    std::ifstream in(dir / "record.json");
    const auto j = nlohmann::json::parse(in);
    EXPECT_EQ(j["payload_hash"], rec.payload_hash());
    EXPECT_EQ(j["config_fingerprint"], config_fingerprint(cfg));
    EXPECT_TRUE(j.contains("timing"));
    EXPECT_FALSE(rec.payload().contains("timing"));
    std::filesystem::remove_all(dir);
}

TEST(Experiment, PayloadIgnoresWorkerCount) {
    ExperimentConfig cfg = parse_config(kSmall);
    cfg.checks = {"u_value", "ito_residual"};
    ::setenv("PATHFBSDE_THREADS", "1", 1);
    const std::string a = run_experiment(cfg).payload_hash();
    ::setenv("PATHFBSDE_THREADS", "3", 1);
    const std::string b = run_experiment(cfg).payload_hash();
    ::unsetenv("PATHFBSDE_THREADS");
    EXPECT_EQ(a, b);
}

TEST(Experiment, SweepTabulatesErrors) {
    ExperimentConfig cfg = parse_config(R"({
      "problem": {"id": "path_integral"},
      "solver": {"n_paths": 2000},
      "checks": ["u_value"],
      "sweep": {"field": "solver.n_steps", "values": [4, 8, 16, 32]}
    })");
    const RunRecord rec = run_experiment(cfg);
    ASSERT_TRUE(rec.sweep.has_value());
    EXPECT_EQ(rec.sweep->rows.size(), 4u);
    EXPECT_EQ(rec.sweep_points.size(), 4u);
    EXPECT_EQ(rec.sweep_summary["field"], "solver.n_steps");
    EXPECT_DOUBLE_EQ(rec.sweep->rows[1][1], 0.125);
}
