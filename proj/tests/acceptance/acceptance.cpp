// Acceptance suite: one criterion per invocation, one PASS/FAIL line each.
//
//   acceptance <n>     run criterion n (1..12)
//   acceptance all     run every criterion in order

#include "pathfbsde/errors.hpp"
#include "pathfbsde/experiment.hpp"
#include "pathfbsde/feynman_kac.hpp"
#include "pathfbsde/functional_calculus.hpp"
#include "pathfbsde/problem.hpp"
#include "pathfbsde/rng.hpp"
#include "pathfbsde/solver.hpp"

#include <boost/numeric/odeint.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <string>
#include <vector>

using namespace pathfbsde;

namespace {

// Tolerances.
constexpr double kValueSe = 3.0;
constexpr double kValueAbs = 0.01;
constexpr double kCoupledZ = 0.5;
constexpr double kCoupledZTol = 0.05;
constexpr double kRiccatiRel = 0.02;
constexpr double kDzTol = 0.02;
constexpr double kZRepTol = 0.05;
constexpr double kFlowSe = 3.0;
constexpr double kFlowAllowance = 0.02;
constexpr double kPpdeBudgetCap = 0.1;
constexpr double kRegularitySpread = 4.0;
constexpr std::size_t kAssumptionSamples = 10000;
constexpr double kPicardRatio = 0.9;
constexpr std::size_t kPicardIters = 25;
constexpr double kPicardDamping = 0.5;
constexpr double kItoSlope = 0.4;
constexpr double kFdExact = 1e-10;
constexpr double kFdSlopeLo = 1.8;
constexpr double kFdSlopeHi = 2.2;

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

SolverConfig default_config() { return SolverConfig{}; }

Eigen::VectorXd scalar(double v) { return Eigen::VectorXd::Constant(1, v); }

GridPath start_path(const SolverConfig& cfg, double T) { return GridPath::constant(0.0, cfg.dt(T), 0.0); }

// A non-constant Brownian-looking path on [0, t].
GridPath sample_path(double dt, std::size_t last) {
    const IncrementSource src(777, 1, 1, dt);
    std::vector<double> v(last + 1, 0.2);
    for (std::size_t i = 0; i < last; ++i) {
        double inc = 0.0;
        src.fill(0, i, {&inc, 1});
        v[i + 1] = v[i] + inc;
    }
    return GridPath(1, dt, v);
}

double odeint_phi0(double G, double T) {
    using namespace boost::numeric::odeint;
    const RiccatiCoefficients a;
    std::vector<double> state = {G};
    auto rhs = [&](const std::vector<double>& p, std::vector<double>& dp, double) {
        dp[0] = a.h1 + a.h2 * p[0] - p[0] * (a.b1 + a.b2 * p[0]);
    };
    integrate_adaptive(make_controlled(1e-13, 1e-13, runge_kutta_fehlberg78<std::vector<double>>()), rhs, state, T, 0.0, -1e-3);
    return state[0];
}

std::vector<std::pair<std::string, OracleProblem>> oracles() {
    return {{"coupled_ou", oracle_coupled_ou(1.0, 1.0, 1.0)},
            {"riccati", make_problem("riccati")},
            {"path_integral", oracle_path_integral(1.0)}};
}

double slope(const std::vector<double>& x, const std::vector<double>& y) { return loglog_slope(x, y); }

// ---------------------------------------------------------------------------

Outcome c01_coupled_value() {
    const auto op = oracle_coupled_ou(1.0, 1.0, 1.0);
    const SolverConfig cfg = default_config();
    const EnsembleSolution sol = picard_solve(op.coeffs, start_path(cfg, 1.0), scalar(1.0), cfg);
    const double err = std::abs(sol.u_value[0] - 1.0);
    const double tol = kValueSe * sol.u_se[0] + kValueAbs;
    double zm = 0.0;
    for (std::size_t i = 1; i < sol.n_steps(); ++i)
        for (std::size_t p = 0; p < sol.n_paths(); ++p) zm += sol.z(p, i)[0];
    zm /= static_cast<double>((sol.n_steps() - 1) * sol.n_paths());
    const bool pass = err <= tol && std::abs(zm - kCoupledZ) <= kCoupledZTol;
    return {pass, fmt("u=%.5f se=%.5f |u-1|=%.5f<=%.5f, interior Z mean=%.5f (target 0.5 +- %.2f)", sol.u_value[0],
                      sol.u_se[0], err, tol, zm, kCoupledZTol)};
}

Outcome c02_riccati() {
    const auto op = make_problem("riccati");
    const SolverConfig cfg = default_config();
    const EnsembleSolution sol = picard_solve(op.coeffs, start_path(cfg, 1.0), scalar(1.0), cfg);
    const double phi0 = odeint_phi0(2.0, 1.0);
    const double rel = std::abs(sol.u_value[0] - phi0) / std::abs(phi0);
    return {rel <= kRiccatiRel, fmt("u=%.5f phi(0)=%.6f rel=%.4f<=%.2f", sol.u_value[0], phi0, rel, kRiccatiRel)};
}

Outcome c03_path_integral() {
    const auto op = oracle_path_integral(1.0);
    const FunctionalEstimator est(op.coeffs, default_config());
    FDConfig fd;
    fd.h_vert = 0.1;
    bool pass = true;
    std::string detail;
    for (double t : {0.25, 0.5, 0.75}) {
        const auto node = static_cast<std::size_t>(std::llround(t / est.dt()));
        const GridPath g = sample_path(est.dt(), node);
        const Estimate u = evaluate_u(est, g, scalar(0.0));
        // Closed form evaluated directly: left-point integral plus endpoint times remaining time.
        double integral = 0.0;
        for (std::size_t i = 0; i < node; ++i) integral += g.node(i)[0] * est.dt();
        const double exact = integral + g.last()[0] * (1.0 - g.time());
        const double dz = vertical_derivative(est.u_functional(), g, scalar(0.0), fd)(0, 0);
        const double err = std::abs(u.value[0] - exact), tol = kValueSe * u.se[0] + kValueAbs;
        const double dz_err = std::abs(dz - (1.0 - t));
        pass = pass && err <= tol && dz_err <= kDzTol;
        detail += fmt("t=%.2f: |u-exact|=%.5f<=%.5f, |Dz u-(T-t)|=%.2e; ", t, err, tol, dz_err);
    }
    return {pass, detail};
}

Outcome c04_z_representation() {
    bool pass = true;
    std::string detail;
    for (const auto& [id, op] : oracles()) {
        const FunctionalEstimator est(op.coeffs, default_config());
        const auto r = z_representation_check(est, start_path(est.config(), op.coeffs.T), scalar(1.0));
        pass = pass && r.discrepancy <= kZRepTol;
        detail += fmt("%s: z0=%.4f sigma*grad=%.4f Dz=%.4f discrepancy=%.4f; ", id.c_str(), r.z0(0, 0), r.sigma_grad(0, 0),
                      r.dz_u(0, 0), r.discrepancy);
    }
    return {pass, detail + fmt("limit %.2f", kZRepTol)};
}

Outcome c05_flow() {
    const auto op = oracle_coupled_ou(1.0, 1.0, 1.0);
    const FunctionalEstimator est(op.coeffs, default_config());
    FlowSettings fs;
    fs.n_nodes = 8;
    fs.n_probe_paths = 16;
    fs.n_se = kFlowSe;
    fs.allowance = kFlowAllowance;
    const FlowReport r = flow_property_check(est, start_path(est.config(), 1.0), scalar(1.0), fs);
    std::size_t failed = 0;
    for (const auto& p : r.probes) failed += p.pass ? 0 : 1;
    const bool pass = r.probes.size() == 128 && failed == 0;
    return {pass, fmt("%zu probes, %zu over budget, max deviation=%.4f, max deviation/budget=%.3f", r.probes.size(), failed,
                      r.max_deviation, r.max_relative)};
}

Outcome c06_ppde() {
    bool pass = true;
    std::string detail;
    for (const auto& [id, op] : oracles()) {
        const FunctionalEstimator est(op.coeffs, default_config());
        const auto r = ppde_residual(est, start_path(est.config(), op.coeffs.T), scalar(1.0));
        const bool ok = std::abs(r.residual[0]) <= r.budget[0] && r.budget[0] <= kPpdeBudgetCap;
        pass = pass && ok;
        detail += fmt("%s: residual=%.4f budget=%.4f (se=%.4f trunc=%.4f); ", id.c_str(), r.residual[0], r.budget[0], r.se[0],
                      r.truncation[0]);
    }
    return {pass, detail + fmt("budget cap %.2f", kPpdeBudgetCap)};
}

Outcome c07_regularity() {
    bool pass = true;
    std::string detail;
    RegularitySettings rs;
    rs.bumps = {0.01, 0.02, 0.04};
    rs.shifts = {1, 2, 4};
    rs.max_spread = kRegularitySpread;
    rs.difference_quotients = false;
    for (const auto& [id, op] : oracles()) {
        const FunctionalEstimator est(op.coeffs, default_config());
        const auto r = regularity_probe(est, start_path(est.config(), op.coeffs.T), scalar(1.0), rs);
        pass = pass && r.max_spread <= kRegularitySpread;
        detail += fmt("%s: max spread=%.3f", id.c_str(), r.max_spread);
        for (const auto& [k, v] : r.spread) detail += fmt(" %s=%.3g", k.c_str(), v);
        detail += "; ";
    }
    return {pass, detail + fmt("limit %.1f", kRegularitySpread)};
}

Outcome c08_monotonicity() {
    bool pass = true;
    std::string detail;
    const std::size_t steps = default_config().n_steps;
    for (const auto& [id, op] : oracles()) {
        const auto r = check_assumptions(op.coeffs, gaussian_sampler(op.coeffs, steps, 8), kAssumptionSamples);
        const bool ok = r.verdict == Verdict::pass && r.c2_hat > 0.0;
        pass = pass && ok;
        detail += fmt("%s: %s c2=%.3g g_mono=%.3g; ", id.c_str(), to_string(r.verdict), r.c2_hat, r.g_mono_hat);
    }
    const CoefficientSet flipped = sign_flipped_problem(1.0);
    const auto r = check_assumptions(flipped, gaussian_sampler(flipped, steps, 8), kAssumptionSamples);
    pass = pass && r.verdict == Verdict::fail;
    detail += fmt("sign_flipped: %s c2=%.3g", to_string(r.verdict), r.c2_hat);
    return {pass, detail};
}

Outcome c09_picard() {
    bool pass = true;
    std::string detail;
    for (const auto& [id, op] : oracles()) {
        SolverConfig cfg = default_config();
        cfg.damping = kPicardDamping;
        cfg.throw_on_no_convergence = false;
        const auto sol = picard_solve(op.coeffs, start_path(cfg, op.coeffs.T), scalar(1.0), cfg);
        const auto& h = sol.picard_history;
        const double ratio = h.size() >= 2 ? h.back() / h[h.size() - 2] : 0.0;
        const bool ok = sol.converged && ratio < kPicardRatio && sol.picard_iters <= kPicardIters;
        pass = pass && ok;
        detail += fmt("%s: converged=%d iters=%zu ratio=%.3f; ", id.c_str(), sol.converged ? 1 : 0, sol.picard_iters, ratio);
    }
    return {pass, detail};
}

Outcome c10_ito() {
    PathFunctional u;
    u.eval = [](const GridPath& p, const Eigen::VectorXd&) { return scalar(p.last()[0] * p.last()[0]); };
    u.m = u.n = u.d = 1;
    u.label = "square";
    constexpr std::size_t paths = 256;
    std::vector<double> dts, rms;
    for (int k = 4; k <= 8; ++k) {
        const std::size_t steps = std::size_t{1} << k;
        const double dt = 1.0 / static_cast<double>(steps);
        const IncrementSource src(2024, paths, 1, dt);
        const std::vector<Eigen::MatrixXd> qv(steps, Eigen::MatrixXd::Constant(1, 1, dt));
        double s2 = 0.0;
        for (std::size_t p = 0; p < paths; ++p) {
            std::vector<double> v(steps + 1, 0.0);
            for (std::size_t i = 0; i < steps; ++i) {
                double inc = 0.0;
                src.fill(p, i, {&inc, 1});
                v[i + 1] = v[i] + inc;
            }
            const double r = ito_residual(u, GridPath(1, dt, v), qv, FDConfig{});
            s2 += r * r;
        }
        dts.push_back(dt);
        rms.push_back(std::sqrt(s2 / static_cast<double>(paths)));
    }
    const double s = slope(dts, rms);
    return {s >= kItoSlope, fmt("rms residual %.4f -> %.4f over dt 2^-4..2^-8, slope=%.3f>=%.1f", rms.front(), rms.back(), s, kItoSlope)};
}

Outcome c11_determinism() {
    ExperimentConfig cfg = parse_config(R"({
      "problem": {"id": "coupled_ou"},
      "solver": {"n_steps": 16, "n_paths": 4000, "throw_on_no_convergence": false},
      "checks": ["u_value", "z_representation", "flow_property", "ppde_residual", "regularity", "assumptions", "ito_residual"],
      "settings": {
        "flow_property": {"n_nodes": 3, "n_probe_paths": 4, "sub_paths": 2000},
        "ppde_residual": {"max_budget": 10.0}
      }
    })");
    auto hash_with = [&](const char* threads) {
        if (threads) ::setenv("PATHFBSDE_THREADS", threads, 1);
        else ::unsetenv("PATHFBSDE_THREADS");
        return run_experiment(cfg).payload_hash();
    };
    const std::string a = hash_with("1"), b = hash_with("4"), c = hash_with(nullptr);

    ExperimentConfig full = parse_config(R"({"problem": {"id": "coupled_ou"}, "checks": ["u_value"]})");
    auto full_hash = [&](const char* threads) {
        ::setenv("PATHFBSDE_THREADS", threads, 1);
        return run_experiment(full).payload_hash();
    };
    const std::string d = full_hash("1"), e = full_hash("3");
    ::unsetenv("PATHFBSDE_THREADS");
    const bool pass = a == b && b == c && d == e;
    return {pass, fmt("suite payload %.12s (threads 1) %.12s (threads 4) %.12s (default); default-scale u_value %.12s / %.12s",
                      a.c_str(), b.c_str(), c.c_str(), d.c_str(), e.c_str())};
}

Outcome c12_fd() {
    const double dt = 1.0 / 64.0;
    const GridPath base = sample_path(dt, 20);
    const auto lp = [](const GridPath& p) {
        double s = 0.0;
        for (std::size_t i = 0; i + 1 < p.nodes(); ++i) s += p.node(i)[0] * p.dt();
        return s;
    };
    double worst = 0.0;
    // a + b z + c z² + path term, with the endpoint bump leaving the path term fixed.
    for (const auto& [a, b, c] : std::vector<std::tuple<double, double, double>>{{1.0, 0.0, 0.0}, {0.5, -2.0, 0.0}, {0.0, 1.5, 3.0}, {-1.0, 0.25, -0.7}}) {
        PathFunctional u;
        u.m = u.n = u.d = 1;
        u.eval = [=](const GridPath& p, const Eigen::VectorXd&) {
            const double z = p.last()[0];
            return scalar(a + b * z + c * z * z + std::sin(lp(p)));
        };
        for (double h : {1e-2, 5e-2, 1e-1}) {
            FDConfig fd;
            fd.h_vert = h;
            const double z = base.last()[0];
            const double d1 = vertical_derivative(u, base, scalar(0.0), fd)(0, 0);
            const double d2 = second_vertical_derivative(u, base, scalar(0.0), fd).hessian[0](0, 0);
            worst = std::max({worst, std::abs(d1 - (b + 2.0 * c * z)), std::abs(d2 - 2.0 * c)});
        }
    }
    // Two-dimensional quadratic with a cross term.
    {
        PathFunctional u;
        u.m = u.n = 1;
        u.d = 2;
        u.eval = [](const GridPath& p, const Eigen::VectorXd&) {
            const auto z = p.last();
            return scalar(z[0] * z[1] + 2.0 * z[0] * z[0] - z[1]);
        };
        const GridPath p2(2, dt, {0.0, 0.0, 0.3, -0.4, 0.7, 0.1});
        FDConfig fd;
        fd.h_vert = 0.05;
        const Eigen::MatrixXd d1 = vertical_derivative(u, p2, scalar(0.0), fd);
        const Eigen::MatrixXd d2 = second_vertical_derivative(u, p2, scalar(0.0), fd).hessian[0];
        Eigen::MatrixXd e1(1, 2), e2(2, 2);
        e1 << 0.1 + 4.0 * 0.7, 0.7 - 1.0;
        e2 << 4.0, 1.0, 1.0, 0.0;
        worst = std::max({worst, (d1 - e1).cwiseAbs().maxCoeff(), (d2 - e2).cwiseAbs().maxCoeff()});
    }

    // Smooth non-polynomial functional: sin(z)·exp(∫γ).
    PathFunctional s;
    s.m = s.n = s.d = 1;
    s.eval = [&](const GridPath& p, const Eigen::VectorXd&) { return scalar(std::sin(p.last()[0]) * std::exp(lp(p))); };
    const double z = base.last()[0], w = std::exp(lp(base));
    std::vector<double> hs, e1s, e2s;
    for (double h : {0.2, 0.1, 0.05, 0.025}) {
        FDConfig fd;
        fd.h_vert = h;
        hs.push_back(h);
        e1s.push_back(std::abs(vertical_derivative(s, base, scalar(0.0), fd)(0, 0) - std::cos(z) * w));
        e2s.push_back(std::abs(second_vertical_derivative(s, base, scalar(0.0), fd).hessian[0](0, 0) + std::sin(z) * w));
    }
    const double s1 = slope(hs, e1s), s2 = slope(hs, e2s);
    const bool pass = worst < kFdExact && s1 >= kFdSlopeLo && s1 <= kFdSlopeHi && s2 >= kFdSlopeLo && s2 <= kFdSlopeHi;
    return {pass, fmt("max error on quadratics=%.2e<%.0e, slopes D_z=%.3f D_zz=%.3f in [%.1f, %.1f]", worst, kFdExact, s1, s2,
                      kFdSlopeLo, kFdSlopeHi)};
}

struct Criterion {
    int id;
    const char* name;
    std::function<Outcome()> run;
};

const std::vector<Criterion>& criteria() {
    static const std::vector<Criterion> list = {
        {1, "coupled-oracle value", c01_coupled_value},
        {2, "riccati oracle", c02_riccati},
        {3, "path-dependent oracle", c03_path_integral},
        {4, "z-representation", c04_z_representation},
        {5, "flow property", c05_flow},
        {6, "ppde residual", c06_ppde},
        {7, "regularity", c07_regularity},
        {8, "monotonicity checker", c08_monotonicity},
        {9, "picard convergence", c09_picard},
        {10, "functional ito formula", c10_ito},
        {11, "determinism", c11_determinism},
        {12, "finite-difference calculus", c12_fd},
    };
    return list;
}

bool run_one(const Criterion& c) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
        o = c.run();
    } catch (const std::exception& e) {
        o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("%s C%02d %s | %s | %.1fs\n", o.pass ? "PASS" : "FAIL", c.id, c.name, o.detail.c_str(), secs);
    std::fflush(stdout);
    return o.pass;
}

} // namespace

int main(int argc, char** argv) {
    if (argc != 2) {
        std::fprintf(stderr, "usage: %s <criterion 1..12 | all>\n", argv[0]);
        return 2;
    }
    const std::string arg = argv[1];
    bool ok = true;
    bool found = false;
    for (const auto& c : criteria()) {
        if (arg == "all" || arg == std::to_string(c.id)) {
            found = true;
            ok = run_one(c) && ok;
        }
    }
    if (!found) {
        std::fprintf(stderr, "unknown criterion '%s'\n", arg.c_str());
        return 2;
    }
    return ok ? 0 : 1;
}
