#include "pathfbsde/experiment.hpp"

#include "pathfbsde/errors.hpp"
#include "pathfbsde/rng.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <set>
#include <sstream>

namespace pathfbsde {

using nlohmann::json;

const std::vector<std::string>& known_checks() {
    static const std::vector<std::string> names = {"u_value",    "z_representation", "flow_property", "ppde_residual",
                                                   "regularity", "assumptions",      "ito_residual"};
    return names;
}

namespace {

// ---------------------------------------------------------------------------
// Strict reader with line diagnostics.

std::size_t line_at(const std::string& text, std::size_t offset) {
    if (offset == std::string::npos) return 0;
    return static_cast<std::size_t>(std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(offset), '\n')) + 1;
}

std::size_t find_key(const std::string& text, const std::string& key, std::size_t from) {
    if (from == std::string::npos) from = 0;
    const std::string quoted = "\"" + key + "\"";
    for (std::size_t pos = text.find(quoted, from); pos != std::string::npos; pos = text.find(quoted, pos + 1)) {
        std::size_t k = pos + quoted.size();
        while (k < text.size() && std::isspace(static_cast<unsigned char>(text[k]))) ++k;
        if (k < text.size() && text[k] == ':') return pos;
    }
    return std::string::npos;
}

class Section {
public:
    Section(const json& j, std::string path, std::size_t offset, const std::string& text)
        : j_(j), path_(std::move(path)), offset_(offset), text_(text) {
        if (!j_.is_object()) fail(path_, "must be an object", offset_);
    }

    std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
    std::size_t line_of(const std::string& key) const { return line_at(text_, find_key(text_, key, offset_)); }

    [[noreturn]] void fail(const std::string& fld, const std::string& msg, std::size_t offset) const {
        const std::size_t line = line_at(text_, offset);
        std::string what = "config field '" + fld + "' " + msg;
        if (line > 0) what += " (line " + std::to_string(line) + ")";
        throw ConfigError(what, fld, line);
    }
    [[noreturn]] void fail_key(const std::string& key, const std::string& msg) const {
        fail(field(key), msg, find_key(text_, key, offset_));
    }

    const json* take(const std::string& key) {
        used_.insert(key);
        const auto it = j_.find(key);
        return it == j_.end() ? nullptr : &*it;
    }

    void get(const std::string& key, double& out) {
        if (const json* v = take(key)) {
            if (!v->is_number()) fail_key(key, "must be a number");
            out = v->get<double>();
            if (!std::isfinite(out)) fail_key(key, "must be finite");
        }
    }
    template <class Int>
        requires std::is_integral_v<Int>
    void get(const std::string& key, Int& out) {
        if (const json* v = take(key)) out = as_integer<Int>(*v, key);
    }
    void get(const std::string& key, bool& out) {
        if (const json* v = take(key)) {
            if (!v->is_boolean()) fail_key(key, "must be true or false");
            out = v->get<bool>();
        }
    }
    void get(const std::string& key, std::string& out) {
        if (const json* v = take(key)) {
            if (!v->is_string()) fail_key(key, "must be a string");
            out = v->get<std::string>();
        }
    }
    void get(const std::string& key, std::vector<double>& out) {
        if (const json* v = take(key)) {
            if (!v->is_array()) fail_key(key, "must be an array of numbers");
            out.clear();
            for (const auto& e : *v) {
                if (!e.is_number()) fail_key(key, "must be an array of numbers");
                out.push_back(e.get<double>());
            }
        }
    }
    void get(const std::string& key, std::vector<std::size_t>& out) {
        if (const json* v = take(key)) {
            if (!v->is_array()) fail_key(key, "must be an array of integers");
            out.clear();
            for (const auto& e : *v) out.push_back(as_integer<std::size_t>(e, key));
        }
    }
    void get(const std::string& key, std::vector<std::string>& out) {
        if (const json* v = take(key)) {
            if (!v->is_array()) fail_key(key, "must be an array of strings");
            out.clear();
            for (const auto& e : *v) {
                if (!e.is_string()) fail_key(key, "must be an array of strings");
                out.push_back(e.get<std::string>());
            }
        }
    }

    std::optional<Section> child(const std::string& key) {
        const json* v = take(key);
        if (!v) return std::nullopt;
        if (!v->is_object()) fail_key(key, "must be an object");
        return Section(*v, field(key), find_key(text_, key, offset_), text_);
    }

    const json& raw() const { return j_; }

    /// Rejects keys that were never read.
    void finish() const {
        for (const auto& [key, value] : j_.items()) {
            if (!used_.count(key)) fail_key(key, "is not a known field");
        }
    }

private:
    template <class Int>
    Int as_integer(const json& v, const std::string& key) const {
        if (!v.is_number()) fail_key(key, "must be an integer");
        const double d = v.get<double>();
        if (std::floor(d) != d) fail_key(key, "must be an integer");
        if (std::is_unsigned_v<Int> && d < 0) fail_key(key, "must be non-negative");
        if (v.is_number_unsigned()) return static_cast<Int>(v.get<std::uint64_t>());
        if (v.is_number_integer()) return static_cast<Int>(v.get<std::int64_t>());
        return static_cast<Int>(d);
    }

    const json& j_;
    std::string path_;
    std::size_t offset_;
    const std::string& text_;
    std::set<std::string> used_;
};

FdScheme scheme_from_string(const std::string& s) {
    if (s == "central") return FdScheme::central;
    if (s == "forward") return FdScheme::forward;
    throw InvalidArgument("unknown finite-difference scheme '" + s + "'");
}

// ---------------------------------------------------------------------------
// JSON helpers.

json num(double v) {
    if (std::isfinite(v)) return v;
    if (std::isnan(v)) return "nan";
    return v > 0 ? "inf" : "-inf";
}

json num(const Eigen::MatrixXd& m) {
    json rows = json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        json row = json::array();
        for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(num(m(r, c)));
        rows.push_back(std::move(row));
    }
    return rows;
}

json num(const Eigen::VectorXd& v) {
    json out = json::array();
    for (Eigen::Index i = 0; i < v.size(); ++i) out.push_back(num(v[i]));
    return out;
}

json num(const std::vector<double>& v) {
    json out = json::array();
    for (double d : v) out.push_back(num(d));
    return out;
}

json table_json(const Table& t) {
    json rows = json::array();
    for (const auto& r : t.rows) rows.push_back(num(r));
    return {{"name", t.name}, {"header", t.header}, {"rows", rows}};
}

json check_json(const CheckResult& c) {
    json tables = json::array();
    for (const auto& t : c.tables) tables.push_back(table_json(t));
    return {{"name", c.name}, {"verdict", to_string(c.verdict)}, {"report", c.report}, {"tables", tables}};
}

std::string format_double(double v) {
    if (!std::isfinite(v)) return std::isnan(v) ? "nan" : (v > 0 ? "inf" : "-inf");
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
}

// ---------------------------------------------------------------------------
// Checks.

struct Context {
    const ExperimentConfig& cfg;
    const OracleProblem& op;
    const FunctionalEstimator& est;
    GridPath gamma;
    Eigen::VectorXd x;
    const Logger& log;
};

CheckSettings estimator_settings(const ExperimentConfig& cfg) {
    CheckSettings s = cfg.estimator;
    s.h_z = cfg.fd.h_vert;
    return s;
}

CheckResult check_u_value(const Context& c) {
    CheckResult r{"u_value", Verdict::inconclusive, json::object(), {}};
    const double exact = c.op.solution.u ? c.op.solution.u(c.gamma, c.x)[0] : std::numeric_limits<double>::quiet_NaN();
    const EnsembleSolution sol = c.est.solve_full(c.gamma, c.x);
    const std::size_t i0 = sol.start_node(), N = sol.n_steps(), P = sol.n_paths();
    const auto& h = sol.picard_history;
    const double ratio = h.size() >= 2 ? h.back() / h[h.size() - 2] : 0.0;
    const auto& u = c.cfg.u_value;
    const double err = std::abs(sol.u_value[0] - exact);
    const double budget = u.n_se * sol.u_se[0] + u.abs_tol + u.rel_tol * std::abs(exact);

    Table zt{"u_value_z", {"node", "t", "z_mean", "z_exact"}, {}};
    double z_sum = 0.0, z_exact_sum = 0.0;
    std::size_t interior = 0;
    for (std::size_t i = i0; i < N; ++i) {
        double m = 0.0;
        for (std::size_t p = 0; p < P; ++p) m += sol.z(p, i)[0];
        m /= static_cast<double>(P);
        double ze = std::numeric_limits<double>::quiet_NaN();
        if (c.op.solution.z) {
            const GridPath prefix = sol.w_path(0).prefix(i);
            ze = c.op.solution.z(prefix, Eigen::VectorXd::Constant(1, sol.x(0, i)[0]))(0, 0);
        }
        zt.rows.push_back({static_cast<double>(i), static_cast<double>(i) * sol.dt(), m, ze});
        if (i > i0) {
            z_sum += m;
            z_exact_sum += ze;
            ++interior;
        }
    }
    Table pt{"u_value_picard", {"iteration", "increment"}, {}};
    for (std::size_t k = 0; k < h.size(); ++k) pt.rows.push_back({static_cast<double>(k + 1), h[k]});

    r.report = {{"u", num(sol.u_value[0])},
                {"se", num(sol.u_se[0])},
                {"exact", num(exact)},
                {"abs_error", num(err)},
                {"budget", num(budget)},
                {"z0", num(sol.z0)},
                {"z0_se", num(sol.z0_se)},
                {"interior_z_mean", num(interior ? z_sum / static_cast<double>(interior) : 0.0)},
                {"interior_z_exact_mean", num(interior ? z_exact_sum / static_cast<double>(interior) : 0.0)},
                {"picard_iters", sol.picard_iters},
                {"picard_ratio", num(ratio)},
                {"converged", sol.converged}};
    r.tables = {zt, pt};
    if (!std::isfinite(exact)) r.verdict = Verdict::inconclusive;
    else r.verdict = (err <= budget && sol.converged) ? Verdict::pass : Verdict::fail;
    return r;
}

CheckResult check_z_representation(const Context& c) {
    const ZRepresentationReport z = z_representation_check(c.est, c.gamma, c.x, estimator_settings(c.cfg));
    CheckResult r{"z_representation", Verdict::inconclusive, json::object(), {}};
    r.report = {{"z0", num(z.z0)},
                {"sigma_grad", num(z.sigma_grad)},
                {"dz_u", num(z.dz_u)},
                {"residual", num(z.residual)},
                {"se", num(z.se)},
                {"truncation", num(z.truncation)},
                {"budget", num(z.budget)},
                {"discrepancy", num(z.discrepancy)},
                {"max_discrepancy", num(c.cfg.z_representation.max_discrepancy)},
                {"budget_verdict", to_string(z.verdict)}};
    r.verdict = z.discrepancy <= c.cfg.z_representation.max_discrepancy ? Verdict::pass : Verdict::fail;
    return r;
}

CheckResult check_flow(const Context& c) {
    const FlowReport f = flow_property_check(c.est, c.gamma, c.x, c.cfg.flow);
    CheckResult r{"flow_property", f.verdict, json::object(), {}};
    Table t{"flow_property", {"node", "path", "stored", "stored_se", "fresh", "fresh_se", "deviation", "budget", "pass"}, {}};
    for (const auto& p : f.probes)
        t.rows.push_back({static_cast<double>(p.node), static_cast<double>(p.path), p.stored, p.stored_se, p.fresh,
                          p.fresh_se, p.deviation, p.budget, p.pass ? 1.0 : 0.0});
    r.report = {{"probes", f.probes.size()},
                {"max_deviation", num(f.max_deviation)},
                {"mean_deviation", num(f.mean_deviation)},
                {"max_relative", num(f.max_relative)}};
    r.tables = {t};
    return r;
}

CheckResult check_ppde(const Context& c) {
    const ResidualReport p = ppde_residual(c.est, c.gamma, c.x, estimator_settings(c.cfg));
    CheckResult r{"ppde_residual", Verdict::inconclusive, json::object(), {}};
    Table t{"ppde_residual", {"term", "value", "se", "truncation"}, {}};
    json terms = json::array();
    for (std::size_t k = 0; k < p.terms.size(); ++k) {
        const auto& term = p.terms[k];
        terms.push_back({{"name", term.name}, {"value", num(term.value)}, {"se", num(term.se)}, {"truncation", num(term.truncation)}});
        t.rows.push_back({static_cast<double>(k), term.value[0], term.se[0], term.truncation[0]});
    }
    r.report = {{"terms", terms},
                {"residual", num(p.residual)},
                {"se", num(p.se)},
                {"truncation", num(p.truncation)},
                {"budget", num(p.budget)},
                {"max_abs_residual", num(p.max_abs_residual)},
                {"max_budget", num(p.max_budget)},
                {"budget_limit", num(c.cfg.ppde.max_budget)},
                {"evaluations", p.evaluations},
                {"budget_verdict", to_string(p.verdict)}};
    r.tables = {t};
    r.verdict = (p.verdict == Verdict::pass && p.max_budget <= c.cfg.ppde.max_budget) ? Verdict::pass : Verdict::fail;
    return r;
}

CheckResult check_regularity(const Context& c) {
    const RegularityReport g = regularity_probe(c.est, c.gamma, c.x, c.cfg.regularity);
    CheckResult r{"regularity", g.verdict, json::object(), {}};
    Table t{"regularity",
            {"bump", "shift", "distance2", "num_y", "num_x", "num_z", "rho_y", "rho_x", "rho_z", "rho_dy", "rho_dx", "rho_dz"},
            {}};
    for (const auto& w : g.rows)
        t.rows.push_back({w.perturbation.bump, static_cast<double>(w.perturbation.shift), w.distance2, w.num_y, w.num_x,
                          w.num_z, w.rho_y, w.rho_x, w.rho_z, w.rho_dy, w.rho_dx, w.rho_dz});
    Table m{"regularity_moments", {"path_norm", "sup_y2", "sup_x2", "int_z2"}, {}};
    for (const auto& w : g.moments) m.rows.push_back({w.path_norm, w.sup_y2, w.sup_x2, w.int_z2});
    json spread = json::object();
    for (const auto& [k, v] : g.spread) spread[k] = num(v);
    r.report = {{"spread", spread}, {"max_spread", num(g.max_spread)}, {"moment_q", num(g.moment_q)}};
    r.tables = {t, m};
    return r;
}

CheckResult check_assumptions_run(const Context& c) {
    const auto& s = c.cfg.assumptions;
    const AssumptionSampler sampler = gaussian_sampler(c.op.coeffs, c.cfg.solver.n_steps, c.cfg.solver.seed, s.scale);
    const AssumptionReport a = check_assumptions(c.op.coeffs, sampler, s.samples);
    CheckResult r{"assumptions", a.verdict, json::object(), {}};
    r.report = {{"c1_hat", num(a.c1_hat)},
                {"c2_hat", num(a.c2_hat)},
                {"g_mono_hat", num(a.g_mono_hat)},
                {"g_lipschitz_hat", num(a.g_lipschitz_hat)},
                {"samples", a.samples}};
    return r;
}

CheckResult check_ito(const Context& c) {
    const auto& s = c.cfg.ito;
    PathFunctional u;
    u.eval = [](const GridPath& p, const Eigen::VectorXd&) { return Eigen::VectorXd::Constant(1, p.last()[0] * p.last()[0]).eval(); };
    u.m = u.n = u.d = 1;
    u.label = "gamma(t)^2";
    const double T = c.op.coeffs.T;
    Table t{"ito_residual", {"steps", "dt", "rms_residual"}, {}};
    std::vector<double> dts, rms;
    for (std::size_t k : s.log2_steps) {
        const std::size_t steps = std::size_t{1} << k;
        const double dt = T / static_cast<double>(steps);
        const IncrementSource src(c.cfg.solver.seed, s.paths, 1, dt);
        const std::vector<Eigen::MatrixXd> qv(steps, Eigen::MatrixXd::Constant(1, 1, dt));
        double s2 = 0.0;
        for (std::size_t p = 0; p < s.paths; ++p) {
            std::vector<double> v(steps + 1, 0.0);
            for (std::size_t i = 0; i < steps; ++i) {
                double inc = 0.0;
                src.fill(p, i, {&inc, 1});
                v[i + 1] = v[i] + inc;
            }
            const double res = ito_residual(u, GridPath(1, dt, v), qv, c.cfg.fd);
            s2 += res * res;
        }
        dts.push_back(dt);
        rms.push_back(std::sqrt(s2 / static_cast<double>(s.paths)));
        t.rows.push_back({static_cast<double>(steps), dt, rms.back()});
    }
    const double slope = dts.size() >= 2 ? loglog_slope(dts, rms) : std::numeric_limits<double>::quiet_NaN();
    CheckResult r{"ito_residual", Verdict::inconclusive, json::object(), {t}};
    r.report = {{"functional", u.label}, {"slope", num(slope)}, {"min_slope", num(s.min_slope)}};
    if (std::isfinite(slope)) r.verdict = slope >= s.min_slope ? Verdict::pass : Verdict::fail;
    return r;
}

GridPath start_path(const ExperimentConfig& cfg, std::size_t d) {
    const double dt = cfg.solver.dt(make_problem(cfg.problem, cfg.params).coeffs.T);
    const std::vector<double> level(d, cfg.start.level);
    return GridPath::constant(level, dt, cfg.start.t);
}

// Checks for one configuration; Diverged propagates.
std::vector<CheckResult> run_checks(const ExperimentConfig& cfg, const Logger& log) {
    const OracleProblem op = make_problem(cfg.problem, cfg.params);
    const FunctionalEstimator est(op.coeffs, cfg.solver);
    const Context c{cfg, op, est, start_path(cfg, op.coeffs.d),
                    Eigen::Map<const Eigen::VectorXd>(cfg.start.x.data(), static_cast<Eigen::Index>(cfg.start.x.size())), log};
    std::vector<CheckResult> out;
    for (const std::string& name : known_checks()) {
        if (std::find(cfg.checks.begin(), cfg.checks.end(), name) == cfg.checks.end()) continue;
        if (log) log("running " + name);
        const auto t0 = std::chrono::steady_clock::now();
        CheckResult r;
        try {
            if (name == "u_value") r = check_u_value(c);
            else if (name == "z_representation") r = check_z_representation(c);
            else if (name == "flow_property") r = check_flow(c);
            else if (name == "ppde_residual") r = check_ppde(c);
            else if (name == "regularity") r = check_regularity(c);
            else if (name == "assumptions") r = check_assumptions_run(c);
            else r = check_ito(c);
        } catch (const Diverged&) {
            throw;
        } catch (const NoConvergence& e) {
            r = {name, Verdict::fail, {{"error", e.what()}, {"picard_history", num(e.history())}}, {}};
        } catch (const Error& e) {
            r = {name, Verdict::fail, {{"error", e.what()}}, {}};
        }
        if (log) {
            const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            std::ostringstream os;
            os << name << ": " << to_string(r.verdict) << " (" << std::fixed << std::setprecision(1) << secs << " s)";
            log(os.str());
        }
        out.push_back(std::move(r));
    }
    return out;
}

json::json_pointer pointer_of(const std::string& dotted) {
    std::string p;
    std::stringstream ss(dotted);
    for (std::string part; std::getline(ss, part, '.');) p += "/" + part;
    return json::json_pointer(p);
}

ExperimentConfig with_value(const ExperimentConfig& cfg, const std::string& field, double value) {
    json j = to_json(cfg);
    j.erase("sweep");
    json& slot = j[pointer_of(field)];
    if (slot.is_number_integer() || slot.is_number_unsigned()) slot = static_cast<std::int64_t>(std::llround(value));
    else slot = value;
    return parse_config(j.dump(2));
}

bool all_pass(const std::vector<CheckResult>& checks) {
    return std::all_of(checks.begin(), checks.end(), [](const CheckResult& c) { return c.verdict == Verdict::pass; });
}

} // namespace

// ---------------------------------------------------------------------------

ExperimentConfig parse_config(const std::string& text) {
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::parse_error& e) {
        const std::size_t line = line_at(text, std::min<std::size_t>(e.byte > 0 ? e.byte - 1 : 0, text.size()));
        throw ConfigError("config is not valid JSON (line " + std::to_string(line) + "): " + e.what(), "", line);
    }

    ExperimentConfig cfg;
    Section top(doc, "", 0, text);
    if (auto p = top.child("problem")) {
        p->get("id", cfg.problem);
        if (const json* params = p->take("params")) {
            if (!params->is_object()) p->fail_key("params", "must be an object");
            for (const auto& [k, v] : params->items()) {
                if (!v.is_number()) p->fail(p->field("params." + k), "must be a number", find_key(text, k, 0));
                cfg.params[k] = v.get<double>();
            }
        }
        p->finish();
    }
    if (auto s = top.child("solver")) {
        auto& sc = cfg.solver;
        s->get("n_steps", sc.n_steps);
        s->get("n_paths", sc.n_paths);
        s->get("picard_max", sc.picard_max);
        s->get("picard_tol", sc.picard_tol);
        s->get("damping", sc.damping);
        s->get("ridge", sc.ridge);
        s->get("seed", sc.seed);
        s->get("antithetic", sc.antithetic);
        s->get("stream_offset", sc.stream_offset);
        s->get("throw_on_no_convergence", sc.throw_on_no_convergence);
        if (auto b = s->child("basis")) {
            b->get("poly_degree", sc.basis.poly_degree);
            b->get("n_checkpoints", sc.basis.n_checkpoints);
            std::vector<std::string> names;
            b->get("features", names);
            if (b->raw().contains("features")) {
                sc.basis.features.clear();
                for (const auto& n : names) {
                    try {
                        sc.basis.features.push_back(feature_kind_from_string(n));
                    } catch (const InvalidArgument& e) {
                        b->fail_key("features", std::string("has an unknown feature: ") + e.what());
                    }
                }
            }
            b->finish();
        }
        s->finish();
        try {
            sc.validate();
        } catch (const InvalidArgument& e) {
            top.fail_key("solver", std::string("is invalid: ") + e.what());
        }
    }
    if (auto f = top.child("fd")) {
        f->get("h_vert", cfg.fd.h_vert);
        f->get("h_time", cfg.fd.h_time);
        std::string first = to_string(cfg.fd.first_order), second = to_string(cfg.fd.second_order);
        f->get("first_order", first);
        f->get("second_order", second);
        try {
            cfg.fd.first_order = scheme_from_string(first);
            cfg.fd.second_order = scheme_from_string(second);
        } catch (const InvalidArgument& e) {
            top.fail_key("fd", e.what());
        }
        f->finish();
        if (!(cfg.fd.h_vert > 0.0)) top.fail_key("fd", "h_vert must be positive");
        if (cfg.fd.h_time < 0.0) top.fail_key("fd", "h_time must be non-negative");
    }
    if (auto e = top.child("estimator")) {
        e->get("h_x", cfg.estimator.h_x);
        e->get("n_se", cfg.estimator.n_se);
        e->get("c_fd", cfg.estimator.c_fd);
        e->finish();
        if (!(cfg.estimator.h_x > 0.0)) top.fail_key("estimator", "h_x must be positive");
    }
    if (auto s = top.child("start")) {
        s->get("t", cfg.start.t);
        s->get("level", cfg.start.level);
        s->get("x", cfg.start.x);
        s->finish();
    }
    top.get("checks", cfg.checks);
    {
        std::set<std::string> seen;
        for (const auto& c : cfg.checks) {
            if (std::find(known_checks().begin(), known_checks().end(), c) == known_checks().end())
                top.fail_key("checks", "names an unknown check '" + c + "'");
            if (!seen.insert(c).second) top.fail_key("checks", "lists '" + c + "' twice");
        }
    }
    if (auto s = top.child("settings")) {
        if (auto u = s->child("u_value")) {
            u->get("abs_tol", cfg.u_value.abs_tol);
            u->get("rel_tol", cfg.u_value.rel_tol);
            u->get("n_se", cfg.u_value.n_se);
            u->finish();
        }
        if (auto z = s->child("z_representation")) {
            z->get("max_discrepancy", cfg.z_representation.max_discrepancy);
            z->finish();
        }
        if (auto f = s->child("flow_property")) {
            f->get("n_nodes", cfg.flow.n_nodes);
            f->get("n_probe_paths", cfg.flow.n_probe_paths);
            f->get("sub_paths", cfg.flow.sub_paths);
            f->get("sub_tol", cfg.flow.sub_tol);
            f->get("allowance", cfg.flow.allowance);
            f->get("n_se", cfg.flow.n_se);
            f->finish();
        }
        if (auto p = s->child("ppde_residual")) {
            p->get("max_budget", cfg.ppde.max_budget);
            p->finish();
        }
        if (auto g = s->child("regularity")) {
            g->get("bumps", cfg.regularity.bumps);
            g->get("shifts", cfg.regularity.shifts);
            g->get("dq_step", cfg.regularity.dq_step);
            g->get("difference_quotients", cfg.regularity.difference_quotients);
            g->get("max_spread", cfg.regularity.max_spread);
            g->get("zero_floor", cfg.regularity.zero_floor);
            g->finish();
        }
        if (auto a = s->child("assumptions")) {
            a->get("samples", cfg.assumptions.samples);
            a->get("scale", cfg.assumptions.scale);
            a->finish();
        }
        if (auto i = s->child("ito_residual")) {
            i->get("paths", cfg.ito.paths);
            i->get("log2_steps", cfg.ito.log2_steps);
            i->get("min_slope", cfg.ito.min_slope);
            i->finish();
            for (std::size_t k : cfg.ito.log2_steps)
                if (k < 1 || k > 20) top.fail_key("settings", "ito_residual.log2_steps entries must lie in [1, 20]");
        }
        s->finish();
    }
    if (auto s = top.child("sweep")) {
        SweepSpec sw;
        s->get("field", sw.field);
        s->get("values", sw.values);
        s->finish();
        if (sw.values.empty()) top.fail_key("sweep", "needs at least one value");
        cfg.sweep = sw;
    }
    top.get("output_dir", cfg.output_dir);
    top.finish();

    try {
        const OracleProblem op = make_problem(cfg.problem, cfg.params);
        if (cfg.start.x.size() != op.coeffs.n)
            top.fail_key("start", "x must have " + std::to_string(op.coeffs.n) + " entries");
        if (cfg.start.t < 0.0 || cfg.start.t > op.coeffs.T) top.fail_key("start", "t must lie in [0, T]");
    } catch (const InvalidArgument& e) {
        top.fail_key("problem", std::string("is invalid: ") + e.what());
    }
    if (cfg.sweep) {
        const json canonical = to_json(cfg);
        const auto ptr = pointer_of(cfg.sweep->field);
        if (cfg.sweep->field.rfind("sweep", 0) == 0 || !canonical.contains(ptr) || !canonical[ptr].is_number())
            top.fail_key("sweep", "field '" + cfg.sweep->field + "' does not name a numeric config field");
        for (double v : cfg.sweep->values) {
            try {
                (void)with_value(cfg, cfg.sweep->field, v);
            } catch (const ConfigError& e) {
                top.fail_key("sweep", "value " + format_double(v) + " is invalid: " + e.what());
            }
        }
    }
    return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& file) {
    std::ifstream in(file);
    if (!in) throw ConfigError("cannot read config file '" + file.string() + "'", "");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str());
}

json to_json(const ExperimentConfig& cfg) {
    json features = json::array();
    for (FeatureKind f : cfg.solver.basis.features) features.push_back(to_string(f));
    json params = json::object();
    for (const auto& [k, v] : cfg.params) params[k] = v;
    json j = {
        {"problem", {{"id", cfg.problem}, {"params", params}}},
        {"solver",
         {{"n_steps", cfg.solver.n_steps},
          {"n_paths", cfg.solver.n_paths},
          {"picard_max", cfg.solver.picard_max},
          {"picard_tol", cfg.solver.picard_tol},
          {"damping", cfg.solver.damping},
          {"ridge", cfg.solver.ridge},
          {"seed", cfg.solver.seed},
          {"antithetic", cfg.solver.antithetic},
          {"stream_offset", cfg.solver.stream_offset},
          {"throw_on_no_convergence", cfg.solver.throw_on_no_convergence},
          {"basis",
           {{"poly_degree", cfg.solver.basis.poly_degree},
            {"features", features},
            {"n_checkpoints", cfg.solver.basis.n_checkpoints}}}}},
        {"fd",
         {{"h_vert", cfg.fd.h_vert},
          {"h_time", cfg.fd.h_time},
          {"first_order", to_string(cfg.fd.first_order)},
          {"second_order", to_string(cfg.fd.second_order)}}},
        {"estimator", {{"h_x", cfg.estimator.h_x}, {"n_se", cfg.estimator.n_se}, {"c_fd", cfg.estimator.c_fd}}},
        {"start", {{"t", cfg.start.t}, {"level", cfg.start.level}, {"x", cfg.start.x}}},
        {"checks", cfg.checks},
        {"settings",
         {{"u_value", {{"abs_tol", cfg.u_value.abs_tol}, {"rel_tol", cfg.u_value.rel_tol}, {"n_se", cfg.u_value.n_se}}},
          {"z_representation", {{"max_discrepancy", cfg.z_representation.max_discrepancy}}},
          {"flow_property",
           {{"n_nodes", cfg.flow.n_nodes},
            {"n_probe_paths", cfg.flow.n_probe_paths},
            {"sub_paths", cfg.flow.sub_paths},
            {"sub_tol", cfg.flow.sub_tol},
            {"allowance", cfg.flow.allowance},
            {"n_se", cfg.flow.n_se}}},
          {"ppde_residual", {{"max_budget", cfg.ppde.max_budget}}},
          {"regularity",
           {{"bumps", cfg.regularity.bumps},
            {"shifts", cfg.regularity.shifts},
            {"dq_step", cfg.regularity.dq_step},
            {"difference_quotients", cfg.regularity.difference_quotients},
            {"max_spread", cfg.regularity.max_spread},
            {"zero_floor", cfg.regularity.zero_floor}}},
          {"assumptions", {{"samples", cfg.assumptions.samples}, {"scale", cfg.assumptions.scale}}},
          {"ito_residual",
           {{"paths", cfg.ito.paths}, {"log2_steps", cfg.ito.log2_steps}, {"min_slope", cfg.ito.min_slope}}}}},
        {"output_dir", cfg.output_dir}};
    if (cfg.sweep) j["sweep"] = {{"field", cfg.sweep->field}, {"values", cfg.sweep->values}};
    return j;
}

std::string sha256_hex(const std::string& bytes) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1)
        throw Error("sha256_hex: digest failed");
    std::ostringstream os;
    for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
    return os.str();
}

std::string config_fingerprint(const ExperimentConfig& cfg) {
    json j = to_json(cfg);
    j.erase("output_dir");
    return sha256_hex(j.dump());
}

// ---------------------------------------------------------------------------

json RunRecord::payload() const {
    json checks_j = json::array();
    for (const auto& c : checks) checks_j.push_back(check_json(c));
    json points = json::array();
    for (const auto& p : sweep_points) {
        json pc = json::array();
        for (const auto& c : p.checks) pc.push_back(check_json(c));
        points.push_back({{"value", num(p.value)}, {"checks", pc}});
    }
    json verdicts = json::object();
    for (const auto& c : checks) verdicts[c.name] = to_string(c.verdict);
    json j = {{"artifact_version", kArtifactVersion},
              {"config_fingerprint", fingerprint},
              {"config", config},
              {"checks", checks_j},
              {"verdicts", verdicts},
              {"exit_code", exit_code}};
    if (!sweep_points.empty()) j["sweep_points"] = points;
    if (sweep) {
        j["sweep"] = table_json(*sweep);
        j["sweep_summary"] = sweep_summary;
    }
    if (!error.empty()) j["error"] = error;
    return j;
}

json RunRecord::to_json() const {
    json j = payload();
    j["payload_hash"] = payload_hash();
    j["timing"] = {{"wall_seconds", seconds}};
    return j;
}

std::string RunRecord::payload_hash() const { return sha256_hex(payload().dump()); }

RunRecord run_experiment(const ExperimentConfig& cfg, const Logger& log) {
    const auto t0 = std::chrono::steady_clock::now();
    RunRecord rec;
    rec.fingerprint = config_fingerprint(cfg);
    rec.config = to_json(cfg);
    rec.config.erase("output_dir");
    try {
        if (!cfg.sweep) {
            rec.checks = run_checks(cfg, log);
            rec.exit_code = all_pass(rec.checks) ? 0 : 1;
        } else {
            const auto& sw = *cfg.sweep;
            const bool steps = sw.field == "solver.n_steps";
            Table t{"sweep", {"value", "step", "u", "se", "exact", "abs_error", "picard_iters"}, {}};
            std::vector<double> xs, errs;
            bool ok = true;
            for (double v : sw.values) {
                if (log) log("sweep " + sw.field + " = " + format_double(v));
                const ExperimentConfig point = with_value(cfg, sw.field, v);
                SweepPoint sp{v, run_checks(point, log)};
                ok = ok && all_pass(sp.checks);
                const OracleProblem op = make_problem(point.problem, point.params);
                const GridPath g = start_path(point, op.coeffs.d);
                const Eigen::VectorXd x = Eigen::Map<const Eigen::VectorXd>(point.start.x.data(), static_cast<Eigen::Index>(point.start.x.size()));
                SolverConfig sc = point.solver;
                sc.throw_on_no_convergence = false;
                const FunctionalEstimator probe(op.coeffs, sc);
                const auto e = probe.evaluate(g, x);
                const double exact = op.solution.u ? op.solution.u(g, x)[0] : std::numeric_limits<double>::quiet_NaN();
                const double step = point.solver.dt(op.coeffs.T);
                const double err = std::abs(e->u[0] - exact);
                t.rows.push_back({v, step, e->u[0], e->u_se[0], exact, err, static_cast<double>(e->picard_iters)});
                if (std::isfinite(err) && err > 0.0) {
                    xs.push_back(steps ? step : v);
                    errs.push_back(err);
                }
                rec.sweep_points.push_back(std::move(sp));
            }
            rec.sweep = t;
            rec.sweep_summary = {{"field", sw.field},
                                 {"axis", steps ? "step" : "value"},
                                 {"slope", num(xs.size() >= 2 ? loglog_slope(xs, errs) : std::numeric_limits<double>::quiet_NaN())}};
            rec.exit_code = ok ? 0 : 1;
        }
    } catch (const Diverged& e) {
        rec.error = std::string(e.what()) + " (node " + std::to_string(e.node()) + ")";
        rec.exit_code = 3;
    }
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return rec;
}

void write_csv(const Table& table, const std::filesystem::path& file) {
    std::ofstream out(file);
    if (!out) throw Error("cannot write '" + file.string() + "'");
    for (std::size_t k = 0; k < table.header.size(); ++k) out << (k ? "," : "") << table.header[k];
    out << '\n';
    for (const auto& row : table.rows) {
        for (std::size_t k = 0; k < row.size(); ++k) out << (k ? "," : "") << format_double(row[k]);
        out << '\n';
    }
}

void write_outputs(const RunRecord& record, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    {
        std::ofstream out(dir / "record.json");
        if (!out) throw Error("cannot write '" + (dir / "record.json").string() + "'");
        out << record.to_json().dump(2) << '\n';
    }
    for (const auto& c : record.checks)
        for (const auto& t : c.tables) write_csv(t, dir / (t.name + ".csv"));
    const std::string field = record.sweep_summary.is_object() ? record.sweep_summary.value("field", "") : "";
    for (const auto& p : record.sweep_points)
        for (const auto& c : p.checks)
            for (const auto& t : c.tables) write_csv(t, dir / (t.name + "_" + field + "=" + format_double(p.value) + ".csv"));
    if (record.sweep) write_csv(*record.sweep, dir / "sweep.csv");
}

double loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size() || x.size() < 2) throw InvalidArgument("loglog_slope: need two or more matched points");
    double mx = 0.0, my = 0.0;
    const auto n = static_cast<double>(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (!(x[i] > 0.0) || !(y[i] > 0.0)) throw InvalidArgument("loglog_slope: values must be positive");
        mx += std::log(x[i]) / n;
        my += std::log(y[i]) / n;
    }
    double sxx = 0.0, sxy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double a = std::log(x[i]) - mx;
        sxx += a * a;
        sxy += a * (std::log(y[i]) - my);
    }
    if (sxx == 0.0) throw InvalidArgument("loglog_slope: x values are all equal");
    return sxy / sxx;
}

std::string list_problems_text() {
    std::ostringstream os;
    for (const auto& e : problem_registry()) {
        os << e.id << '\n';
        os << "  parameters:";
        for (const auto& [k, v] : e.defaults) os << ' ' << k << '=' << format_double(v);
        os << '\n';
        os << "  solution: " << e.formula << '\n';
    }
    return os.str();
}

} // namespace pathfbsde
