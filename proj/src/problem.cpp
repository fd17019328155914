#include "pathfbsde/problem.hpp"

#include "pathfbsde/errors.hpp"
#include "pathfbsde/rng.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <sstream>

namespace pathfbsde {

namespace {

std::string fmt(double v) {
    std::ostringstream os;
    os.precision(12);
    os << v;
    return os.str();
}

Eigen::MatrixXd constant_matrix(std::size_t rows, std::size_t cols, double v) {
    return Eigen::MatrixXd::Constant(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols), v);
}

std::span<const double> as_span(const Eigen::VectorXd& v) { return {v.data(), static_cast<std::size_t>(v.size())}; }

// Row-major copy of an n×d matrix.
std::vector<double> row_major(const Eigen::MatrixXd& m) {
    std::vector<double> out(static_cast<std::size_t>(m.size()));
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j) out[static_cast<std::size_t>(i * m.cols() + j)] = m(i, j);
    return out;
}

void check_triple(const Triple& u, std::size_t n, std::size_t d) {
    if (static_cast<std::size_t>(u.x.size()) != n || static_cast<std::size_t>(u.y.size()) != n ||
        static_cast<std::size_t>(u.z.rows()) != n || static_cast<std::size_t>(u.z.cols()) != d) {
        throw InvalidArgument("triple does not match the problem dimensions");
    }
}

} // namespace

const char* to_string(Verdict v) {
    switch (v) {
    case Verdict::pass: return "pass";
    case Verdict::fail: return "fail";
    default: return "inconclusive";
    }
}

double pairing(const Triple& u1, const Triple& u2) {
    if (u1.x.size() != u2.x.size() || u1.y.size() != u2.y.size() || u1.z.rows() != u2.z.rows() ||
        u1.z.cols() != u2.z.cols()) {
        throw InvalidArgument("pairing: dimension mismatch");
    }
    return u1.x.dot(u2.x) + u1.y.dot(u2.y) + (u1.z.array() * u2.z.array()).sum();
}

Triple coefficient_bundle(const CoefficientSet& coeffs, const GridPath& path, const Triple& u) {
    check_triple(u, coeffs.n, coeffs.d);
    const std::size_t n = coeffs.n, d = coeffs.d;
    const auto z = row_major(u.z);
    const PathView w = path.view();
    std::vector<double> hb(n), bb(n), sb(n * d);
    coeffs.driver(w, as_span(u.x), as_span(u.y), z, hb);
    coeffs.drift(w, as_span(u.x), as_span(u.y), z, bb);
    coeffs.diffusion(w, as_span(u.x), as_span(u.y), z, sb);
    Triple f{Eigen::Map<Eigen::VectorXd>(hb.data(), static_cast<Eigen::Index>(n)),
             Eigen::Map<Eigen::VectorXd>(bb.data(), static_cast<Eigen::Index>(n)),
             Eigen::MatrixXd(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d))};
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) f.z(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = sb[i * d + j];
    return f;
}

AssumptionSampler gaussian_sampler(const CoefficientSet& coeffs, std::size_t n_steps, std::uint64_t seed, double scale,
                                   std::size_t capacity) {
    if (n_steps == 0) throw InvalidArgument("gaussian_sampler: n_steps must be positive");
    const std::size_t n = coeffs.n, d = coeffs.d;
    const double dt = coeffs.T / static_cast<double>(n_steps);
    AssumptionSampler sampler;
    sampler.capacity = capacity;
    sampler.draw = [=](std::size_t k) {
        const IncrementSource src(seed, capacity, d, dt);
        std::uint32_t slot = 0;
        // Component slots: path increments first, then scalars for the triples.
        auto normal = [&](std::uint64_t node) { return src.standard_normal(k, node, slot++); };
        std::vector<double> values(d, 0.0);
        values.reserve((n_steps + 1) * d);
        std::vector<double> current(d, 0.0);
        for (std::size_t i = 0; i < n_steps; ++i) {
            slot = 0;
            for (std::size_t c = 0; c < d; ++c) {
                current[c] += std::sqrt(dt) * normal(i);
                values.push_back(current[c]);
            }
        }
        GridPath terminal(d, dt, values);
        slot = 0;
        const double u01 = 0.5 * (1.0 + std::erf(normal(n_steps) / std::sqrt(2.0)));
        const auto end = std::min(n_steps, static_cast<std::size_t>(u01 * static_cast<double>(n_steps + 1)));
        GridPath path = terminal.prefix(end);
        auto triple = [&] {
            Triple t{Eigen::VectorXd(n), Eigen::VectorXd(n), Eigen::MatrixXd(n, d)};
            for (std::size_t i = 0; i < n; ++i) t.x[i] = scale * normal(n_steps + 1);
            for (std::size_t i = 0; i < n; ++i) t.y[i] = scale * normal(n_steps + 1);
            for (Eigen::Index i = 0; i < t.z.size(); ++i) t.z.data()[i] = scale * normal(n_steps + 1);
            return t;
        };
        Triple u1 = triple();
        Triple u2 = triple();
        return AssumptionSample{std::move(path), std::move(terminal), std::move(u1), std::move(u2)};
    };
    return sampler;
}

AssumptionReport check_assumptions(const CoefficientSet& coeffs, const AssumptionSampler& sampler,
                                   std::size_t n_samples) {
    if (n_samples == 0) throw InvalidArgument("check_assumptions: n_samples must be positive");
    if (n_samples > sampler.capacity) {
        throw SamplerExhausted("check_assumptions: sampler provides " + std::to_string(sampler.capacity) +
                               " samples, " + std::to_string(n_samples) + " requested");
    }
    AssumptionReport report;
    report.c2_hat = std::numeric_limits<double>::infinity();
    report.g_mono_hat = std::numeric_limits<double>::infinity();
    const std::size_t n = coeffs.n;
    for (std::size_t k = 0; k < n_samples; ++k) {
        const AssumptionSample s = sampler.draw(k);
        const Triple du{s.u1.x - s.u2.x, s.u1.y - s.u2.y, s.u1.z - s.u2.z};
        const double du2 = pairing(du, du);
        if (du2 > 0.0) {
            const Triple f1 = coefficient_bundle(coeffs, s.path, s.u1);
            const Triple f2 = coefficient_bundle(coeffs, s.path, s.u2);
            const Triple df{f1.x - f2.x, f1.y - f2.y, f1.z - f2.z};
            report.c1_hat = std::max(report.c1_hat, std::sqrt(pairing(df, df) / du2));
            report.c2_hat = std::min(report.c2_hat, -pairing(df, du) / du2);
        }
        const Eigen::VectorXd dx = s.u1.x - s.u2.x;
        const double dx2 = dx.squaredNorm();
        if (dx2 > 0.0) {
            std::vector<double> g1(n), g2(n);
            coeffs.terminal(s.terminal.view(), as_span(s.u1.x), g1);
            coeffs.terminal(s.terminal.view(), as_span(s.u2.x), g2);
            const Eigen::VectorXd dg = Eigen::Map<Eigen::VectorXd>(g1.data(), static_cast<Eigen::Index>(n)) -
                                       Eigen::Map<Eigen::VectorXd>(g2.data(), static_cast<Eigen::Index>(n));
            report.g_mono_hat = std::min(report.g_mono_hat, dg.dot(dx) / dx2);
            report.g_lipschitz_hat = std::max(report.g_lipschitz_hat, std::sqrt(dg.squaredNorm() / dx2));
        }
        ++report.samples;
    }
    if (report.c2_hat < 0.0 || report.g_mono_hat <= 0.0) {
        report.verdict = Verdict::fail;
    } else if (report.c2_hat == 0.0) {
        report.verdict = Verdict::inconclusive;
    } else {
        report.verdict = Verdict::pass;
    }
    return report;
}

double left_point_integral(const PathView& path) {
    if (path.dim != 1) throw InvalidArgument("left_point_integral: scalar paths only");
    double s = 0.0;
    for (std::size_t i = 0; i + 1 < path.nodes; ++i) s += path.data[i];
    return s * path.dt;
}

OracleProblem oracle_coupled_ou(double c, double sigma0, double T) {
    if (!(c > 0.0)) throw InvalidArgument("oracle_coupled_ou: c must be positive");
    if (!(T > 0.0)) throw InvalidArgument("oracle_coupled_ou: T must be positive");
    CoefficientSet cs;
    cs.n = cs.d = 1;
    cs.T = T;
    cs.label = "coupled_ou";
    cs.drift = [c](const PathView&, auto, auto y, auto, auto out) { out[0] = -c * y[0]; };
    cs.diffusion = [c, sigma0](const PathView&, auto, auto, auto z, auto out) { out[0] = -c * z[0] + sigma0; };
    cs.driver = [c](const PathView&, auto x, auto, auto, auto out) { out[0] = -c * x[0]; };
    cs.terminal = [](const PathView&, auto x, auto out) { out[0] = x[0]; };

    const double zstar = sigma0 / (1.0 + c);
    ClosedFormSolution sol;
    sol.formula = "u(γ_t,x) = x, Z ≡ σ0/(1+c) = " + fmt(zstar);
    sol.u = [](const GridPath&, const Eigen::VectorXd& x) { return Eigen::VectorXd(x); };
    sol.z = [zstar](const GridPath&, const Eigen::VectorXd&) { return constant_matrix(1, 1, zstar); };
    sol.grad_x = [](const GridPath&, const Eigen::VectorXd&) { return constant_matrix(1, 1, 1.0); };
    sol.vertical = [](const GridPath&, const Eigen::VectorXd&) { return constant_matrix(1, 1, 0.0); };
    sol.horizontal = [](const GridPath&, const Eigen::VectorXd&) { return Eigen::VectorXd::Zero(1).eval(); };
    return {std::move(cs), std::move(sol)};
}

RiccatiSolution::RiccatiSolution(const RiccatiCoefficients& a, double G, double T, std::size_t steps)
    : a_(a), T_(T), h_(T / static_cast<double>(steps)), phi_(steps + 1) {
    if (!(T > 0.0) || steps == 0) throw InvalidArgument("RiccatiSolution: invalid horizon");
    auto f = [&](double p) { return a_.h1 + a_.h2 * p - p * (a_.b1 + a_.b2 * p); };
    // RK4 backward from φ(T) = G; index k holds φ(k h).
    phi_[steps] = G;
    double p = G;
    for (std::size_t k = steps; k > 0; --k) {
        const double k1 = f(p);
        const double k2 = f(p - 0.5 * h_ * k1);
        const double k3 = f(p - 0.5 * h_ * k2);
        const double k4 = f(p - h_ * k3);
        p -= h_ / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        if (!std::isfinite(p) || std::abs(p) > 1e12) {
            throw OracleUnavailable("Riccati solution blows up on [0, T]");
        }
        phi_[k - 1] = p;
    }
}

double RiccatiSolution::derivative(double t) const {
    const double p = (*this)(t);
    return a_.h1 + a_.h2 * p - p * (a_.b1 + a_.b2 * p);
}

double RiccatiSolution::operator()(double t) const {
    if (t < -1e-12 || t > T_ * (1.0 + 1e-12)) throw InvalidArgument("RiccatiSolution: time outside [0, T]");
    const double s = std::clamp(t / h_, 0.0, static_cast<double>(phi_.size() - 1));
    const auto k = std::min(static_cast<std::size_t>(s), phi_.size() - 2);
    const double r = s - static_cast<double>(k);
    auto f = [&](double p) { return a_.h1 + a_.h2 * p - p * (a_.b1 + a_.b2 * p); };
    const double p0 = phi_[k], p1 = phi_[k + 1];
    const double m0 = h_ * f(p0), m1 = h_ * f(p1);
    const double r2 = r * r, r3 = r2 * r;
    return (2 * r3 - 3 * r2 + 1) * p0 + (r3 - 2 * r2 + r) * m0 + (-2 * r3 + 3 * r2) * p1 + (r3 - r2) * m1;
}

OracleProblem oracle_riccati(const RiccatiCoefficients& a, double G, double T) {
    if (!(G > 0.0)) throw InvalidArgument("oracle_riccati: G must be positive");
    if (!(T > 0.0)) throw InvalidArgument("oracle_riccati: T must be positive");
    auto phi = std::make_shared<RiccatiSolution>(a, G, T);
    CoefficientSet cs;
    cs.n = cs.d = 1;
    cs.T = T;
    cs.label = "riccati";
    cs.drift = [a](const PathView&, auto x, auto y, auto, auto out) { out[0] = a.b1 * x[0] + a.b2 * y[0]; };
    cs.diffusion = [a](const PathView&, auto, auto, auto, auto out) { out[0] = a.sigma; };
    cs.driver = [a](const PathView&, auto x, auto y, auto, auto out) { out[0] = a.h1 * x[0] + a.h2 * y[0]; };
    cs.terminal = [G](const PathView&, auto x, auto out) { out[0] = G * x[0]; };

    ClosedFormSolution sol;
    sol.formula = "u(γ_t,x) = φ(t)x, Z = φ(s)σ, φ' = h1 + h2φ − φ(b1 + b2φ), φ(T) = G; φ(0) = " + fmt((*phi)(0.0));
    sol.u = [phi](const GridPath& p, const Eigen::VectorXd& x) { return Eigen::VectorXd((*phi)(p.time()) * x); };
    sol.z = [phi, a](const GridPath& p, const Eigen::VectorXd&) { return constant_matrix(1, 1, (*phi)(p.time()) * a.sigma); };
    sol.grad_x = [phi](const GridPath& p, const Eigen::VectorXd&) { return constant_matrix(1, 1, (*phi)(p.time())); };
    sol.vertical = [](const GridPath&, const Eigen::VectorXd&) { return constant_matrix(1, 1, 0.0); };
    sol.horizontal = [phi](const GridPath& p, const Eigen::VectorXd& x) {
        return Eigen::VectorXd(phi->derivative(p.time()) * x);
    };
    return {std::move(cs), std::move(sol)};
}

OracleProblem oracle_path_integral(double T) {
    if (!(T > 0.0)) throw InvalidArgument("oracle_path_integral: T must be positive");
    CoefficientSet cs;
    cs.n = cs.d = 1;
    cs.T = T;
    cs.label = "path_integral";
    cs.decoupled = true;
    cs.drift = [](const PathView&, auto, auto, auto, auto out) { out[0] = 0.0; };
    cs.diffusion = [](const PathView&, auto, auto, auto, auto out) { out[0] = 1.0; };
    cs.driver = [](const PathView&, auto, auto, auto, auto out) { out[0] = 0.0; };
    cs.terminal = [](const PathView& w, auto, auto out) { out[0] = left_point_integral(w); };

    ClosedFormSolution sol;
    sol.formula = "u(γ_t,x) = ∫_0^t γ ds + γ(t)(T − t), D_z u = T − t, Z(s) = T − s";
    sol.u = [T](const GridPath& p, const Eigen::VectorXd&) {
        return Eigen::VectorXd::Constant(1, left_point_integral(p.view()) + p.last()[0] * (T - p.time())).eval();
    };
    sol.z = [T](const GridPath& p, const Eigen::VectorXd&) { return constant_matrix(1, 1, T - p.time()); };
    sol.grad_x = [](const GridPath&, const Eigen::VectorXd&) { return constant_matrix(1, 1, 0.0); };
    sol.vertical = [T](const GridPath& p, const Eigen::VectorXd&) { return constant_matrix(1, 1, T - p.time()); };
    sol.horizontal = [](const GridPath&, const Eigen::VectorXd&) { return Eigen::VectorXd::Zero(1).eval(); };
    return {std::move(cs), std::move(sol)};
}

OracleProblem terminal_value_problem(double T) {
    if (!(T > 0.0)) throw InvalidArgument("terminal_value_problem: T must be positive");
    CoefficientSet cs;
    cs.n = cs.d = 1;
    cs.T = T;
    cs.label = "terminal_value";
    cs.decoupled = true;
    cs.drift = [](const PathView&, auto, auto, auto, auto out) { out[0] = 0.0; };
    cs.diffusion = [](const PathView&, auto, auto, auto, auto out) { out[0] = 1.0; };
    cs.driver = [](const PathView&, auto, auto, auto, auto out) { out[0] = 0.0; };
    cs.terminal = [](const PathView& w, auto, auto out) { out[0] = w.last()[0]; };

    ClosedFormSolution sol;
    sol.formula = "u(γ_t,x) = γ(t), D_z u = 1, Z ≡ 1";
    sol.u = [](const GridPath& p, const Eigen::VectorXd&) { return Eigen::VectorXd::Constant(1, p.last()[0]).eval(); };
    sol.z = [](const GridPath&, const Eigen::VectorXd&) { return constant_matrix(1, 1, 1.0); };
    sol.grad_x = [](const GridPath&, const Eigen::VectorXd&) { return constant_matrix(1, 1, 0.0); };
    sol.vertical = [](const GridPath&, const Eigen::VectorXd&) { return constant_matrix(1, 1, 1.0); };
    sol.horizontal = [](const GridPath&, const Eigen::VectorXd&) { return Eigen::VectorXd::Zero(1).eval(); };
    return {std::move(cs), std::move(sol)};
}

CoefficientSet sign_flipped_problem(double T) {
    CoefficientSet cs;
    cs.n = cs.d = 1;
    cs.T = T;
    cs.label = "sign_flipped";
    cs.drift = [](const PathView&, auto, auto y, auto, auto out) { out[0] = y[0]; };
    cs.diffusion = [](const PathView&, auto, auto, auto, auto out) { out[0] = 1.0; };
    cs.driver = [](const PathView&, auto, auto, auto, auto out) { out[0] = 0.0; };
    cs.terminal = [](const PathView&, auto x, auto out) { out[0] = x[0]; };
    return cs;
}

const std::vector<ProblemEntry>& problem_registry() {
    static const std::vector<ProblemEntry> registry = [] {
        std::vector<ProblemEntry> r;
        r.push_back({"coupled_ou",
                     {{"T", 1.0}, {"c", 1.0}, {"sigma0", 1.0}},
                     "b=-c*y, sigma=-c*z+sigma0, h=-c*x, g=x; u(γ_t,x) = x, Z = sigma0/(1+c)",
                     [](const std::map<std::string, double>& p) {
                         return oracle_coupled_ou(p.at("c"), p.at("sigma0"), p.at("T"));
                     }});
        r.push_back({"riccati",
                     {{"G", 2.0}, {"T", 1.0}, {"b1", 0.0}, {"b2", -1.0}, {"h1", -1.0}, {"h2", 0.0}, {"sigma", 1.0}},
                     "b=b1*x+b2*y, sigma const, h=h1*x+h2*y, g=G*x; u(γ_t,x) = phi(t)*x, "
                     "phi' = h1 + h2*phi - phi*(b1 + b2*phi), phi(T) = G",
                     [](const std::map<std::string, double>& p) {
                         return oracle_riccati({p.at("b1"), p.at("b2"), p.at("h1"), p.at("h2"), p.at("sigma")},
                                               p.at("G"), p.at("T"));
                     }});
        r.push_back({"path_integral",
                     {{"T", 1.0}},
                     "b=0, sigma=1, h=0, g=∫_0^T W ds; u(γ_t,x) = ∫_0^t γ ds + γ(t)(T-t), D_z u = T-t",
                     [](const std::map<std::string, double>& p) { return oracle_path_integral(p.at("T")); }});
        return r;
    }();
    return registry;
}

OracleProblem make_problem(const std::string& id, const std::map<std::string, double>& overrides) {
    for (const auto& entry : problem_registry()) {
        if (entry.id != id) continue;
        auto params = entry.defaults;
        for (const auto& [k, v] : overrides) {
            if (!params.count(k)) throw InvalidArgument("problem '" + id + "' has no parameter '" + k + "'");
            params[k] = v;
        }
        return entry.build(params);
    }
    throw InvalidArgument("unknown problem id '" + id + "'");
}

} // namespace pathfbsde
