#include "pathfbsde/feynman_kac.hpp"

#include "pathfbsde/errors.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <limits>

namespace pathfbsde {

namespace {

using EvalPtr = std::shared_ptr<const Evaluation>;

// Σ w_k · u(γ_k, x_k): a finite-difference stencil over cached evaluations.
struct Combo {
    std::vector<std::pair<double, EvalPtr>> terms;

    double value(Eigen::Index k) const {
        double v = 0.0;
        for (const auto& [w, e] : terms) v += w * e->u[k];
        return v;
    }
    Eigen::VectorXd paths(Eigen::Index k) const {
        Eigen::VectorXd v = Eigen::VectorXd::Zero(terms.front().second->xi.rows());
        for (const auto& [w, e] : terms) v += w * e->xi.col(k);
        return v;
    }
};

Eigen::VectorXd unit(std::size_t size, std::size_t i, double h) {
    Eigen::VectorXd v = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(size));
    v[static_cast<Eigen::Index>(i)] = h;
    return v;
}

GridPath path_bump(const GridPath& path, std::size_t i, double a, std::size_t j = 0, double b = 0.0) {
    std::vector<double> shift(path.dim(), 0.0);
    shift[i] += a;
    shift[j] += b;
    return vertical_bump(path, shift);
}

class Stencils {
public:
    Stencils(const FunctionalEstimator& est, const GridPath& path, const Eigen::VectorXd& x)
        : est_(est), path_(path), x_(x) {}

    EvalPtr at(const GridPath& p, const Eigen::VectorXd& x) const { return est_.evaluate(p, x); }
    EvalPtr centre() const { return at(path_, x_); }

    Combo gradient(std::size_t l, double h) const {
        const auto e = unit(est_.problem().n, l, h);
        return {{{0.5 / h, at(path_, x_ + e)}, {-0.5 / h, at(path_, x_ - e)}}};
    }
    Combo hessian(std::size_t l, std::size_t m, double h) const {
        const auto el = unit(est_.problem().n, l, h);
        if (l == m) return {{{1.0 / (h * h), at(path_, x_ + el)}, {-2.0 / (h * h), centre()}, {1.0 / (h * h), at(path_, x_ - el)}}};
        const auto em = unit(est_.problem().n, m, h);
        const double w = 0.25 / (h * h);
        return {{{w, at(path_, x_ + el + em)}, {-w, at(path_, x_ + el - em)}, {-w, at(path_, x_ - el + em)},
                 {w, at(path_, x_ - el - em)}}};
    }
    Combo dz(std::size_t j, double h) const {
        return {{{0.5 / h, at(path_bump(path_, j, h), x_)}, {-0.5 / h, at(path_bump(path_, j, -h), x_)}}};
    }
    Combo dzz(std::size_t i, std::size_t j, double h) const {
        if (i == j) {
            return {{{1.0 / (h * h), at(path_bump(path_, i, h), x_)}, {-2.0 / (h * h), centre()},
                     {1.0 / (h * h), at(path_bump(path_, i, -h), x_)}}};
        }
        const double w = 0.25 / (h * h);
        return {{{w, at(path_bump(path_, i, h, j, h), x_)}, {-w, at(path_bump(path_, i, h, j, -h), x_)},
                 {-w, at(path_bump(path_, i, -h, j, h), x_)}, {w, at(path_bump(path_, i, -h, j, -h), x_)}}};
    }
    // ∂_{x_l} D_{z_j} u: x-difference outside, path bump inside.
    Combo mixed(std::size_t l, std::size_t j, double hx, double hz) const {
        const auto e = unit(est_.problem().n, l, hx);
        const GridPath up = path_bump(path_, j, hz), down = path_bump(path_, j, -hz);
        const double w = 0.25 / (hx * hz);
        return {{{w, at(up, x_ + e)}, {-w, at(down, x_ + e)}, {-w, at(up, x_ - e)}, {w, at(down, x_ - e)}}};
    }
    Combo dt(std::size_t steps) const {
        const GridPath ext = horizontal_extension_to_node(path_, path_.last_node() + steps);
        const double w = 1.0 / (static_cast<double>(steps) * path_.dt());
        return {{{w, at(ext, x_)}, {-w, centre()}}};
    }

private:
    const FunctionalEstimator& est_;
    const GridPath& path_;
    const Eigen::VectorXd& x_;
};

// Paired standard error and step-halving truncation of a family of stencils.
DerivativeEstimate derivative_estimate(Eigen::Index rows, Eigen::Index cols, double step, bool antithetic,
                                       const std::function<std::pair<Combo, Combo>(Eigen::Index, Eigen::Index)>& make,
                                       const std::function<Eigen::Index(Eigen::Index, Eigen::Index)>& component) {
    DerivativeEstimate out;
    out.step = step;
    out.value.resize(rows, cols);
    out.se.resize(rows, cols);
    out.truncation.resize(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r) {
        for (Eigen::Index c = 0; c < cols; ++c) {
            const auto [full, half] = make(r, c);
            const Eigen::Index k = component(r, c);
            out.value(r, c) = full.value(k);
            out.se(r, c) = mean_standard_error(full.paths(k), antithetic);
            out.truncation(r, c) = 4.0 / 3.0 * std::abs(full.value(k) - half.value(k));
        }
    }
    return out;
}

void check_scalar_support(const FunctionalEstimator& est, const char* what) {
    if (est.problem().n != 1) throw InvalidArgument(std::string(what) + ": scalar problems only (n = 1)");
}

// Coefficients at (γ_t, x, y, z).
struct CoefficientValues {
    Eigen::VectorXd b, h;
    Eigen::MatrixXd sigma;  // n×d
};

CoefficientValues coefficients_at(const CoefficientSet& cs, const GridPath& path, const Eigen::VectorXd& x,
                                  const Eigen::VectorXd& y, const Eigen::MatrixXd& z) {
    const auto n = static_cast<Eigen::Index>(cs.n), d = static_cast<Eigen::Index>(cs.d);
    const RowMatrix zr = z;
    const std::span<const double> xs(x.data(), cs.n), ys(y.data(), cs.n), zs(zr.data(), cs.n * cs.d);
    CoefficientValues v{Eigen::VectorXd(n), Eigen::VectorXd(n), Eigen::MatrixXd(n, d)};
    RowMatrix sig(n, d);
    cs.drift(path.view(), xs, ys, zs, {v.b.data(), cs.n});
    cs.diffusion(path.view(), xs, ys, zs, {sig.data(), cs.n * cs.d});
    cs.driver(path.view(), xs, ys, zs, {v.h.data(), cs.n});
    v.sigma = sig;
    return v;
}

// θ ↦ F(θ) linearized at θ̂; influence values are per-path directional terms.
class DeltaMethod {
public:
    std::size_t add(double value, Eigen::VectorXd paths) {
        theta_.push_back(value);
        paths_.push_back(std::move(paths));
        return theta_.size() - 1;
    }
    const std::vector<double>& theta() const { return theta_; }

    Eigen::VectorXd se(const std::function<Eigen::VectorXd(const std::vector<double>&)>& f, bool antithetic) const {
        const Eigen::VectorXd base = f(theta_);
        Eigen::MatrixXd grad(base.size(), static_cast<Eigen::Index>(theta_.size()));
        std::vector<double> t = theta_;
        for (std::size_t j = 0; j < theta_.size(); ++j) {
            const double step = 1e-6 * std::max(1.0, std::abs(theta_[j]));
            t[j] = theta_[j] + step;
            const Eigen::VectorXd up = f(t);
            t[j] = theta_[j] - step;
            const Eigen::VectorXd down = f(t);
            t[j] = theta_[j];
            grad.col(static_cast<Eigen::Index>(j)) = (up - down) / (2.0 * step);
        }
        Eigen::VectorXd out(base.size());
        for (Eigen::Index r = 0; r < base.size(); ++r) {
            Eigen::VectorXd infl = Eigen::VectorXd::Zero(paths_.front().size());
            for (std::size_t j = 0; j < paths_.size(); ++j) {
                const double g = grad(r, static_cast<Eigen::Index>(j));
                if (g != 0.0) infl += g * paths_[j];
            }
            out[r] = mean_standard_error(infl, antithetic);
        }
        return out;
    }

private:
    std::vector<double> theta_;
    std::vector<Eigen::VectorXd> paths_;
};

Eigen::Index flat(std::size_t a, std::size_t b, std::size_t cols) { return static_cast<Eigen::Index>(a * cols + b); }

} // namespace

// ---------------------------------------------------------------------------

FunctionalEstimator::FunctionalEstimator(CoefficientSet problem, SolverConfig cfg)
    : problem_(std::move(problem)), cfg_(std::move(cfg)) {
    cfg_.validate();
}

SolverConfig FunctionalEstimator::config_for(const GridPath& gamma_t) const {
    SolverConfig c = cfg_;
    c.stream_offset = cfg_.stream_offset + gamma_t.last_node();
    return c;
}

std::string FunctionalEstimator::fingerprint(const GridPath& gamma_t, const Eigen::VectorXd& x) {
    std::string key;
    auto put = [&key](const void* p, std::size_t bytes) { key.append(static_cast<const char*>(p), bytes); };
    const std::size_t dim = gamma_t.dim(), nodes = gamma_t.nodes();
    const double dt = gamma_t.dt();
    const auto nx = static_cast<std::size_t>(x.size());
    put(&dim, sizeof dim);
    put(&nodes, sizeof nodes);
    put(&dt, sizeof dt);
    put(&nx, sizeof nx);
    put(gamma_t.values().data(), gamma_t.values().size() * sizeof(double));
    put(x.data(), nx * sizeof(double));
    return key;
}

std::shared_ptr<const Evaluation> FunctionalEstimator::evaluate(const GridPath& gamma_t, const Eigen::VectorXd& x) const {
    const std::string key = fingerprint(gamma_t, x);
    {
        std::lock_guard<std::mutex> lock(mutex_);
        const auto it = cache_.find(key);
        if (it != cache_.end()) return it->second;
    }
    const EnsembleSolution sol = picard_solve(problem_, gamma_t, x, config_for(gamma_t));
    auto e = std::make_shared<Evaluation>();
    e->u = sol.u_value;
    e->u_se = sol.u_se;
    e->z0 = sol.z0;
    e->z0_se = sol.z0_se;
    e->xi = sol.xi;
    e->zeta = sol.zeta;
    e->picard_iters = sol.picard_iters;
    e->converged = sol.converged;
    e->picard_history = sol.picard_history;
    std::lock_guard<std::mutex> lock(mutex_);
    ++solves_;
    // A concurrent insert of the same key holds an identical value.
    return cache_.emplace(key, std::move(e)).first->second;
}

EnsembleSolution FunctionalEstimator::solve_full(const GridPath& gamma_t, const Eigen::VectorXd& x) const {
    {
        std::lock_guard<std::mutex> lock(mutex_);
        ++solves_;
    }
    return picard_solve(problem_, gamma_t, x, config_for(gamma_t));
}

PathFunctional FunctionalEstimator::u_functional() const {
    PathFunctional f;
    f.eval = [this](const GridPath& p, const Eigen::VectorXd& x) { return evaluate(p, x)->u; };
    f.m = problem_.n;
    f.n = problem_.n;
    f.d = problem_.d;
    f.label = "u[" + problem_.label + "]";
    f.horizon = problem_.T;
    return f;
}

std::size_t FunctionalEstimator::solves() const {
    std::lock_guard<std::mutex> lock(mutex_);
    return solves_;
}

std::size_t FunctionalEstimator::cache_size() const {
    std::lock_guard<std::mutex> lock(mutex_);
    return cache_.size();
}

double mean_standard_error(const Eigen::Ref<const Eigen::VectorXd>& values, bool antithetic) {
    Eigen::VectorXd v = values;
    if (antithetic) {
        const Eigen::Index half = v.size() / 2;
        v = 0.5 * (values.head(half) + values.segment(half, half));
    }
    const auto m = static_cast<double>(v.size());
    if (m < 2) return 0.0;
    const double mean = v.mean();
    const double var = (v.array() - mean).square().sum() / (m - 1.0);
    return std::sqrt(var / m);
}

// ---------------------------------------------------------------------------

Estimate evaluate_u(const FunctionalEstimator& est, const GridPath& gamma_t, const Eigen::VectorXd& x) {
    const auto e = est.evaluate(gamma_t, x);
    return {e->u, e->u_se};
}

DerivativeEstimate spatial_gradient(const FunctionalEstimator& est, const GridPath& gamma_t, const Eigen::VectorXd& x,
                                    double h) {
    if (!(h > 0.0)) throw InvalidArgument("spatial_gradient: step must be positive");
    const Stencils s(est, gamma_t, x);
    const auto n = static_cast<Eigen::Index>(est.problem().n);
    return derivative_estimate(
        n, n, h, est.config().antithetic,
        [&](Eigen::Index, Eigen::Index l) {
            return std::make_pair(s.gradient(static_cast<std::size_t>(l), h), s.gradient(static_cast<std::size_t>(l), h / 2));
        },
        [](Eigen::Index k, Eigen::Index) { return k; });
}

std::vector<DerivativeEstimate> spatial_hessian(const FunctionalEstimator& est, const GridPath& gamma_t,
                                                const Eigen::VectorXd& x, double h) {
    if (!(h > 0.0)) throw InvalidArgument("spatial_hessian: step must be positive");
    const Stencils s(est, gamma_t, x);
    const auto n = static_cast<Eigen::Index>(est.problem().n);
    std::vector<DerivativeEstimate> out;
    for (Eigen::Index k = 0; k < n; ++k) {
        out.push_back(derivative_estimate(
            n, n, h, est.config().antithetic,
            [&](Eigen::Index l, Eigen::Index m) {
                const auto a = static_cast<std::size_t>(l), b = static_cast<std::size_t>(m);
                return std::make_pair(s.hessian(a, b, h), s.hessian(a, b, h / 2));
            },
            [k](Eigen::Index, Eigen::Index) { return k; }));
    }
    return out;
}

VerticalDerivatives path_vertical_derivatives(const FunctionalEstimator& est, const GridPath& gamma_t,
                                              const Eigen::VectorXd& x, const FDConfig& fd) {
    const PathFunctional u = est.u_functional();
    FDConfig half = fd;
    half.h_vert = fd.h_vert / 2;
    const Eigen::MatrixXd dz = vertical_derivative(u, gamma_t, x, fd);
    const Eigen::MatrixXd dz_half = vertical_derivative(u, gamma_t, x, half);
    const auto dzz = second_vertical_derivative(u, gamma_t, x, fd);
    const auto dzz_half = second_vertical_derivative(u, gamma_t, x, half);

    const Stencils s(est, gamma_t, x);
    const bool anti = est.config().antithetic;
    const double h = fd.h_vert;
    const auto n = static_cast<Eigen::Index>(est.problem().n), d = static_cast<Eigen::Index>(est.problem().d);
    VerticalDerivatives out;
    out.dz.step = h;
    out.dz.value = dz;
    out.dz.truncation = 4.0 / 3.0 * (dz - dz_half).cwiseAbs();
    out.dz.se.resize(n, d);
    for (Eigen::Index j = 0; j < d; ++j) {
        const Combo c = s.dz(static_cast<std::size_t>(j), h);
        for (Eigen::Index k = 0; k < n; ++k) out.dz.se(k, j) = mean_standard_error(c.paths(k), anti);
    }
    for (Eigen::Index k = 0; k < n; ++k) {
        DerivativeEstimate e;
        e.step = h;
        e.value = dzz.hessian[static_cast<std::size_t>(k)];
        e.truncation = 4.0 / 3.0 * (dzz.hessian[static_cast<std::size_t>(k)] - dzz_half.hessian[static_cast<std::size_t>(k)]).cwiseAbs();
        e.se.resize(d, d);
        for (Eigen::Index i = 0; i < d; ++i)
            for (Eigen::Index j = 0; j < d; ++j)
                e.se(i, j) = mean_standard_error(s.dzz(static_cast<std::size_t>(i), static_cast<std::size_t>(j), h).paths(k), anti);
        out.dzz.push_back(std::move(e));
    }
    return out;
}

// ---------------------------------------------------------------------------

ZRepresentationReport z_representation_check(const FunctionalEstimator& est, const GridPath& gamma_t,
                                              const Eigen::VectorXd& x, const CheckSettings& settings) {
    const auto& cs = est.problem();
    const std::size_t n = cs.n, d = cs.d;
    const Stencils s(est, gamma_t, x);
    const EvalPtr c = s.centre();
    const bool anti = est.config().antithetic;

    const DerivativeEstimate grad = spatial_gradient(est, gamma_t, x, settings.h_x);
    FDConfig fd;
    fd.h_vert = settings.h_z;
    const Eigen::MatrixXd dz = vertical_derivative(est.u_functional(), gamma_t, x, fd);
    FDConfig half = fd;
    half.h_vert = fd.h_vert / 2;
    const Eigen::MatrixXd dz_trunc = 4.0 / 3.0 * (dz - vertical_derivative(est.u_functional(), gamma_t, x, half)).cwiseAbs();

    // θ = (u, z0, ∇ₓu, D_z u).
    DeltaMethod dm;
    for (std::size_t k = 0; k < n; ++k) dm.add(c->u[static_cast<Eigen::Index>(k)], c->xi.col(static_cast<Eigen::Index>(k)));
    for (std::size_t k = 0; k < n; ++k)
        for (std::size_t j = 0; j < d; ++j)
            dm.add(c->z0(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(j)), c->zeta.col(flat(k, j, d)));
    for (std::size_t k = 0; k < n; ++k)
        for (std::size_t l = 0; l < n; ++l)
            dm.add(grad.value(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(l)),
                   s.gradient(l, settings.h_x).paths(static_cast<Eigen::Index>(k)));
    for (std::size_t k = 0; k < n; ++k)
        for (std::size_t j = 0; j < d; ++j)
            dm.add(dz(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(j)),
                   s.dz(j, settings.h_z).paths(static_cast<Eigen::Index>(k)));

    const std::size_t o_u = 0, o_v = n, o_g = n + n * d, o_dz = o_g + n * n;
    auto unpack = [&](const std::vector<double>& t) {
        Eigen::VectorXd u(static_cast<Eigen::Index>(n));
        Eigen::MatrixXd v(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d)), g(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n)),
            z(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
        for (std::size_t k = 0; k < n; ++k) {
            u[static_cast<Eigen::Index>(k)] = t[o_u + k];
            for (std::size_t j = 0; j < d; ++j) {
                v(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(j)) = t[o_v + k * d + j];
                z(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(j)) = t[o_dz + k * d + j];
            }
            for (std::size_t l = 0; l < n; ++l) g(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(l)) = t[o_g + k * n + l];
        }
        return std::make_tuple(u, v, g, z);
    };
    auto residual = [&](const std::vector<double>& t) {
        const auto [u, v, g, z] = unpack(t);
        const CoefficientValues cv = coefficients_at(cs, gamma_t, x, u, v);
        const Eigen::MatrixXd r = v - g * cv.sigma - z;
        return Eigen::VectorXd(Eigen::Map<const Eigen::VectorXd>(r.data(), r.size()));
    };

    ZRepresentationReport rep;
    const auto [u, v, g, z] = unpack(dm.theta());
    const CoefficientValues cv = coefficients_at(cs, gamma_t, x, u, v);
    rep.z0 = v;
    rep.sigma_grad = g * cv.sigma;
    rep.dz_u = z;
    rep.residual = v - rep.sigma_grad - z;
    const Eigen::VectorXd se = dm.se(residual, anti);
    rep.se = Eigen::Map<const Eigen::MatrixXd>(se.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
    rep.truncation = grad.truncation * cv.sigma.cwiseAbs() + dz_trunc;
    rep.budget = settings.n_se * rep.se + settings.c_fd * rep.truncation;
    rep.discrepancy = rep.residual.cwiseAbs().maxCoeff();
    rep.verdict = ((rep.residual.cwiseAbs().array() <= rep.budget.array()).all()) ? Verdict::pass : Verdict::fail;
    return rep;
}

// ---------------------------------------------------------------------------

FlowReport flow_property_check(const FunctionalEstimator& est, const GridPath& gamma_t, const Eigen::VectorXd& x,
                               const FlowSettings& settings) {
    check_scalar_support(est, "flow_property_check");
    if (settings.n_nodes == 0 || settings.n_probe_paths == 0) throw InvalidArgument("flow_property_check: empty probe set");
    const EnsembleSolution sol = est.solve_full(gamma_t, x);
    const std::size_t i0 = sol.start_node(), N = sol.n_steps(), P = sol.n_paths();
    if (N - i0 < 2) throw InvalidArgument("flow_property_check: no interior nodes after the start time");

    std::vector<std::size_t> nodes;
    for (std::size_t k = 1; k <= settings.n_nodes; ++k) {
        const auto s = i0 + static_cast<std::size_t>(std::llround(static_cast<double>(k) * static_cast<double>(N - i0) /
                                                                  static_cast<double>(settings.n_nodes + 1)));
        if (s > i0 && s < N && (nodes.empty() || nodes.back() != s)) nodes.push_back(s);
    }

    SolverConfig sub = est.config();
    sub.n_paths = std::min(settings.sub_paths, sub.n_paths);
    if (sub.antithetic && sub.n_paths % 2 != 0) --sub.n_paths;
    sub.picard_tol = std::max(settings.sub_tol, sub.picard_tol);
    const FunctionalEstimator sub_est(est.problem(), sub);

    const std::size_t probes = std::min(settings.n_probe_paths, P);
    FlowReport rep;
    double sum = 0.0;
    for (std::size_t s : nodes) {
        const NodeFit& fit = sol.fit(s);
        const NormalSolver ns(fit.gram, est.config().ridge);
        for (std::size_t q = 0; q < probes; ++q) {
            FlowProbe pr;
            pr.node = s;
            pr.path = q * P / probes;
            pr.stored = sol.y(pr.path, s)[0];
            pr.stored_se = std::sqrt(std::max(0.0, fit.resid_var_y[0] * ns.leverage(sol.design_row(pr.path, s)) /
                                                       static_cast<double>(P)));
            const GridPath prefix = sol.w_path(pr.path).prefix(s);
            const Eigen::VectorXd xs = Eigen::VectorXd::Constant(1, sol.x(pr.path, s)[0]);
            const auto e = sub_est.evaluate(prefix, xs);
            pr.fresh = e->u[0];
            pr.fresh_se = e->u_se[0];
            pr.deviation = std::abs(pr.fresh - pr.stored);
            pr.budget = settings.n_se * std::hypot(pr.fresh_se, pr.stored_se) + settings.allowance;
            pr.pass = pr.deviation <= pr.budget;
            rep.max_deviation = std::max(rep.max_deviation, pr.deviation);
            rep.max_relative = std::max(rep.max_relative, pr.deviation / pr.budget);
            sum += pr.deviation;
            rep.probes.push_back(pr);
        }
    }
    rep.mean_deviation = sum / static_cast<double>(rep.probes.size());
    rep.verdict = std::all_of(rep.probes.begin(), rep.probes.end(), [](const FlowProbe& p) { return p.pass; })
                      ? Verdict::pass
                      : Verdict::fail;
    return rep;
}

// ---------------------------------------------------------------------------

ResidualReport ppde_residual(const FunctionalEstimator& est, const GridPath& gamma_t, const Eigen::VectorXd& x,
                             const CheckSettings& settings) {
    const auto& cs = est.problem();
    const std::size_t n = cs.n, d = cs.d;
    const std::size_t i0 = gamma_t.last_node(), N = est.config().n_steps;
    if (i0 >= N) throw InvalidArgument("ppde_residual: t must be before the horizon");
    const std::size_t before = est.solves();
    const Stencils s(est, gamma_t, x);
    const EvalPtr c = s.centre();
    const bool anti = est.config().antithetic;
    const double hx = settings.h_x, hz = settings.h_z;
    const PathFunctional uf = est.u_functional();

    // Values through functional_calculus where it applies.
    FDConfig fd;
    fd.h_vert = hz;
    fd.h_time = est.dt();
    FDConfig fd_half = fd;
    fd_half.h_vert = hz / 2;
    const Eigen::VectorXd dt1 = horizontal_derivative(uf, gamma_t, x, fd);
    Eigen::VectorXd dt_trunc = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n));
    if (i0 + 2 <= N) {
        FDConfig fd2 = fd;
        fd2.h_time = 2.0 * est.dt();
        dt_trunc = (dt1 - horizontal_derivative(uf, gamma_t, x, fd2)).cwiseAbs();
    }
    const auto dzz = second_vertical_derivative(uf, gamma_t, x, fd);
    const auto dzz_half = second_vertical_derivative(uf, gamma_t, x, fd_half);
    const DerivativeEstimate grad = spatial_gradient(est, gamma_t, x, hx);
    const std::vector<DerivativeEstimate> hess = spatial_hessian(est, gamma_t, x, hx);

    // θ layout: u | v | D_t u | ∇ₓu | ∇ₓₓu | ∇ₓD_z u | diag D_zz u.
    DeltaMethod dm;
    std::vector<double> mixed_trunc(n * n * d), dzz_trunc(n * d);
    for (std::size_t k = 0; k < n; ++k) dm.add(c->u[static_cast<Eigen::Index>(k)], c->xi.col(static_cast<Eigen::Index>(k)));
    for (std::size_t k = 0; k < n; ++k)
        for (std::size_t j = 0; j < d; ++j)
            dm.add(c->z0(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(j)), c->zeta.col(flat(k, j, d)));
    const Combo dtc = s.dt(1);
    for (std::size_t k = 0; k < n; ++k) dm.add(dt1[static_cast<Eigen::Index>(k)], dtc.paths(static_cast<Eigen::Index>(k)));
    for (std::size_t k = 0; k < n; ++k)
        for (std::size_t l = 0; l < n; ++l)
            dm.add(grad.value(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(l)), s.gradient(l, hx).paths(static_cast<Eigen::Index>(k)));
    for (std::size_t k = 0; k < n; ++k)
        for (std::size_t l = 0; l < n; ++l)
            for (std::size_t m = 0; m < n; ++m)
                dm.add(hess[k].value(static_cast<Eigen::Index>(l), static_cast<Eigen::Index>(m)),
                       s.hessian(l, m, hx).paths(static_cast<Eigen::Index>(k)));
    for (std::size_t l = 0; l < n; ++l) {
        for (std::size_t j = 0; j < d; ++j) {
            const Combo full = s.mixed(l, j, hx, hz), half = s.mixed(l, j, hx / 2, hz / 2);
            for (std::size_t k = 0; k < n; ++k) {
                const auto kk = static_cast<Eigen::Index>(k);
                mixed_trunc[(k * n + l) * d + j] = 4.0 / 3.0 * std::abs(full.value(kk) - half.value(kk));
            }
        }
    }
    for (std::size_t k = 0; k < n; ++k)
        for (std::size_t l = 0; l < n; ++l)
            for (std::size_t j = 0; j < d; ++j) {
                const Combo full = s.mixed(l, j, hx, hz);
                dm.add(full.value(static_cast<Eigen::Index>(k)), full.paths(static_cast<Eigen::Index>(k)));
            }
    for (std::size_t k = 0; k < n; ++k)
        for (std::size_t j = 0; j < d; ++j) {
            const auto jj = static_cast<Eigen::Index>(j);
            dm.add(dzz.hessian[k](jj, jj), s.dzz(j, j, hz).paths(static_cast<Eigen::Index>(k)));
            dzz_trunc[k * d + j] = 4.0 / 3.0 * std::abs(dzz.hessian[k](jj, jj) - dzz_half.hessian[k](jj, jj));
        }

    const std::size_t o_u = 0, o_v = n, o_dt = o_v + n * d, o_g = o_dt + n, o_h = o_g + n * n, o_m = o_h + n * n * n,
                      o_zz = o_m + n * n * d;
    const auto ni = static_cast<Eigen::Index>(n), di = static_cast<Eigen::Index>(d);
    constexpr std::size_t kTerms = 6;

    // Per-term values at θ: rows are components, columns the six terms.
    auto terms_at = [&](const std::vector<double>& t) {
        Eigen::VectorXd u(ni);
        Eigen::MatrixXd v(ni, di);
        for (std::size_t k = 0; k < n; ++k) {
            u[static_cast<Eigen::Index>(k)] = t[o_u + k];
            for (std::size_t j = 0; j < d; ++j) v(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(j)) = t[o_v + k * d + j];
        }
        const CoefficientValues cv = coefficients_at(cs, gamma_t, x, u, v);
        const Eigen::MatrixXd a = cv.sigma * cv.sigma.transpose();
        Eigen::MatrixXd out = Eigen::MatrixXd::Zero(ni, kTerms);
        for (std::size_t k = 0; k < n; ++k) {
            const auto kk = static_cast<Eigen::Index>(k);
            out(kk, 0) = t[o_dt + k];
            for (std::size_t l = 0; l < n; ++l) {
                const auto ll = static_cast<Eigen::Index>(l);
                for (std::size_t m = 0; m < n; ++m) out(kk, 1) += 0.5 * a(ll, static_cast<Eigen::Index>(m)) * t[o_h + (k * n + l) * n + m];
                out(kk, 2) += cv.b[ll] * t[o_g + k * n + l];
                for (std::size_t j = 0; j < d; ++j) out(kk, 3) += t[o_m + (k * n + l) * d + j] * cv.sigma(ll, static_cast<Eigen::Index>(j));
            }
            for (std::size_t j = 0; j < d; ++j) out(kk, 4) += 0.5 * t[o_zz + k * d + j];
            out(kk, 5) = cv.h[kk];
        }
        return out;
    };
    auto residual_at = [&](const std::vector<double>& t) {
        const Eigen::MatrixXd tm = terms_at(t);
        return Eigen::VectorXd(tm.leftCols(kTerms - 1).rowwise().sum() - tm.col(kTerms - 1));
    };

    const Eigen::MatrixXd tv = terms_at(dm.theta());
    Eigen::VectorXd u(ni);
    Eigen::MatrixXd v(ni, di);
    for (std::size_t k = 0; k < n; ++k) {
        u[static_cast<Eigen::Index>(k)] = dm.theta()[o_u + k];
        for (std::size_t j = 0; j < d; ++j) v(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(j)) = dm.theta()[o_v + k * d + j];
    }
    const CoefficientValues cv = coefficients_at(cs, gamma_t, x, u, v);
    const Eigen::MatrixXd a = cv.sigma * cv.sigma.transpose();

    Eigen::MatrixXd trunc = Eigen::MatrixXd::Zero(ni, kTerms);
    for (std::size_t k = 0; k < n; ++k) {
        const auto kk = static_cast<Eigen::Index>(k);
        trunc(kk, 0) = dt_trunc[kk];
        for (std::size_t l = 0; l < n; ++l) {
            const auto ll = static_cast<Eigen::Index>(l);
            for (std::size_t m = 0; m < n; ++m)
                trunc(kk, 1) += 0.5 * std::abs(a(ll, static_cast<Eigen::Index>(m))) * hess[k].truncation(ll, static_cast<Eigen::Index>(m));
            trunc(kk, 2) += std::abs(cv.b[ll]) * grad.truncation(kk, ll);
            for (std::size_t j = 0; j < d; ++j)
                trunc(kk, 3) += std::abs(cv.sigma(ll, static_cast<Eigen::Index>(j))) * mixed_trunc[(k * n + l) * d + j];
        }
        for (std::size_t j = 0; j < d; ++j) trunc(kk, 4) += 0.5 * dzz_trunc[k * d + j];
    }

    static const char* names[kTerms] = {"D_t u", "1/2 tr[sigma sigma^T grad_xx u]", "<b, grad_x u>",
                                        "tr[grad_x D_z u sigma]", "1/2 tr[D_zz u]", "h"};
    ResidualReport rep;
    for (std::size_t q = 0; q < kTerms; ++q) {
        ResidualTerm term;
        term.name = names[q];
        term.value = tv.col(static_cast<Eigen::Index>(q));
        term.se = dm.se([&](const std::vector<double>& t) { return Eigen::VectorXd(terms_at(t).col(static_cast<Eigen::Index>(q))); }, anti);
        term.truncation = trunc.col(static_cast<Eigen::Index>(q));
        rep.terms.push_back(std::move(term));
    }
    rep.residual = tv.leftCols(kTerms - 1).rowwise().sum() - tv.col(kTerms - 1);
    rep.se = dm.se(residual_at, anti);
    rep.truncation = trunc.rowwise().sum();
    rep.budget = settings.n_se * rep.se + settings.c_fd * rep.truncation;
    rep.max_abs_residual = rep.residual.cwiseAbs().maxCoeff();
    rep.max_budget = rep.budget.maxCoeff();
    rep.evaluations = est.solves() - before;
    rep.verdict = (rep.residual.cwiseAbs().array() <= rep.budget.array()).all() ? Verdict::pass : Verdict::fail;
    return rep;
}

// ---------------------------------------------------------------------------

namespace {

// Node-major scalar trajectories of one solve from its start node on.
struct Trajectories {
    std::size_t i0 = 0, N = 0, P = 0;
    double dt = 0.0;
    std::vector<double> x, y, z;  // (node − i0)·P + path; z stops at N − 1

    double X(std::size_t node, std::size_t p) const { return x[(node - i0) * P + p]; }
    double Y(std::size_t node, std::size_t p) const { return y[(node - i0) * P + p]; }
    double Z(std::size_t node, std::size_t p) const { return z[(node - i0) * P + p]; }
};

Trajectories trajectories(const EnsembleSolution& sol) {
    Trajectories t;
    t.i0 = sol.start_node();
    t.N = sol.n_steps();
    t.P = sol.n_paths();
    t.dt = sol.dt();
    const std::size_t nodes = t.N - t.i0 + 1;
    t.x.resize(nodes * t.P);
    t.y.resize(nodes * t.P);
    t.z.resize((nodes - 1) * t.P);
    for (std::size_t i = t.i0; i <= t.N; ++i) {
        for (std::size_t p = 0; p < t.P; ++p) {
            t.x[(i - t.i0) * t.P + p] = sol.x(p, i)[0];
            t.y[(i - t.i0) * t.P + p] = sol.y(p, i)[0];
            if (i < t.N) t.z[(i - t.i0) * t.P + p] = sol.z(p, i)[0];
        }
    }
    return t;
}

struct Numerators {
    double y = 0.0, x = 0.0, z = 0.0;
};

// E sup|A − B|² for X and Y, E Σ|Z_A − Z_B|²Δt, over the common nodes; A and
// B are themselves differences (a1 − a0)/scale when a0 is given.
Numerators numerators(const Trajectories& a1, const Trajectories* a0, const Trajectories& b1, const Trajectories* b0,
                      double scale) {
    const std::size_t c = std::max(a1.i0, b1.i0), N = a1.N, P = a1.P;
    auto val = [&](const Trajectories& t1, const Trajectories* t0, auto getter, std::size_t i, std::size_t p) {
        const double v = (t1.*getter)(i, p);
        return t0 ? (v - (t0->*getter)(i, p)) / scale : v;
    };
    Numerators out;
    for (std::size_t p = 0; p < P; ++p) {
        double sy = 0.0, sx = 0.0, iz = 0.0;
        for (std::size_t i = c; i <= N; ++i) {
            const double dy = val(a1, a0, &Trajectories::Y, i, p) - val(b1, b0, &Trajectories::Y, i, p);
            const double dx = val(a1, a0, &Trajectories::X, i, p) - val(b1, b0, &Trajectories::X, i, p);
            sy = std::max(sy, dy * dy);
            sx = std::max(sx, dx * dx);
            if (i < N) {
                const double dz = val(a1, a0, &Trajectories::Z, i, p) - val(b1, b0, &Trajectories::Z, i, p);
                iz += dz * dz * a1.dt;
            }
        }
        out.y += sy;
        out.x += sx;
        out.z += iz;
    }
    out.y /= static_cast<double>(P);
    out.x /= static_cast<double>(P);
    out.z /= static_cast<double>(P);
    return out;
}

MomentRow moments(const Trajectories& t, const GridPath& path) {
    MomentRow m;
    m.path_norm = sup_norm(path);
    for (std::size_t p = 0; p < t.P; ++p) {
        double sy = 0.0, sx = 0.0, iz = 0.0;
        for (std::size_t i = t.i0; i <= t.N; ++i) {
            sy = std::max(sy, t.Y(i, p) * t.Y(i, p));
            sx = std::max(sx, t.X(i, p) * t.X(i, p));
            if (i < t.N) iz += t.Z(i, p) * t.Z(i, p) * t.dt;
        }
        m.sup_y2 += sy;
        m.sup_x2 += sx;
        m.int_z2 += iz;
    }
    const auto P = static_cast<double>(t.P);
    m.sup_y2 /= P;
    m.sup_x2 /= P;
    m.int_z2 /= P;
    return m;
}

} // namespace

double ratio_spread(const std::vector<double>& values, double floor) {
    if (values.empty()) return 1.0;
    const double hi = *std::max_element(values.begin(), values.end());
    const double lo = *std::min_element(values.begin(), values.end());
    if (hi <= floor) return 1.0;
    if (lo <= floor) return std::numeric_limits<double>::infinity();
    return hi / lo;
}

RegularityReport regularity_probe(const FunctionalEstimator& est, const GridPath& gamma_t, const Eigen::VectorXd& x,
                                  const RegularitySettings& settings) {
    check_scalar_support(est, "regularity_probe");
    const std::size_t N = est.config().n_steps, i0 = gamma_t.last_node();
    const double h = settings.dq_step;
    const bool dq = settings.difference_quotients;
    if (dq && !(h > 0.0)) throw InvalidArgument("regularity_probe: difference-quotient step must be positive");

    const Trajectories base = trajectories(est.solve_full(gamma_t, x));
    Trajectories base_h;
    if (dq) base_h = trajectories(est.solve_full(path_bump(gamma_t, 0, h), x));

    RegularityReport rep;
    rep.moments.push_back(moments(base, gamma_t));

    std::vector<Perturbation> list;
    for (double b : settings.bumps) list.push_back({b, 0});
    for (std::size_t k : settings.shifts) list.push_back({0.0, k});

    for (const Perturbation& pert : list) {
        if (pert.shift > 0 && i0 + pert.shift >= N) throw InvalidArgument("regularity_probe: time shift reaches the horizon");
        const GridPath other = pert.shift > 0 ? horizontal_extension_to_node(gamma_t, i0 + pert.shift)
                                              : path_bump(gamma_t, 0, pert.bump);
        RegularityRow row;
        row.perturbation = pert;
        const double sup = sup_distance(PathPair(gamma_t, other));
        row.distance2 = sup * sup + std::abs(other.time() - gamma_t.time());
        const Trajectories tr = trajectories(est.solve_full(other, x));
        rep.moments.push_back(moments(tr, other));
        const Numerators num = numerators(base, nullptr, tr, nullptr, 1.0);
        row.num_y = num.y;
        row.num_x = num.x;
        row.num_z = num.z;
        if (row.distance2 > 0.0) {
            row.rho_y = num.y / row.distance2;
            row.rho_x = num.x / row.distance2;
            row.rho_z = num.z / row.distance2;
        }
        if (dq) {
            const Trajectories tr_h = trajectories(est.solve_full(path_bump(other, 0, h), x));
            const Numerators dnum = numerators(base_h, &base, tr_h, &tr, h);
            if (row.distance2 > 0.0) {
                row.rho_dy = dnum.y / row.distance2;
                row.rho_dx = dnum.x / row.distance2;
                row.rho_dz = dnum.z / row.distance2;
            }
        }
        rep.rows.push_back(row);
    }

    // Growth exponent of E sup|Y|² in 1 + ‖γ‖ over the probed paths.
    {
        double mx = 0.0, my = 0.0, sxx = 0.0, sxy = 0.0;
        const auto m = static_cast<double>(rep.moments.size());
        for (const auto& r : rep.moments) {
            mx += std::log1p(r.path_norm) / m;
            my += std::log(std::max(r.sup_y2, 1e-300)) / m;
        }
        for (const auto& r : rep.moments) {
            const double a = std::log1p(r.path_norm) - mx;
            sxx += a * a;
            sxy += a * (std::log(std::max(r.sup_y2, 1e-300)) - my);
        }
        rep.moment_q = sxx > 1e-12 ? sxy / sxx : 0.0;
    }

    auto family = [&](bool shifts, double RegularityRow::*field) {
        std::vector<double> v;
        for (const auto& r : rep.rows)
            if ((r.perturbation.shift > 0) == shifts) v.push_back(r.*field);
        return ratio_spread(v, settings.zero_floor);
    };
    const std::pair<const char*, double RegularityRow::*> gated[] = {
        {"rho_y", &RegularityRow::rho_y}, {"rho_x", &RegularityRow::rho_x}, {"rho_z", &RegularityRow::rho_z}};
    const std::pair<const char*, double RegularityRow::*> extra[] = {
        {"rho_dy", &RegularityRow::rho_dy}, {"rho_dx", &RegularityRow::rho_dx}, {"rho_dz", &RegularityRow::rho_dz}};
    for (const auto& [name, field] : gated) {
        rep.spread[std::string("bump.") + name] = family(false, field);
        rep.spread[std::string("shift.") + name] = family(true, field);
        rep.max_spread = std::max({rep.max_spread, rep.spread[std::string("bump.") + name],
                                   rep.spread[std::string("shift.") + name]});
    }
    if (dq) {
        for (const auto& [name, field] : extra) {
            rep.spread[std::string("bump.") + name] = family(false, field);
            rep.spread[std::string("shift.") + name] = family(true, field);
        }
    }
    rep.verdict = rep.max_spread <= settings.max_spread ? Verdict::pass : Verdict::fail;
    return rep;
}

} // namespace pathfbsde
