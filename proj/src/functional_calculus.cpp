#include "pathfbsde/functional_calculus.hpp"

#include "pathfbsde/errors.hpp"

#include <algorithm>
#include <cmath>

namespace pathfbsde {

namespace {

Eigen::VectorXd checked_eval(const PathFunctional& u, const GridPath& path, const Eigen::VectorXd& x,
                             const std::vector<double>& bump) {
    Eigen::VectorXd v = u.eval(path, x);
    if (static_cast<std::size_t>(v.size()) != u.m) {
        throw InvalidArgument("functional '" + u.label + "' returned " + std::to_string(v.size()) +
                              " components, expected " + std::to_string(u.m));
    }
    if (!v.allFinite()) {
        throw EvaluationError("functional '" + u.label + "' is non-finite at a bumped path", bump);
    }
    return v;
}

// u evaluated at γ_t^{a e_i + b e_j}.
Eigen::VectorXd bumped(const PathFunctional& u, const GridPath& path, const Eigen::VectorXd& x, std::size_t i,
                       double a, std::size_t j, double b) {
    std::vector<double> shift(path.dim(), 0.0);
    shift[i] += a;
    shift[j] += b;
    return checked_eval(u, vertical_bump(path, shift), x, shift);
}

void validate(const PathFunctional& u, const GridPath& path, const Eigen::VectorXd& x, const FDConfig& cfg) {
    if (path.dim() != u.d) throw InvalidArgument("path dimension does not match functional '" + u.label + "'");
    if (static_cast<std::size_t>(x.size()) != u.n) {
        throw InvalidArgument("x dimension does not match functional '" + u.label + "'");
    }
    if (!(cfg.h_vert > 0.0)) throw InvalidArgument("FDConfig: h_vert must be positive");
}

} // namespace

const char* to_string(FdScheme scheme) { return scheme == FdScheme::central ? "central" : "forward"; }

FDConfig FDConfig::relative_to(const GridPath& path, double rel) {
    double norm = 0.0;
    for (double v : path.last()) norm += v * v;
    FDConfig cfg;
    cfg.h_vert = rel * std::max(1.0, std::sqrt(norm));
    cfg.h_time = path.dt();
    return cfg;
}

Eigen::MatrixXd vertical_derivative(const PathFunctional& u, const GridPath& path, const Eigen::VectorXd& x,
                                    const FDConfig& cfg) {
    validate(u, path, x, cfg);
    const double h = cfg.h_vert;
    Eigen::MatrixXd out(u.m, u.d);
    if (cfg.first_order == FdScheme::central) {
        for (std::size_t i = 0; i < u.d; ++i) {
            out.col(i) = (bumped(u, path, x, i, h, i, 0.0) - bumped(u, path, x, i, -h, i, 0.0)) / (2.0 * h);
        }
    } else {
        const Eigen::VectorXd base = checked_eval(u, path, x, std::vector<double>(u.d, 0.0));
        for (std::size_t i = 0; i < u.d; ++i) out.col(i) = (bumped(u, path, x, i, h, i, 0.0) - base) / h;
    }
    return out;
}

SecondVerticalDerivative second_vertical_derivative(const PathFunctional& u, const GridPath& path,
                                                    const Eigen::VectorXd& x, const FDConfig& cfg) {
    validate(u, path, x, cfg);
    const double h = cfg.h_vert;
    const std::size_t d = u.d;
    const Eigen::VectorXd base = checked_eval(u, path, x, std::vector<double>(d, 0.0));
    std::vector<Eigen::MatrixXd> raw(u.m, Eigen::MatrixXd::Zero(d, d));

    auto put = [&](std::size_t i, std::size_t j, const Eigen::VectorXd& v) {
        for (std::size_t k = 0; k < u.m; ++k) raw[k](i, j) = v[k];
    };

    for (std::size_t i = 0; i < d; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
            if (cfg.second_order == FdScheme::central) {
                if (i == j) {
                    put(i, i, (bumped(u, path, x, i, h, i, 0.0) - 2.0 * base + bumped(u, path, x, i, -h, i, 0.0)) /
                                  (h * h));
                } else {
                    put(i, j, (bumped(u, path, x, i, h, j, h) - bumped(u, path, x, i, h, j, -h) -
                               bumped(u, path, x, i, -h, j, h) + bumped(u, path, x, i, -h, j, -h)) /
                                  (4.0 * h * h));
                }
            } else {
                if (i == j) {
                    put(i, i, (bumped(u, path, x, i, 2.0 * h, i, 0.0) - 2.0 * bumped(u, path, x, i, h, i, 0.0) + base) /
                                  (h * h));
                } else {
                    put(i, j, (bumped(u, path, x, i, h, j, h) - bumped(u, path, x, i, h, j, 0.0) -
                               bumped(u, path, x, j, h, i, 0.0) + base) /
                                  (h * h));
                }
            }
        }
    }

    SecondVerticalDerivative out;
    for (auto& a : raw) {
        out.raw_asymmetry = std::max(out.raw_asymmetry, (a - a.transpose()).cwiseAbs().maxCoeff());
        out.hessian.emplace_back(0.5 * (a + a.transpose()));
    }
    return out;
}

Eigen::VectorXd horizontal_derivative(const PathFunctional& u, const GridPath& path, const Eigen::VectorXd& x,
                                      const FDConfig& cfg) {
    validate(u, path, x, cfg);
    const double h = cfg.h_time > 0.0 ? cfg.h_time : path.dt();
    const std::size_t steps = time_to_node(h, path.dt());
    if (steps == 0) throw InvalidArgument("horizontal_derivative: h_time must be at least dt");
    const std::size_t target = path.last_node() + steps;
    const double target_time = static_cast<double>(target) * path.dt();
    if (path.time() >= u.horizon - 1e-12 * std::max(1.0, u.horizon) ||
        target_time > u.horizon + 1e-9 * std::max(1.0, u.horizon)) {
        throw InvalidArgument("horizontal_derivative: extension past the horizon of '" + u.label + "'");
    }
    const std::vector<double> none(u.d, 0.0);
    const Eigen::VectorXd base = checked_eval(u, path, x, none);
    const Eigen::VectorXd ext = checked_eval(u, horizontal_extension_to_node(path, target), x, none);
    return (ext - base) / (static_cast<double>(steps) * path.dt());
}

double ito_residual(const PathFunctional& u, const GridPath& driving_path,
                    const std::vector<Eigen::MatrixXd>& quad_variation, const FDConfig& cfg) {
    if (u.m != 1) throw InvalidArgument("ito_residual: scalar functionals only");
    const std::size_t steps = driving_path.last_node();
    if (quad_variation.size() != steps && quad_variation.size() != steps + 1) {
        throw InvalidArgument("ito_residual: expected one quadratic-variation matrix per step");
    }
    const std::size_t d = driving_path.dim();
    const Eigen::VectorXd x = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(u.n));
    const std::vector<double> none(d, 0.0);

    FDConfig step_cfg = cfg;
    step_cfg.h_time = driving_path.dt();

    double sum = 0.0;
    for (std::size_t i = 0; i < steps; ++i) {
        const GridPath prefix = driving_path.prefix(i);
        const double ds = driving_path.dt();
        const double dts = horizontal_derivative(u, prefix, x, step_cfg)[0];
        const Eigen::MatrixXd dx = vertical_derivative(u, prefix, x, step_cfg);
        const auto dxx = second_vertical_derivative(u, prefix, x, step_cfg);
        double term = dts * ds;
        for (std::size_t k = 0; k < d; ++k) term += dx(0, k) * (driving_path.node(i + 1)[k] - driving_path.node(i)[k]);
        term += 0.5 * (dxx.hessian[0].array() * quad_variation[i].array()).sum();
        sum += term;
    }
    const double total = checked_eval(u, driving_path, x, none)[0] - checked_eval(u, driving_path.prefix(0), x, none)[0];
    return total - sum;
}

} // namespace pathfbsde
