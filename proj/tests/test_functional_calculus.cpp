#include "pathfbsde/errors.hpp"
#include "pathfbsde/functional_calculus.hpp"
#include "pathfbsde/rng.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

using namespace pathfbsde;

namespace {

PathFunctional endpoint(std::function<double(double)> f, std::string label) {
    PathFunctional u;
    u.label = std::move(label);
    u.eval = [f](const GridPath& p, const Eigen::VectorXd&) { return Eigen::VectorXd::Constant(1, f(p.last()[0])); };
    return u;
}

PathFunctional left_integral() {
    PathFunctional u;
    u.label = "integral";
    u.eval = [](const GridPath& p, const Eigen::VectorXd&) {
        double s = 0.0;
        for (std::size_t i = 0; i + 1 < p.nodes(); ++i) s += p.node(i)[0] * p.dt();
        return Eigen::VectorXd::Constant(1, s);
    };
    return u;
}

GridPath path_ending_at(double v, double dt = 0.1, std::size_t nodes = 4) {
    std::vector<double> values(nodes, 0.5);
    values.back() = v;
    return GridPath(1, dt, values);
}

const Eigen::VectorXd kNoX(0);

FDConfig with_h(double h) {
    FDConfig cfg;
    cfg.h_vert = h;
    return cfg;
}

double fitted_slope(const std::vector<double>& x, const std::vector<double>& y) {
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        mx += std::log(x[i]);
        my += std::log(y[i]);
    }
    mx /= static_cast<double>(x.size());
    my /= static_cast<double>(x.size());
    double sxy = 0, sxx = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxy += (std::log(x[i]) - mx) * (std::log(y[i]) - my);
        sxx += (std::log(x[i]) - mx) * (std::log(x[i]) - mx);
    }
    return sxy / sxx;
}

} // namespace

TEST(FunctionalCalculus, CentralDifferenceIsExactOnQuadratics) {
    const auto u = endpoint([](double z) { return z * z; }, "square");
    EXPECT_NEAR(vertical_derivative(u, path_ending_at(3.0), kNoX, with_h(0.1))(0, 0), 6.0, 1e-12);
    for (double h : {0.05, 0.125, 0.5, 1.0}) {
        const auto d2 = second_vertical_derivative(u, path_ending_at(3.0), kNoX, with_h(h));
        EXPECT_NEAR(d2.hessian[0](0, 0), 2.0, 1e-10) << "h=" << h;
        EXPECT_NEAR(vertical_derivative(u, path_ending_at(3.0), kNoX, with_h(h))(0, 0), 6.0, 1e-10) << "h=" << h;
    }
}

TEST(FunctionalCalculus, LinearFunctionalHasZeroHessian) {
    const auto u = endpoint([](double z) { return 3.0 * z - 1.0; }, "linear");
    const auto d2 = second_vertical_derivative(u, path_ending_at(0.7), kNoX, with_h(1e-2));
    EXPECT_NEAR(d2.hessian[0](0, 0), 0.0, 1e-10);
}

TEST(FunctionalCalculus, QuarticSecondDerivativeWithinStencilError) {
    const auto u = endpoint([](double z) { return z * z * z * z; }, "quartic");
    const auto d2 = second_vertical_derivative(u, path_ending_at(1.0), kNoX, with_h(0.01));
    // Stencil error is h²/12 · u'''' = 2e-4.
    EXPECT_NEAR(d2.hessian[0](0, 0), 12.0, 1e-2);
    EXPECT_NEAR(d2.hessian[0](0, 0) - 12.0, 2e-4, 1e-6);
}

TEST(FunctionalCalculus, IntegralHasZeroVerticalDerivative) {
    const auto u = left_integral();
    EXPECT_EQ(vertical_derivative(u, path_ending_at(2.0), kNoX, with_h(0.1))(0, 0), 0.0);
}

TEST(FunctionalCalculus, RunningMaxWithInteriorPeak) {
    PathFunctional u;
    u.label = "max";
    u.eval = [](const GridPath& p, const Eigen::VectorXd&) {
        double m = -std::numeric_limits<double>::infinity();
        for (double v : p.values()) m = std::max(m, v);
        return Eigen::VectorXd::Constant(1, m);
    };
    const GridPath p(1, 0.5, {0.0, 2.0, 1.0});
    EXPECT_EQ(vertical_derivative(u, p, kNoX, with_h(0.1))(0, 0), 0.0);
}

TEST(FunctionalCalculus, HorizontalDerivativeExamples) {
    FDConfig cfg;
    const auto identity = endpoint([](double z) { return z; }, "endpoint");
    EXPECT_EQ(horizontal_derivative(identity, path_ending_at(1.3), kNoX, cfg)[0], 0.0);

    PathFunctional tz;
    tz.label = "t*z";
    tz.eval = [](const GridPath& p, const Eigen::VectorXd&) { return Eigen::VectorXd::Constant(1, p.time() * p.last()[0]); };
    EXPECT_NEAR(horizontal_derivative(tz, path_ending_at(2.0), kNoX, cfg)[0], 2.0, 1e-12);

    cfg.h_time = 0.2;
    EXPECT_NEAR(horizontal_derivative(left_integral(), path_ending_at(3.0), kNoX, cfg)[0], 3.0, 1e-12);
}

TEST(FunctionalCalculus, HorizontalDerivativeRefusesTheHorizon) {
    auto u = endpoint([](double z) { return z; }, "endpoint");
    u.horizon = 0.3;
    EXPECT_THROW(horizontal_derivative(u, path_ending_at(1.0, 0.1, 4), kNoX, FDConfig{}), InvalidArgument);
    u.horizon = 0.35;
    FDConfig cfg;
    cfg.h_time = 0.1;
    EXPECT_NO_THROW(horizontal_derivative(u, path_ending_at(1.0, 0.1, 3), kNoX, cfg));
    cfg.h_time = 0.2;
    EXPECT_THROW(horizontal_derivative(u, path_ending_at(1.0, 0.1, 3), kNoX, cfg), InvalidArgument);
}

TEST(FunctionalCalculus, NonFiniteValueReportsTheBump) {
    const auto u = endpoint([](double z) { return std::log(z); }, "log");
    try {
        vertical_derivative(u, path_ending_at(0.05), kNoX, with_h(0.1));
        FAIL() << "expected EvaluationError";
    } catch (const EvaluationError& e) {
        ASSERT_EQ(e.bump().size(), 1u);
        EXPECT_EQ(e.bump()[0], -0.1);
    }
}

TEST(FunctionalCalculus, CrossDerivativeAndSymmetry) {
    PathFunctional u;
    u.d = 2;
    u.label = "cross";
    u.eval = [](const GridPath& p, const Eigen::VectorXd&) {
        const double a = p.last()[0], b = p.last()[1];
        return Eigen::VectorXd::Constant(1, a * b + std::sin(a) * std::exp(b));
    };
    const GridPath p(2, 0.1, {0.0, 0.0, 0.3, -0.2});
    const auto d2 = second_vertical_derivative(u, p, kNoX, with_h(1e-3));
    const double a = 0.3, b = -0.2;
    EXPECT_NEAR(d2.hessian[0](0, 1), 1.0 + std::cos(a) * std::exp(b), 1e-6);
    EXPECT_NEAR(d2.hessian[0](0, 0), -std::sin(a) * std::exp(b), 1e-6);
    EXPECT_NEAR(d2.hessian[0](1, 1), std::sin(a) * std::exp(b), 1e-6);
    EXPECT_EQ(d2.hessian[0](0, 1), d2.hessian[0](1, 0));
    EXPECT_LT(d2.raw_asymmetry, 1e-6);
}

TEST(FunctionalCalculus, ForwardSchemeIsFirstOrder) {
    const auto u = endpoint([](double z) { return std::exp(z); }, "exp");
    FDConfig cfg = with_h(1e-3);
    cfg.first_order = FdScheme::forward;
    const double err1 = std::abs(vertical_derivative(u, path_ending_at(0.0), kNoX, cfg)(0, 0) - 1.0);
    cfg.h_vert = 5e-4;
    const double err2 = std::abs(vertical_derivative(u, path_ending_at(0.0), kNoX, cfg)(0, 0) - 1.0);
    EXPECT_NEAR(err1 / err2, 2.0, 0.01);
}

TEST(FunctionalCalculus, CentralSchemeIsSecondOrder) {
    const auto u = endpoint([](double z) { return std::sin(z); }, "sin");
    std::vector<double> hs, errs;
    for (double h = 0.08; h > 0.004; h /= 2) {
        hs.push_back(h);
        errs.push_back(std::abs(vertical_derivative(u, path_ending_at(0.4), kNoX, with_h(h))(0, 0) - std::cos(0.4)));
    }
    const double slope = fitted_slope(hs, errs);
    EXPECT_GE(slope, 1.8);
    EXPECT_LE(slope, 2.2);
}

TEST(FunctionalCalculus, ItoResidualTrivialCases) {
    const GridPath p(1, 0.25, {0.0, 0.3, -0.1, 0.4, 0.2});
    const std::vector<Eigen::MatrixXd> qv(4, Eigen::MatrixXd::Constant(1, 1, 0.25));
    EXPECT_NEAR(ito_residual(endpoint([](double z) { return z; }, "id"), p, qv, FDConfig{}), 0.0, 1e-12);
    EXPECT_EQ(ito_residual(endpoint([](double) { return 1.5; }, "const"), p, qv, FDConfig{}), 0.0);
    EXPECT_THROW(ito_residual(endpoint([](double z) { return z; }, "id"), p, {qv[0]}, FDConfig{}), InvalidArgument);
}

TEST(FunctionalCalculus, ItoResidualOfSquareShrinksWithTheStep) {
    const auto u = endpoint([](double z) { return z * z; }, "square");
    std::vector<double> dts, rms;
    for (int k = 4; k <= 8; ++k) {
        const std::size_t steps = std::size_t{1} << k;
        const double dt = 1.0 / static_cast<double>(steps);
        const IncrementSource src(7, 64, 1, dt);
        double s2 = 0.0;
        for (std::size_t path = 0; path < 64; ++path) {
            std::vector<double> v(steps + 1, 0.0);
            for (std::size_t i = 0; i < steps; ++i) {
                double inc = 0.0;
                src.fill(path, i, {&inc, 1});
                v[i + 1] = v[i] + inc;
            }
            const std::vector<Eigen::MatrixXd> qv(steps, Eigen::MatrixXd::Constant(1, 1, dt));
            const double r = ito_residual(u, GridPath(1, dt, v), qv, FDConfig{});
            s2 += r * r;
        }
        dts.push_back(dt);
        rms.push_back(std::sqrt(s2 / 64.0));
    }
    EXPECT_GE(fitted_slope(dts, rms), 0.4);
}
