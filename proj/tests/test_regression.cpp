#include "pathfbsde/errors.hpp"
#include "pathfbsde/regression.hpp"
#include "pathfbsde/rng.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <vector>

using namespace pathfbsde;

namespace {

RowMatrix gaussian_features(std::size_t rows, std::size_t cols, std::uint64_t seed) {
    const IncrementSource src(seed, rows, cols, 1.0);
    RowMatrix f(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c)
            f(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = src.standard_normal(r, 0, static_cast<std::uint32_t>(c));
    return f;
}

// Design of degree-2 monomials in two variables, ordered 1, a, b, a², ab, b².
Eigen::MatrixXd quadratic_design(const Eigen::MatrixXd& f) {
    Eigen::MatrixXd d(f.rows(), 6);
    d.col(0).setOnes();
    d.col(1) = f.col(0);
    d.col(2) = f.col(1);
    d.col(3) = f.col(0).cwiseProduct(f.col(0));
    d.col(4) = f.col(0).cwiseProduct(f.col(1));
    d.col(5) = f.col(1).cwiseProduct(f.col(1));
    return d;
}

} // namespace

TEST(Regression, MonomialCountAndOrder) {
    EXPECT_EQ(MonomialBasis(2, 2).size(), 6u);
    EXPECT_EQ(MonomialBasis(7, 2).size(), 36u);
    EXPECT_EQ(MonomialBasis(3, 3).size(), 20u);
    EXPECT_EQ(MonomialBasis(4, 0).size(), 1u);
    std::vector<double> out(6);
    MonomialBasis(2, 2).expand(std::vector<double>{2.0, 3.0}, out);
    EXPECT_EQ(out, (std::vector<double>{1.0, 2.0, 3.0, 4.0, 6.0, 9.0}));
}

TEST(Regression, ColumnExpansionMatchesRowExpansion) {
    const MonomialBasis basis(3, 3);
    const Eigen::MatrixXd raw = gaussian_features(50, 3, 4);
    Eigen::MatrixXd cols(50, static_cast<Eigen::Index>(basis.size()));
    basis.expand_columns(raw, cols);
    std::vector<double> row(basis.size());
    for (Eigen::Index r = 0; r < raw.rows(); ++r) {
        const Eigen::VectorXd x = raw.row(r).transpose();
        basis.expand({x.data(), 3}, row);
        for (std::size_t k = 0; k < row.size(); ++k) EXPECT_EQ(cols(r, static_cast<Eigen::Index>(k)), row[k]);
    }
}

TEST(Regression, ConstantTargetGivesItsValue) {
    const RowMatrix f = gaussian_features(500, 2, 1);
    const RowMatrix t = RowMatrix::Constant(500, 1, 2.75);
    const Predictor p = regress_conditional(t, f, 2, 0.0);
    EXPECT_NEAR(p.coef(0, 0), 2.75, 1e-12);
    EXPECT_LT(p.coef.bottomRows(5).cwiseAbs().maxCoeff(), 1e-12);
    EXPECT_NEAR(p(std::vector<double>{0.3, -4.0})[0], 2.75, 1e-11);
}

TEST(Regression, PolynomialTargetIsReproducedExactly) {
    const RowMatrix f = gaussian_features(1000, 2, 2);
    RowMatrix t(1000, 2);
    t.col(0) = 2.0 * f.col(0);
    t.col(1) = (f.col(0).cwiseProduct(f.col(1)) - 0.5 * f.col(1)).array() + 1.0;
    const Predictor p = regress_conditional(t, f, 2, 0.0);
    for (double a : {-1.0, 0.0, 0.7}) {
        for (double b : {-0.4, 2.0}) {
            const Eigen::VectorXd v = p(std::vector<double>{a, b});
            EXPECT_NEAR(v[0], 2.0 * a, 1e-10);
            EXPECT_NEAR(v[1], a * b - 0.5 * b + 1.0, 1e-10);
        }
    }
}

TEST(Regression, AgreesWithOrthogonalDecomposition) {
    const RowMatrix f = gaussian_features(2000, 2, 3);
    const IncrementSource noise(30, 2000, 1, 1.0);
    RowMatrix t(2000, 1);
    for (Eigen::Index r = 0; r < 2000; ++r)
        t(r, 0) = std::sin(f(r, 0)) + std::exp(0.3 * f(r, 1)) + noise.standard_normal(static_cast<std::uint64_t>(r), 0, 0);
    const Predictor p = regress_conditional(t, f, 2, 0.0);

    const Eigen::MatrixXd shifted = f.rowwise() - f.colwise().mean();
    const Eigen::MatrixXd design = quadratic_design(shifted);
    const Eigen::VectorXd qr = design.colPivHouseholderQr().solve(Eigen::VectorXd(t.col(0)));
    EXPECT_LT((p.coef.col(0) - qr).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(Regression, RidgeSolvesThePenalizedNormalEquations) {
    const RowMatrix f = gaussian_features(300, 2, 5);
    RowMatrix t(300, 1);
    t.col(0) = f.col(0).array().square() + 0.1 * f.col(1).array();
    const double lambda = 0.25;
    const Predictor p = regress_conditional(t, f, 2, lambda);

    const Eigen::MatrixXd shifted = f.rowwise() - f.colwise().mean();
    const Eigen::MatrixXd design = quadratic_design(shifted);
    Eigen::MatrixXd a = design.transpose() * design / 300.0;
    a.diagonal().tail(5).array() += lambda;
    const Eigen::VectorXd direct = a.fullPivLu().solve(design.transpose() * Eigen::VectorXd(t.col(0)) / 300.0);
    EXPECT_LT((p.coef.col(0) - direct).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Regression, NoisySquareRecoversItsCoefficient) {
    const std::size_t n = 20000;
    const RowMatrix f = gaussian_features(n, 1, 6);
    const IncrementSource noise(60, n, 1, 1.0);
    RowMatrix t(static_cast<Eigen::Index>(n), 1);
    for (Eigen::Index r = 0; r < t.rows(); ++r)
        t(r, 0) = f(r, 0) * f(r, 0) + noise.standard_normal(static_cast<std::uint64_t>(r), 0, 0);
    const Predictor p = regress_conditional(t, f, 2, 0.0);
    // OLS standard error of the z² coefficient is about σ/√(n·Var z²) = 1/√(2n).
    const double se = 1.0 / std::sqrt(2.0 * static_cast<double>(n));
    EXPECT_NEAR(p.coef(2, 0), 1.0, 3.0 * se);
}

TEST(Regression, RankDeficientDesignNeedsRidge) {
    RowMatrix f = gaussian_features(400, 2, 7);
    f.col(1) = 3.0 * f.col(0);
    const RowMatrix t = f.col(0);
    EXPECT_THROW(regress_conditional(t, f, 1, 0.0), SingularRegression);
    const Predictor p = regress_conditional(t, f, 1, 1e-6);
    EXPECT_NEAR(p(std::vector<double>{0.5, 1.5})[0], 0.5, 1e-5);
}

TEST(Regression, RejectsTooFewSamplesAndBadRidge) {
    const RowMatrix f = gaussian_features(5, 2, 8);
    EXPECT_THROW(regress_conditional(RowMatrix::Zero(5, 1), f, 2, 0.0), InvalidArgument);
    EXPECT_THROW(regress_conditional(RowMatrix::Zero(4, 1), f, 1, 0.0), InvalidArgument);
    EXPECT_THROW(NormalSolver(Eigen::MatrixXd::Identity(2, 2), -1.0), InvalidArgument);
}

TEST(Regression, BlockedSumsIgnoreTheWorkerCount) {
    const RowMatrix f = gaussian_features(10000, 3, 9);
    const MonomialBasis basis(3, 2);
    Eigen::MatrixXd design(10000, static_cast<Eigen::Index>(basis.size()));
    basis.expand_columns(f, design);
    ::setenv("PATHFBSDE_THREADS", "1", 1);
    const Eigen::MatrixXd g1 = blocked_gram(design);
    const Eigen::MatrixXd c1 = blocked_cross(design, f);
    ::setenv("PATHFBSDE_THREADS", "4", 1);
    const Eigen::MatrixXd g4 = blocked_gram(design);
    const Eigen::MatrixXd c4 = blocked_cross(design, f);
    ::unsetenv("PATHFBSDE_THREADS");
    EXPECT_EQ(g1, g4);
    EXPECT_EQ(c1, c4);
    EXPECT_LT((g1 - design.transpose() * design / 10000.0).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Regression, BasisSpecValidation) {
    RegressionBasisSpec spec;
    EXPECT_NO_THROW(spec.validate());
    spec.poly_degree = 0;
    EXPECT_THROW(spec.validate(), InvalidArgument);
    spec.poly_degree = 2;
    spec.features = {FeatureKind::current_x, FeatureKind::current_x};
    EXPECT_THROW(spec.validate(), InvalidArgument);
    spec.features.clear();
    EXPECT_THROW(spec.validate(), InvalidArgument);
    EXPECT_EQ(feature_kind_from_string("running_average"), FeatureKind::running_average);
    EXPECT_EQ(std::string(to_string(FeatureKind::checkpoints)), "checkpoints");
    EXPECT_THROW(feature_kind_from_string("velocity"), InvalidArgument);
}
