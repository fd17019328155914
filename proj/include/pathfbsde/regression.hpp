#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace pathfbsde {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum class FeatureKind { current_x, current_w, running_average, running_max, checkpoints };

const char* to_string(FeatureKind kind);
FeatureKind feature_kind_from_string(const std::string& name);

struct RegressionBasisSpec {
    int poly_degree = 2;
    std::vector<FeatureKind> features = {FeatureKind::current_x, FeatureKind::current_w, FeatureKind::running_average,
                                         FeatureKind::checkpoints};
    std::size_t n_checkpoints = 4;

    void validate() const;
};

/// All monomials of total degree ≤ `degree` in `n_features` variables.
///
/// Monomial k > 0 is stored as (parent, feature) with value
/// value[parent]·raw[feature]; monomial 0 is the constant 1. Monomials are
/// ordered by degree, then lexicographically.
class MonomialBasis {
public:
    MonomialBasis() = default;
    MonomialBasis(std::size_t n_features, int degree);

    std::size_t size() const noexcept { return terms_.size() + 1; }
    std::size_t n_features() const noexcept { return n_features_; }
    int degree() const noexcept { return degree_; }

    /// out has size() entries.
    void expand(std::span<const double> raw, std::span<double> out) const;
    /// Row-wise expand of a rows × n_features block into rows × size().
    void expand_columns(const Eigen::Ref<const Eigen::MatrixXd>& raw, Eigen::Ref<Eigen::MatrixXd> out) const;

private:
    std::size_t n_features_ = 0;
    int degree_ = 0;
    std::vector<std::pair<std::size_t, std::size_t>> terms_;
};

/// ΦᵀΦ / P over a design with one row per path, summed in fixed blocks of
/// rows with a pairwise tree so the result does not depend on the worker count.
Eigen::MatrixXd blocked_gram(const Eigen::Ref<const Eigen::MatrixXd>& design);

/// Φᵀ T / P with the same blocking.
Eigen::MatrixXd blocked_cross(const Eigen::Ref<const Eigen::MatrixXd>& design, const Eigen::Ref<const RowMatrix>& targets);

/// Mean of each column with the same blocking.
Eigen::VectorXd blocked_mean(const RowMatrix& values);

/// Factorization of the ridge normal equations (G + λ I') c = r, with the
/// intercept (index 0) unpenalized.
///
/// With λ = 0, a column whose equilibrated Schur pivot falls below
/// `kCollinear` is collinear with earlier ones and raises SingularRegression.
/// With λ > 0 every column is kept and the penalty fixes the collinear
/// directions.
class NormalSolver {
public:
    static constexpr double kCollinear = 1e-9;

    NormalSolver(const Eigen::MatrixXd& gram, double ridge);

    Eigen::MatrixXd solve(const Eigen::MatrixXd& rhs) const;

    /// φᵀ G⁻¹ φ over the kept columns, used for the variance of a fitted value.
    double leverage(const Eigen::VectorXd& phi) const;

    const std::vector<Eigen::Index>& kept() const noexcept { return kept_; }

private:
    Eigen::Index size_ = 0;
    Eigen::VectorXd scale_;
    std::vector<Eigen::Index> kept_;
    Eigen::LLT<Eigen::MatrixXd> llt_;
};

/// Evaluable least-squares predictor of E[target | features].
struct Predictor {
    MonomialBasis basis;
    Eigen::VectorXd centre;    ///< subtracted from raw features before expansion
    Eigen::MatrixXd coef;      ///< basis.size() × q

    Eigen::VectorXd operator()(std::span<const double> raw) const;
};

/// Ridge least-squares fit of `targets` (P × q) on the polynomial expansion
/// of `features` (P × F) centred at their sample means. Minimizes mean squared
/// residual + ridge·‖c‖² with the intercept unpenalized.
Predictor regress_conditional(const RowMatrix& targets, const RowMatrix& features, int degree, double ridge);

} // namespace pathfbsde
