#include "pathfbsde/regression.hpp"

#include "pathfbsde/errors.hpp"
#include "pathfbsde/parallel.hpp"

#include <cmath>

namespace pathfbsde {

const char* to_string(FeatureKind kind) {
    switch (kind) {
    case FeatureKind::current_x: return "current_x";
    case FeatureKind::current_w: return "current_w";
    case FeatureKind::running_average: return "running_average";
    case FeatureKind::running_max: return "running_max";
    default: return "checkpoints";
    }
}

FeatureKind feature_kind_from_string(const std::string& name) {
    for (auto k : {FeatureKind::current_x, FeatureKind::current_w, FeatureKind::running_average,
                   FeatureKind::running_max, FeatureKind::checkpoints}) {
        if (name == to_string(k)) return k;
    }
    throw InvalidArgument("unknown regression feature '" + name + "'");
}

void RegressionBasisSpec::validate() const {
    if (features.empty()) throw InvalidArgument("regression basis needs at least one feature");
    if (poly_degree < 1) throw InvalidArgument("regression basis degree must be at least 1");
    for (std::size_t i = 0; i < features.size(); ++i)
        for (std::size_t j = i + 1; j < features.size(); ++j)
            if (features[i] == features[j]) throw InvalidArgument("regression basis lists a feature twice");
}

MonomialBasis::MonomialBasis(std::size_t n_features, int degree) : n_features_(n_features), degree_(degree) {
    if (degree < 0) throw InvalidArgument("MonomialBasis: negative degree");
    // last[k] is the largest feature index in monomial k; extending only with
    // features ≥ last keeps each multiset unique.
    std::vector<std::size_t> last = {0};
    std::size_t begin = 0, end = 1;
    for (int deg = 1; deg <= degree; ++deg) {
        for (std::size_t parent = begin; parent < end; ++parent) {
            for (std::size_t f = (deg == 1 ? 0 : last[parent]); f < n_features; ++f) {
                terms_.emplace_back(parent, f);
                last.push_back(f);
            }
        }
        begin = end;
        end = terms_.size() + 1;
    }
}

void MonomialBasis::expand(std::span<const double> raw, std::span<double> out) const {
    out[0] = 1.0;
    for (std::size_t k = 0; k < terms_.size(); ++k) out[k + 1] = out[terms_[k].first] * raw[terms_[k].second];
}

void MonomialBasis::expand_columns(const Eigen::Ref<const Eigen::MatrixXd>& raw, Eigen::Ref<Eigen::MatrixXd> out) const {
    out.col(0).setOnes();
    for (std::size_t k = 0; k < terms_.size(); ++k) {
        out.col(static_cast<Eigen::Index>(k + 1)) =
            out.col(static_cast<Eigen::Index>(terms_[k].first)).cwiseProduct(raw.col(static_cast<Eigen::Index>(terms_[k].second)));
    }
}

Eigen::MatrixXd blocked_gram(const Eigen::Ref<const Eigen::MatrixXd>& design) {
    const auto rows = static_cast<std::size_t>(design.rows());
    const auto K = design.cols();
    const std::size_t nb = block_count(rows);
    std::vector<Eigen::MatrixXd> parts(nb);
    parallel_for(nb, [&](std::size_t b) {
        const auto r0 = static_cast<Eigen::Index>(b * kBlockRows);
        const auto len = static_cast<Eigen::Index>(std::min(kBlockRows, rows - b * kBlockRows));
        const auto blk = design.middleRows(r0, len);
        Eigen::MatrixXd g = Eigen::MatrixXd::Zero(K, K);
        g.selfadjointView<Eigen::Lower>().rankUpdate(blk.transpose());
        g.triangularView<Eigen::StrictlyUpper>() = g.transpose();
        parts[b] = std::move(g);
    });
    if (parts.empty()) return Eigen::MatrixXd::Zero(K, K);
    return tree_reduce(std::move(parts), [](const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
               return Eigen::MatrixXd(a + b);
           }) / static_cast<double>(rows);
}

Eigen::MatrixXd blocked_cross(const Eigen::Ref<const Eigen::MatrixXd>& design, const Eigen::Ref<const RowMatrix>& targets) {
    if (design.rows() != targets.rows()) throw InvalidArgument("blocked_cross: row count mismatch");
    const auto rows = static_cast<std::size_t>(design.rows());
    const std::size_t nb = block_count(rows);
    std::vector<Eigen::MatrixXd> parts(nb);
    parallel_for(nb, [&](std::size_t b) {
        const auto r0 = static_cast<Eigen::Index>(b * kBlockRows);
        const auto len = static_cast<Eigen::Index>(std::min(kBlockRows, rows - b * kBlockRows));
        parts[b] = design.middleRows(r0, len).transpose() * targets.middleRows(r0, len);
    });
    if (parts.empty()) return Eigen::MatrixXd::Zero(design.cols(), targets.cols());
    return tree_reduce(std::move(parts), [](const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
               return Eigen::MatrixXd(a + b);
           }) / static_cast<double>(rows);
}

Eigen::VectorXd blocked_mean(const RowMatrix& values) {
    const auto rows = static_cast<std::size_t>(values.rows());
    const std::size_t nb = block_count(rows);
    std::vector<Eigen::VectorXd> parts(nb);
    for (std::size_t b = 0; b < nb; ++b) {
        const auto r0 = static_cast<Eigen::Index>(b * kBlockRows);
        const auto len = static_cast<Eigen::Index>(std::min(kBlockRows, rows - b * kBlockRows));
        parts[b] = values.middleRows(r0, len).colwise().sum().transpose();
    }
    if (parts.empty()) return Eigen::VectorXd::Zero(values.cols());
    return tree_reduce(std::move(parts), [](const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
               return Eigen::VectorXd(a + b);
           }) / static_cast<double>(rows);
}

NormalSolver::NormalSolver(const Eigen::MatrixXd& gram, double ridge) : size_(gram.rows()) {
    if (!(ridge >= 0.0)) throw InvalidArgument("ridge weight must be non-negative");
    if (!gram.allFinite()) throw SingularRegression("regression design contains non-finite values");
    const auto K = size_;
    scale_.resize(K);
    for (Eigen::Index k = 0; k < K; ++k) scale_[k] = gram(k, k) > 0.0 ? 1.0 / std::sqrt(gram(k, k)) : 1.0;
    const Eigen::MatrixXd a = scale_.asDiagonal() * gram * scale_.asDiagonal();

    if (ridge > 0.0) {
        for (Eigen::Index k = 0; k < K; ++k) kept_.push_back(k);
    }
    // Left-looking Cholesky that stops at the first collinear column.
    Eigen::MatrixXd l = Eigen::MatrixXd::Zero(K, K);
    for (Eigen::Index k = 0; ridge == 0.0 && k < K; ++k) {
        const auto m = static_cast<Eigen::Index>(kept_.size());
        Eigen::VectorXd col(m);
        for (Eigen::Index j = 0; j < m; ++j) {
            double v = a(kept_[static_cast<std::size_t>(j)], k);
            for (Eigen::Index q = 0; q < j; ++q) v -= l(j, q) * col[q];
            col[j] = v / l(j, j);
        }
        const double pivot = a(k, k) - col.squaredNorm();
        if (!(pivot > kCollinear * std::max(a(k, k), 1e-300))) {
            throw SingularRegression("regression design is rank deficient (" + std::to_string(K) +
                                     " basis functions, column " + std::to_string(k) +
                                     " is collinear); use a positive ridge weight");
        }
        l.row(m).head(m) = col.transpose();
        l(m, m) = std::sqrt(pivot);
        kept_.push_back(k);
    }
    const auto m = static_cast<Eigen::Index>(kept_.size());
    Eigen::MatrixXd sub(m, m);
    for (Eigen::Index i = 0; i < m; ++i)
        for (Eigen::Index j = 0; j < m; ++j) sub(i, j) = a(kept_[static_cast<std::size_t>(i)], kept_[static_cast<std::size_t>(j)]);
    for (Eigen::Index i = 0; i < m; ++i) {
        const Eigen::Index k = kept_[static_cast<std::size_t>(i)];
        if (k > 0) sub(i, i) += ridge * scale_[k] * scale_[k];
    }
    llt_.compute(sub);
    if (llt_.info() != Eigen::Success) throw SingularRegression("regression normal equations are not positive definite");
}

Eigen::MatrixXd NormalSolver::solve(const Eigen::MatrixXd& rhs) const {
    const auto m = static_cast<Eigen::Index>(kept_.size());
    Eigen::MatrixXd r(m, rhs.cols());
    for (Eigen::Index i = 0; i < m; ++i) {
        const Eigen::Index k = kept_[static_cast<std::size_t>(i)];
        r.row(i) = scale_[k] * rhs.row(k);
    }
    const Eigen::MatrixXd c = llt_.solve(r);
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(size_, rhs.cols());
    for (Eigen::Index i = 0; i < m; ++i) {
        const Eigen::Index k = kept_[static_cast<std::size_t>(i)];
        out.row(k) = scale_[k] * c.row(i);
    }
    return out;
}

double NormalSolver::leverage(const Eigen::VectorXd& phi) const {
    const auto m = static_cast<Eigen::Index>(kept_.size());
    Eigen::VectorXd s(m);
    for (Eigen::Index i = 0; i < m; ++i) {
        const Eigen::Index k = kept_[static_cast<std::size_t>(i)];
        s[i] = scale_[k] * phi[k];
    }
    return s.dot(llt_.solve(s));
}

Eigen::VectorXd Predictor::operator()(std::span<const double> raw) const {
    if (raw.size() != basis.n_features()) throw InvalidArgument("Predictor: wrong feature count");
    std::vector<double> shifted(raw.size()), phi(basis.size());
    for (std::size_t k = 0; k < raw.size(); ++k) shifted[k] = raw[k] - centre[static_cast<Eigen::Index>(k)];
    basis.expand(shifted, phi);
    return coef.transpose() * Eigen::Map<const Eigen::VectorXd>(phi.data(), static_cast<Eigen::Index>(phi.size()));
}

Predictor regress_conditional(const RowMatrix& targets, const RowMatrix& features, int degree, double ridge) {
    if (targets.rows() != features.rows()) throw InvalidArgument("regress_conditional: row count mismatch");
    Predictor pred;
    pred.basis = MonomialBasis(static_cast<std::size_t>(features.cols()), degree);
    const auto K = static_cast<Eigen::Index>(pred.basis.size());
    if (features.rows() < K) {
        throw InvalidArgument("regress_conditional: " + std::to_string(features.rows()) + " samples for " +
                              std::to_string(K) + " basis functions");
    }
    pred.centre = blocked_mean(features);
    const Eigen::MatrixXd shifted = features.rowwise() - pred.centre.transpose();
    Eigen::MatrixXd design(features.rows(), K);
    pred.basis.expand_columns(shifted, design);
    const NormalSolver solver(blocked_gram(design), ridge);
    pred.coef = solver.solve(blocked_cross(design, targets));
    return pred;
}

} // namespace pathfbsde
