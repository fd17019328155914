#pragma once

#include "pathfbsde/path_space.hpp"
#include "pathfbsde/problem.hpp"
#include "pathfbsde/regression.hpp"
#include "pathfbsde/rng.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <vector>

namespace pathfbsde {

struct SolverConfig {
    std::size_t n_steps = 64;  ///< steps of the global grid on [0, T]; dt = T / n_steps
    std::size_t n_paths = 200000;
    std::size_t picard_max = 50;
    double picard_tol = 1e-6;
    double damping = 0.5;
    RegressionBasisSpec basis;
    double ridge = 1e-6;
    std::uint64_t seed = 20240611;
    bool antithetic = false;
    /// Added to the node index of every increment address. Zero keys the
    /// stream to the start node of the solve.
    std::uint64_t stream_offset = 0;
    /// When false, a solve that exhausts picard_max returns with
    /// converged == false instead of throwing NoConvergence.
    bool throw_on_no_convergence = true;

    void validate() const;
    double dt(double T) const { return T / static_cast<double>(n_steps); }
};

struct Predictors;
class EnsembleSolution;

void simulate_forward(const CoefficientSet& coeffs, EnsembleSolution& sol, const Predictors& pred);
Predictors backward_sweep(const CoefficientSet& coeffs, EnsembleSolution& sol, const SolverConfig& cfg);
EnsembleSolution prepare_ensemble(const CoefficientSet& coeffs, const GridPath& gamma_t, const Eigen::VectorXd& x,
                                  const SolverConfig& cfg);

/// Regression data of one grid node, kept for error propagation.
struct NodeFit {
    std::vector<int> active;     ///< raw feature slots in use at this node
    MonomialBasis basis;
    Eigen::VectorXd centre;      ///< frozen-path value of each active feature
    Eigen::MatrixXd coef_y;      ///< K × n
    Eigen::MatrixXd coef_z;      ///< K × (n·d), row-major flattening of Z
    Eigen::MatrixXd gram;        ///< ΦᵀΦ / P
    Eigen::VectorXd resid_var_y; ///< mean squared residual of the Y fit, per component
    Eigen::VectorXd lo, hi;      ///< range of the centred features seen by the fit
};

/// Discretized adapted solution (X, Y, Z) started from (γ_t, x).
///
/// Node indices are absolute on the global grid; the solve covers nodes
/// start_node() … n_steps(). W is stored per path over [0, T]; X, Y and dW
/// are stored node-major.
class EnsembleSolution {
public:
    std::size_t n_paths() const noexcept { return P_; }
    std::size_t n() const noexcept { return n_; }
    std::size_t d() const noexcept { return d_; }
    std::size_t start_node() const noexcept { return i0_; }
    std::size_t n_steps() const noexcept { return N_; }
    double dt() const noexcept { return dt_; }

    std::span<const double> x(std::size_t path, std::size_t node) const;
    std::span<const double> y(std::size_t path, std::size_t node) const;
    /// Row-major n×d; defined for start_node() ≤ node < n_steps().
    std::span<const double> z(std::size_t path, std::size_t node) const;
    std::span<const double> dw(std::size_t path, std::size_t node) const;
    /// W^{γ_t} of one path over [0, T].
    PathView w(std::size_t path) const { return {W_.data() + path * (N_ + 1) * d_, N_ + 1, d_, dt_}; }
    GridPath w_path(std::size_t path) const;

    const NodeFit& fit(std::size_t node) const { return fits_.at(node - i0_); }

    /// Feature vector (active slots only) of a path state at a node, as the
    /// regression at that node sees it.
    Eigen::VectorXd features(std::size_t path, std::size_t node) const;
    /// Basis expansion of features(path, node) after centring.
    Eigen::VectorXd design_row(std::size_t path, std::size_t node) const;

    Eigen::VectorXd u_value;   ///< Y at the start node
    Eigen::VectorXd u_se;      ///< standard error of u_value
    Eigen::MatrixXd z0;        ///< Z at the start node, n×d
    Eigen::MatrixXd z0_se;
    /// Per-path terms whose mean is u_value: g − Σ h Δt. P × n.
    RowMatrix xi;
    /// Per-path terms whose mean is z0: (Y_{t+Δt} − Ŷ) ΔWᵀ/Δt. P × (n·d).
    RowMatrix zeta;

    std::size_t picard_iters = 0;
    std::vector<double> picard_history;
    bool converged = false;

private:
    friend void simulate_forward(const CoefficientSet&, EnsembleSolution&, const Predictors&);
    friend Predictors backward_sweep(const CoefficientSet&, EnsembleSolution&, const SolverConfig&);
    friend EnsembleSolution prepare_ensemble(const CoefficientSet&, const GridPath&, const Eigen::VectorXd&,
                                             const SolverConfig&);

    std::size_t P_ = 0, n_ = 0, d_ = 0, i0_ = 0, N_ = 0;
    double dt_ = 0.0;
    std::vector<double> W_, Wn_, X_, Y_, Z_, dW_;
    std::vector<double> avg_, max_;  ///< running average and running max of W, node-major
    std::vector<NodeFit> fits_;
    std::vector<double> frozen_avg_, frozen_max_;
    std::vector<double> x0_;
    struct Slot {
        FeatureKind kind;
        std::size_t comp;
        std::size_t node;  ///< checkpoint node, checkpoints only
    };
    std::vector<Slot> slots_;
    bool antithetic_ = false;

    bool slot_active(const Slot& slot, std::size_t node) const;
    double slot_centre(const Slot& slot, std::size_t node) const;
    /// Active features of a path state at a node, centred on the frozen path.
    void centred_features(std::size_t path, std::size_t node, std::span<const double> xval, std::span<double> out) const;
    /// Same for paths p0 … p0+len−1 at once, X taken from the ensemble; one row per path.
    void centred_block(std::size_t node, std::size_t p0, std::size_t len, Eigen::Ref<Eigen::MatrixXd> out) const;
};

/// Node predictors: per node, Y and Z coefficient matrices on that node's basis.
/// Values are truncated to [lo, hi] when evaluated off the fitting sample.
struct Predictors {
    std::vector<Eigen::MatrixXd> y;
    std::vector<Eigen::MatrixXd> z;
    std::vector<Eigen::VectorXd> y_lo, y_hi;
    std::vector<Eigen::VectorXd> z_lo, z_hi;
};

/// Euler–Maruyama pass of the forward equation with y and z given by
/// `pred` (empty means identically zero). Overwrites the X part of `sol`,
/// whose W, dW and node fits must already be set up by prepare_ensemble.
void simulate_forward(const CoefficientSet& coeffs, EnsembleSolution& sol, const Predictors& pred);

/// Regression backward pass on the X currently in `sol`. Sets Y, Z, the node
/// fits and the start-node statistics; returns the fitted predictors.
Predictors backward_sweep(const CoefficientSet& coeffs, EnsembleSolution& sol, const SolverConfig& cfg);

/// Allocates an ensemble for (γ_t, x), draws the increments and the W paths.
EnsembleSolution prepare_ensemble(const CoefficientSet& coeffs, const GridPath& gamma_t, const Eigen::VectorXd& x,
                                  const SolverConfig& cfg);

/// Damped Picard iteration of forward and backward passes.
EnsembleSolution picard_solve(const CoefficientSet& coeffs, const GridPath& gamma_t, const Eigen::VectorXd& x,
                              const SolverConfig& cfg);

} // namespace pathfbsde
