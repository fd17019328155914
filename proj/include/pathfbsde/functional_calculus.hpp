#pragma once

#include "pathfbsde/path_space.hpp"

#include <Eigen/Dense>

#include <functional>
#include <limits>
#include <string>
#include <vector>

namespace pathfbsde {

/// A map (γ_t, x) ↦ R^m on Λ × R^n.
///
/// `eval` must be deterministic and free of hidden state: equal inputs give
/// bitwise-equal outputs. `horizon` bounds the end times the functional
/// accepts; horizontal derivatives refuse to extend past it.
struct PathFunctional {
    std::function<Eigen::VectorXd(const GridPath&, const Eigen::VectorXd&)> eval;
    std::size_t m = 1;
    std::size_t n = 0;
    std::size_t d = 1;
    std::string label;
    double horizon = std::numeric_limits<double>::infinity();

    Eigen::VectorXd operator()(const GridPath& path, const Eigen::VectorXd& x) const { return eval(path, x); }
};

enum class FdScheme { central, forward };

const char* to_string(FdScheme scheme);

struct FDConfig {
    double h_vert = 1e-3;
    double h_time = 0.0;  ///< 0 selects the path's own dt
    FdScheme first_order = FdScheme::central;
    FdScheme second_order = FdScheme::central;

    /// h_vert = rel·max(1, |γ(t)|), h_time = dt.
    static FDConfig relative_to(const GridPath& path, double rel = 1e-3);
};

/// D_z u: column i is the difference quotient for a bump of the final node
/// along e_i. Result is m × d.
Eigen::MatrixXd vertical_derivative(const PathFunctional& u, const GridPath& path, const Eigen::VectorXd& x,
                                    const FDConfig& cfg);

struct SecondVerticalDerivative {
    std::vector<Eigen::MatrixXd> hessian;  ///< one symmetric d × d block per output component
    double raw_asymmetry = 0.0;            ///< max |A − Aᵀ| before symmetrization
};

/// D_zz u via the 3-point diagonal and 4-point cross stencils, symmetrized.
SecondVerticalDerivative second_vertical_derivative(const PathFunctional& u, const GridPath& path,
                                                    const Eigen::VectorXd& x, const FDConfig& cfg);

/// D_t u: one-sided quotient over the flat extension γ_{t,t+h}.
Eigen::VectorXd horizontal_derivative(const PathFunctional& u, const GridPath& path, const Eigen::VectorXd& x,
                                      const FDConfig& cfg);

/// u(X_t) − u(X_0) minus the left-point functional Itô sum
/// Σ D_s u Δs + D_x u ΔX + ½ D_xx u : Δ⟨X⟩ along `driving_path`.
///
/// `quad_variation` holds the d × d quadratic-variation increment of each
/// step; a trailing entry for the final node is ignored. Scalar u only.
double ito_residual(const PathFunctional& u, const GridPath& driving_path,
                    const std::vector<Eigen::MatrixXd>& quad_variation, const FDConfig& cfg);

} // namespace pathfbsde
