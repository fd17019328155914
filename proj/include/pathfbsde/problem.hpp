#pragma once

#include "pathfbsde/path_space.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace pathfbsde {

/// (W path stopped at the current node, x, y, z row-major n×d) → out.
using CoefficientFn = std::function<void(const PathView& w, std::span<const double> x, std::span<const double> y,
                                         std::span<const double> z, std::span<double> out)>;

/// (W path on [0,T], x) → out.
using TerminalFn = std::function<void(const PathView& w, std::span<const double> x, std::span<double> out)>;

/// The coefficients (b, σ, h, g) of the coupled system
///   dX = b ds + σ dW,  dY = h ds + Z dW,  X(t) = x,  Y(T) = g(W_T, X(T)).
///
/// σ and z are n×d, stored row-major. All callables must be stateless and
/// safe to call concurrently.
struct CoefficientSet {
    std::size_t n = 1;
    std::size_t d = 1;
    double T = 1.0;
    CoefficientFn drift;
    CoefficientFn diffusion;
    CoefficientFn driver;
    TerminalFn terminal;
    /// True when b and σ ignore (y, z); the forward pass is then identical
    /// across Picard iterations.
    bool decoupled = false;
    std::string label;
};

/// Exact solution of an oracle problem. Times are read off the path.
struct ClosedFormSolution {
    std::string formula;
    std::function<Eigen::VectorXd(const GridPath&, const Eigen::VectorXd&)> u;
    std::function<Eigen::MatrixXd(const GridPath&, const Eigen::VectorXd&)> z;             ///< n×d
    std::function<Eigen::MatrixXd(const GridPath&, const Eigen::VectorXd&)> grad_x;        ///< n×n
    std::function<Eigen::MatrixXd(const GridPath&, const Eigen::VectorXd&)> vertical;      ///< n×d
    std::function<Eigen::VectorXd(const GridPath&, const Eigen::VectorXd&)> horizontal;    ///< n
};

struct OracleProblem {
    CoefficientSet coeffs;
    ClosedFormSolution solution;
};

/// One element (x, y, z) of R^n × R^n × R^{n×d}.
struct Triple {
    Eigen::VectorXd x;
    Eigen::VectorXd y;
    Eigen::MatrixXd z;
};

/// [u¹, u²] = ⟨x¹, x²⟩ + ⟨y¹, y²⟩ + tr(z¹ (z²)ᵀ).
double pairing(const Triple& u1, const Triple& u2);

/// f(γ_t, u) = (h, b, σ) at a path and a triple.
Triple coefficient_bundle(const CoefficientSet& coeffs, const GridPath& path, const Triple& u);

struct AssumptionSample {
    GridPath path;      ///< ends at some t ≤ T, for f
    GridPath terminal;  ///< ends at T, for g
    Triple u1;
    Triple u2;
};

/// Source of random test points. `draw(k)` is called for k = 0, 1, ...;
/// `capacity` bounds how many samples it can produce.
struct AssumptionSampler {
    std::function<AssumptionSample(std::size_t)> draw;
    std::size_t capacity = 0;
};

/// Random Brownian paths on the problem's grid with Gaussian triples of
/// standard deviation `scale`.
AssumptionSampler gaussian_sampler(const CoefficientSet& coeffs, std::size_t n_steps, std::uint64_t seed,
                                   double scale = 1.0, std::size_t capacity = 1000000);

enum class Verdict { pass, fail, inconclusive };

const char* to_string(Verdict v);

struct AssumptionReport {
    double c1_hat = 0.0;
    double c2_hat = 0.0;
    double g_mono_hat = 0.0;
    double g_lipschitz_hat = 0.0;
    std::size_t samples = 0;
    Verdict verdict = Verdict::inconclusive;
};

/// Sampled check of the Lipschitz and monotonicity conditions. The
/// g-condition is taken in the squared form ⟨Δg, Δx⟩ ≥ c|Δx|². Verdict is
/// fail iff c2_hat < 0 or g_mono_hat ≤ 0, inconclusive if c2_hat == 0, pass
/// otherwise. A pass only means no violation was found.
AssumptionReport check_assumptions(const CoefficientSet& coeffs, const AssumptionSampler& sampler,
                                   std::size_t n_samples);

/// b = −c y, σ = −c z + σ₀, h = −c x, g = x. Exact: u = x, Z ≡ σ₀/(1+c).
OracleProblem oracle_coupled_ou(double c, double sigma0, double T);

struct RiccatiCoefficients {
    double b1 = 0.0;
    double b2 = -1.0;
    double h1 = -1.0;
    double h2 = 0.0;
    double sigma = 1.0;
};

/// b = b₁x + b₂y, h = h₁x + h₂y, σ constant, g = Gx. Exact: u = φ(t)x,
/// Z = φσ with φ' = h₁ + h₂φ − φ(b₁ + b₂φ), φ(T) = G.
OracleProblem oracle_riccati(const RiccatiCoefficients& a, double G, double T);

/// φ on [0, T] for the Riccati oracle. Throws OracleUnavailable on blow-up.
class RiccatiSolution {
public:
    RiccatiSolution(const RiccatiCoefficients& a, double G, double T, std::size_t steps = 1 << 14);

    double operator()(double t) const;
    double derivative(double t) const;

private:
    RiccatiCoefficients a_;
    double T_;
    double h_;
    std::vector<double> phi_;
};

/// b = 0, σ = 1, h = 0, g = left-point ∫₀ᵀ W ds.
/// Exact: u = ∫₀ᵗ γ ds + γ(t)(T − t), D_z u = T − t.
OracleProblem oracle_path_integral(double T);

/// b = 0, σ = 1, h = 0, g = W(T). Exact: u = γ(t), D_z u = 1, Z ≡ 1.
OracleProblem terminal_value_problem(double T);

/// b = +y, σ = 1, h = 0, g = x: the monotonicity sign is flipped.
CoefficientSet sign_flipped_problem(double T);

/// Left-point grid quadrature Σ_{i<N} γ_i dt.
double left_point_integral(const PathView& path);

struct ProblemEntry {
    std::string id;
    std::map<std::string, double> defaults;
    std::string formula;
    std::function<OracleProblem(const std::map<std::string, double>&)> build;
};

/// Built-in oracle problems in a stable order.
const std::vector<ProblemEntry>& problem_registry();

/// Builds a registered problem, merging `overrides` into its defaults.
/// Unknown ids or parameter names throw InvalidArgument.
OracleProblem make_problem(const std::string& id, const std::map<std::string, double>& overrides = {});

} // namespace pathfbsde
