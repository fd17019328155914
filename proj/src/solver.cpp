#include "pathfbsde/solver.hpp"

#include "pathfbsde/errors.hpp"
#include "pathfbsde/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace pathfbsde {

namespace {

constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();

std::span<const double> vec_span(const Eigen::VectorXd& v) { return {v.data(), static_cast<std::size_t>(v.size())}; }

// Standard error of the column means, using antithetic pair averages when the
// second half of the rows mirrors the first.
Eigen::VectorXd column_se(const RowMatrix& v, bool antithetic) {
    RowMatrix w = v;
    if (antithetic) {
        const auto half = v.rows() / 2;
        w = 0.5 * (v.topRows(half) + v.bottomRows(half));
    }
    const Eigen::VectorXd mean = blocked_mean(w);
    RowMatrix dev2 = (w.rowwise() - mean.transpose()).array().square().matrix();
    const double m = static_cast<double>(w.rows());
    return (blocked_mean(dev2) * m / std::max(1.0, m - 1.0) / m).cwiseSqrt();
}

} // namespace

void SolverConfig::validate() const {
    if (n_steps < 1) throw InvalidArgument("solver: n_steps must be at least 1");
    if (n_paths < 2) throw InvalidArgument("solver: n_paths must be at least 2");
    if (!(picard_tol > 0.0)) throw InvalidArgument("solver: picard_tol must be positive");
    if (!(damping > 0.0 && damping <= 1.0)) throw InvalidArgument("solver: damping must lie in (0, 1]");
    if (picard_max < 1) throw InvalidArgument("solver: picard_max must be at least 1");
    if (!(ridge >= 0.0)) throw InvalidArgument("solver: ridge must be non-negative");
    if (antithetic && n_paths % 2 != 0) throw InvalidArgument("solver: antithetic sampling needs an even n_paths");
    basis.validate();
}

std::span<const double> EnsembleSolution::x(std::size_t path, std::size_t node) const {
    return {X_.data() + ((node - i0_) * P_ + path) * n_, n_};
}

std::span<const double> EnsembleSolution::y(std::size_t path, std::size_t node) const {
    return {Y_.data() + ((node - i0_) * P_ + path) * n_, n_};
}

std::span<const double> EnsembleSolution::z(std::size_t path, std::size_t node) const {
    if (node >= N_) throw InvalidArgument("EnsembleSolution::z: no Z at the terminal node");
    return {Z_.data() + ((node - i0_) * P_ + path) * n_ * d_, n_ * d_};
}

std::span<const double> EnsembleSolution::dw(std::size_t path, std::size_t node) const {
    if (node >= N_) throw InvalidArgument("EnsembleSolution::dw: no increment after the terminal node");
    return {dW_.data() + ((node - i0_) * P_ + path) * d_, d_};
}

GridPath EnsembleSolution::w_path(std::size_t path) const {
    const auto v = w(path).values();
    return GridPath(d_, dt_, std::vector<double>(v.begin(), v.end()));
}

bool EnsembleSolution::slot_active(const Slot& slot, std::size_t node) const {
    switch (slot.kind) {
    case FeatureKind::current_x:
    case FeatureKind::current_w:
    case FeatureKind::running_max: return node > i0_;
    case FeatureKind::running_average: return node >= i0_ + 2;
    default: return slot.node > i0_ && slot.node < node;
    }
}

double EnsembleSolution::slot_centre(const Slot& slot, std::size_t node) const {
    switch (slot.kind) {
    case FeatureKind::current_x: return x0_[slot.comp];
    case FeatureKind::current_w:
    case FeatureKind::checkpoints: return W_[i0_ * d_ + slot.comp];
    case FeatureKind::running_average: return frozen_avg_[(node - i0_) * d_ + slot.comp];
    default: return frozen_max_[slot.comp];
    }
}

void EnsembleSolution::centred_features(std::size_t path, std::size_t node, std::span<const double> xval,
                                        std::span<double> out) const {
    const NodeFit& f = fits_[node - i0_];
    const std::size_t local = node - i0_;
    for (std::size_t k = 0; k < f.active.size(); ++k) {
        const Slot& s = slots_[static_cast<std::size_t>(f.active[k])];
        double v = 0.0;
        switch (s.kind) {
        case FeatureKind::current_x: v = xval[s.comp]; break;
        case FeatureKind::current_w: v = Wn_[(node * P_ + path) * d_ + s.comp]; break;
        case FeatureKind::running_average: v = avg_[(local * P_ + path) * d_ + s.comp]; break;
        case FeatureKind::running_max: v = max_[(local * P_ + path) * d_ + s.comp]; break;
        case FeatureKind::checkpoints: v = Wn_[(s.node * P_ + path) * d_ + s.comp]; break;
        }
        out[k] = v - f.centre[static_cast<Eigen::Index>(k)];
    }
}

void EnsembleSolution::centred_block(std::size_t node, std::size_t p0, std::size_t len,
                                     Eigen::Ref<Eigen::MatrixXd> out) const {
    using Strided = Eigen::Map<const Eigen::VectorXd, 0, Eigen::InnerStride<>>;
    const NodeFit& f = fits_[node - i0_];
    const std::size_t local = node - i0_;
    const auto rows = static_cast<Eigen::Index>(len);
    for (std::size_t k = 0; k < f.active.size(); ++k) {
        const Slot& s = slots_[static_cast<std::size_t>(f.active[k])];
        const double* src = nullptr;
        std::size_t stride = d_;
        switch (s.kind) {
        case FeatureKind::current_x:
            src = X_.data() + (local * P_ + p0) * n_ + s.comp;
            stride = n_;
            break;
        case FeatureKind::current_w: src = Wn_.data() + (node * P_ + p0) * d_ + s.comp; break;
        case FeatureKind::running_average: src = avg_.data() + (local * P_ + p0) * d_ + s.comp; break;
        case FeatureKind::running_max: src = max_.data() + (local * P_ + p0) * d_ + s.comp; break;
        case FeatureKind::checkpoints: src = Wn_.data() + (s.node * P_ + p0) * d_ + s.comp; break;
        }
        out.col(static_cast<Eigen::Index>(k)) =
            Strided(src, rows, Eigen::InnerStride<>(static_cast<Eigen::Index>(stride))).array() -
            f.centre[static_cast<Eigen::Index>(k)];
    }
}

Eigen::VectorXd EnsembleSolution::features(std::size_t path, std::size_t node) const {
    const NodeFit& f = fit(node);
    Eigen::VectorXd out(static_cast<Eigen::Index>(f.active.size()));
    centred_features(path, node, x(path, node), {out.data(), f.active.size()});
    return out + f.centre;
}

Eigen::VectorXd EnsembleSolution::design_row(std::size_t path, std::size_t node) const {
    const NodeFit& f = fit(node);
    Eigen::VectorXd raw(static_cast<Eigen::Index>(f.active.size()));
    centred_features(path, node, x(path, node), {raw.data(), f.active.size()});
    Eigen::VectorXd phi(static_cast<Eigen::Index>(f.basis.size()));
    f.basis.expand(vec_span(raw), {phi.data(), f.basis.size()});
    return phi;
}

EnsembleSolution prepare_ensemble(const CoefficientSet& coeffs, const GridPath& gamma_t, const Eigen::VectorXd& x,
                                  const SolverConfig& cfg) {
    cfg.validate();
    if (coeffs.n == 0 || coeffs.d == 0) throw InvalidArgument("solver: problem dimensions must be positive");
    if (gamma_t.dim() != coeffs.d) throw InvalidArgument("solver: path dimension does not match the problem");
    if (static_cast<std::size_t>(x.size()) != coeffs.n) throw InvalidArgument("solver: x dimension does not match");
    if (!x.allFinite()) throw InvalidArgument("solver: x is not finite");
    const double dt = cfg.dt(coeffs.T);
    if (std::abs(gamma_t.dt() - dt) > 1e-12 * dt) {
        throw InvalidArgument("solver: path step " + std::to_string(gamma_t.dt()) + " differs from the solver step T/n_steps = " +
                              std::to_string(dt));
    }
    if (gamma_t.last_node() > cfg.n_steps) throw InvalidArgument("solver: path ends after the horizon");

    EnsembleSolution sol;
    const std::size_t P = cfg.n_paths, n = coeffs.n, d = coeffs.d, N = cfg.n_steps, i0 = gamma_t.last_node();
    sol.P_ = P;
    sol.n_ = n;
    sol.d_ = d;
    sol.i0_ = i0;
    sol.N_ = N;
    sol.dt_ = dt;
    sol.antithetic_ = cfg.antithetic;
    sol.x0_.assign(x.data(), x.data() + n);
    const std::size_t local_nodes = N - i0 + 1;

    // Brownian paths: γ on [0, t], then γ(t) plus the increments.
    const IncrementSource src(cfg.seed, P, d, dt, cfg.antithetic, cfg.stream_offset);
    sol.W_.resize(P * (N + 1) * d);
    sol.dW_.resize((N - i0) * P * d);
    parallel_for(block_count(P), [&](std::size_t b) {
        const std::size_t end = std::min(P, (b + 1) * kBlockRows);
        for (std::size_t p = b * kBlockRows; p < end; ++p) {
            double* w = sol.W_.data() + p * (N + 1) * d;
            std::copy(gamma_t.values().begin(), gamma_t.values().end(), w);
            for (std::size_t i = i0; i < N; ++i) {
                double* inc = sol.dW_.data() + ((i - i0) * P + p) * d;
                src.fill(p, i - i0, {inc, d});
                for (std::size_t k = 0; k < d; ++k) w[(i + 1) * d + k] = w[i * d + k] + inc[k];
            }
        }
    });

    // Node-major copy for feature reads.
    sol.Wn_.resize(P * (N + 1) * d);
    parallel_for(block_count(P), [&](std::size_t b) {
        const std::size_t end = std::min(P, (b + 1) * kBlockRows);
        for (std::size_t i = 0; i <= N; ++i)
            for (std::size_t p = b * kBlockRows; p < end; ++p)
                for (std::size_t k = 0; k < d; ++k) sol.Wn_[(i * P + p) * d + k] = sol.W_[(p * (N + 1) + i) * d + k];
    });

    const auto& kinds = cfg.basis.features;
    const bool want_max = std::find(kinds.begin(), kinds.end(), FeatureKind::running_max) != kinds.end();

    // Frozen path: γ extended flat to T.
    const GridPath frozen = horizontal_extension_to_node(gamma_t, N);
    std::vector<double> prefix(d, 0.0);
    for (std::size_t i = 0; i < i0; ++i)
        for (std::size_t k = 0; k < d; ++k) prefix[k] += frozen.node(i)[k];
    sol.frozen_avg_.resize(local_nodes * d);
    {
        std::vector<double> s = prefix;
        for (std::size_t i = i0; i <= N; ++i) {
            for (std::size_t k = 0; k < d; ++k) {
                sol.frozen_avg_[(i - i0) * d + k] = i == 0 ? frozen.node(0)[k] : s[k] / static_cast<double>(i);
                s[k] += frozen.node(i)[k];
            }
        }
    }
    if (want_max) {
        sol.frozen_max_.assign(d, -std::numeric_limits<double>::infinity());
        for (std::size_t i = 0; i <= i0; ++i)
            for (std::size_t k = 0; k < d; ++k) sol.frozen_max_[k] = std::max(sol.frozen_max_[k], frozen.node(i)[k]);
    }

    // Running average (1/i) Σ_{j<i} W_j, and running max, per node.
    sol.avg_.resize(local_nodes * P * d);
    if (want_max) sol.max_.resize(local_nodes * P * d);
    parallel_for(block_count(P), [&](std::size_t b) {
        const std::size_t end = std::min(P, (b + 1) * kBlockRows);
        std::vector<double> s(d), m(d);
        for (std::size_t p = b * kBlockRows; p < end; ++p) {
            const double* w = sol.W_.data() + p * (N + 1) * d;
            s = prefix;
            if (want_max) m = sol.frozen_max_;
            for (std::size_t i = i0; i <= N; ++i) {
                for (std::size_t k = 0; k < d; ++k) {
                    const std::size_t at = ((i - i0) * P + p) * d + k;
                    sol.avg_[at] = i == 0 ? w[k] : s[k] / static_cast<double>(i);
                    s[k] += w[i * d + k];
                    if (want_max) {
                        m[k] = std::max(m[k], w[i * d + k]);
                        sol.max_[at] = m[k];
                    }
                }
            }
        }
    });

    // Raw feature slots in the order the basis lists them.
    for (FeatureKind kind : kinds) {
        switch (kind) {
        case FeatureKind::current_x:
            for (std::size_t k = 0; k < n; ++k) sol.slots_.push_back({kind, k, 0});
            break;
        case FeatureKind::checkpoints:
            for (std::size_t c = 1; c <= cfg.basis.n_checkpoints; ++c) {
                const auto node = static_cast<std::size_t>(
                    std::llround(static_cast<double>(c) * static_cast<double>(N) /
                                 static_cast<double>(cfg.basis.n_checkpoints + 1)));
                for (std::size_t k = 0; k < d; ++k) sol.slots_.push_back({kind, k, node});
            }
            break;
        default:
            for (std::size_t k = 0; k < d; ++k) sol.slots_.push_back({kind, k, 0});
        }
    }

    sol.fits_.resize(N - i0);
    for (std::size_t i = i0; i < N; ++i) {
        NodeFit& f = sol.fits_[i - i0];
        std::vector<double> centre;
        for (std::size_t s = 0; s < sol.slots_.size(); ++s) {
            if (!sol.slot_active(sol.slots_[s], i)) continue;
            // Checkpoints that coincide with an earlier checkpoint add nothing.
            bool duplicate = false;
            for (int a : f.active) {
                const auto& o = sol.slots_[static_cast<std::size_t>(a)];
                if (o.kind == FeatureKind::checkpoints && sol.slots_[s].kind == FeatureKind::checkpoints &&
                    o.node == sol.slots_[s].node && o.comp == sol.slots_[s].comp) {
                    duplicate = true;
                }
            }
            if (duplicate) continue;
            f.active.push_back(static_cast<int>(s));
            centre.push_back(sol.slot_centre(sol.slots_[s], i));
        }
        f.centre = Eigen::Map<Eigen::VectorXd>(centre.data(), static_cast<Eigen::Index>(centre.size()));
        f.basis = MonomialBasis(f.active.size(), f.active.empty() ? 0 : cfg.basis.poly_degree);
        if (f.basis.size() > P) {
            throw InvalidArgument("solver: " + std::to_string(P) + " paths for " + std::to_string(f.basis.size()) +
                                  " basis functions");
        }
        f.coef_y = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(f.basis.size()), static_cast<Eigen::Index>(n));
        f.coef_z = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(f.basis.size()), static_cast<Eigen::Index>(n * d));
    }

    sol.X_.assign(local_nodes * P * n, 0.0);
    sol.Y_.assign(local_nodes * P * n, 0.0);
    sol.Z_.assign((N - i0) * P * n * d, 0.0);
    for (std::size_t p = 0; p < P; ++p)
        for (std::size_t k = 0; k < n; ++k) sol.X_[p * n + k] = x[static_cast<Eigen::Index>(k)];
    return sol;
}

void simulate_forward(const CoefficientSet& coeffs, EnsembleSolution& sol, const Predictors& pred) {
    const std::size_t P = sol.P_, n = sol.n_, d = sol.d_, N = sol.N_, i0 = sol.i0_;
    const std::size_t nd = n * d;
    const double dt = sol.dt_;
    const bool zero = pred.y.empty();
    std::vector<std::size_t> bad(block_count(P), kNone);
    parallel_for(block_count(P), [&](std::size_t b) {
        const std::size_t p0 = b * kBlockRows, len = std::min(P, p0 + kBlockRows) - p0;
        const auto rows = static_cast<Eigen::Index>(len);
        Eigen::MatrixXd raw, design;
        Eigen::MatrixXd yb = Eigen::MatrixXd::Zero(rows, static_cast<Eigen::Index>(n));
        Eigen::MatrixXd zb = Eigen::MatrixXd::Zero(rows, static_cast<Eigen::Index>(nd));
        std::vector<double> y(n, 0.0), z(nd, 0.0), drift(n), diff(nd);
        for (std::size_t i = i0; i < N; ++i) {
            const std::size_t local = i - i0;
            if (!zero) {
                const NodeFit& f = sol.fits_[local];
                const auto F = static_cast<Eigen::Index>(f.active.size());
                raw.resize(rows, F);
                design.resize(rows, static_cast<Eigen::Index>(f.basis.size()));
                sol.centred_block(i, p0, len, raw);
                // Predictors are only trusted on the range they were fitted on.
                for (Eigen::Index k = 0; k < F; ++k) raw.col(k) = raw.col(k).cwiseMax(f.lo[k]).cwiseMin(f.hi[k]);
                f.basis.expand_columns(raw, design);
                yb.noalias() = design * pred.y[local];
                zb.noalias() = design * pred.z[local];
                for (Eigen::Index c = 0; c < yb.cols(); ++c)
                    yb.col(c) = yb.col(c).cwiseMax(pred.y_lo[local][c]).cwiseMin(pred.y_hi[local][c]);
                for (Eigen::Index c = 0; c < zb.cols(); ++c)
                    zb.col(c) = zb.col(c).cwiseMax(pred.z_lo[local][c]).cwiseMin(pred.z_hi[local][c]);
            }
            bool finite = true;
            for (std::size_t q = 0; q < len; ++q) {
                const std::size_t p = p0 + q;
                const auto row = static_cast<Eigen::Index>(q);
                for (std::size_t c = 0; c < n; ++c) y[c] = yb(row, static_cast<Eigen::Index>(c));
                for (std::size_t c = 0; c < nd; ++c) z[c] = zb(row, static_cast<Eigen::Index>(c));
                const double* xi = sol.X_.data() + (local * P + p) * n;
                const std::span<const double> xs(xi, n);
                const PathView w{sol.W_.data() + p * (N + 1) * d, i + 1, d, dt};
                coeffs.drift(w, xs, y, z, drift);
                coeffs.diffusion(w, xs, y, z, diff);
                const double* inc = sol.dW_.data() + (local * P + p) * d;
                double* xn = sol.X_.data() + ((local + 1) * P + p) * n;
                for (std::size_t k = 0; k < n; ++k) {
                    double v = xi[k] + drift[k] * dt;
                    for (std::size_t j = 0; j < d; ++j) v += diff[k * d + j] * inc[j];
                    xn[k] = v;
                    finite = finite && std::isfinite(v);
                }
            }
            if (!finite) {
                bad[b] = i + 1;
                break;
            }
        }
    });
    const std::size_t first = *std::min_element(bad.begin(), bad.end());
    if (first != kNone) throw Diverged("forward pass produced a non-finite state at node " + std::to_string(first), first);
}

Predictors backward_sweep(const CoefficientSet& coeffs, EnsembleSolution& sol, const SolverConfig& cfg) {
    const std::size_t P = sol.P_, n = sol.n_, d = sol.d_, N = sol.N_, i0 = sol.i0_;
    const std::size_t nd = n * d;
    const double dt = sol.dt_;
    const std::size_t nb = block_count(P);
    const auto Pi = static_cast<Eigen::Index>(P);
    const auto ni = static_cast<Eigen::Index>(n);
    const auto ndi = static_cast<Eigen::Index>(nd);

    // Terminal condition, imposed exactly.
    {
        std::vector<std::size_t> bad(nb, kNone);
        parallel_for(nb, [&](std::size_t b) {
            const std::size_t end = std::min(P, (b + 1) * kBlockRows);
            for (std::size_t p = b * kBlockRows; p < end; ++p) {
                const double* xn = sol.X_.data() + ((N - i0) * P + p) * n;
                double* yn = sol.Y_.data() + ((N - i0) * P + p) * n;
                coeffs.terminal(sol.w(p), {xn, n}, {yn, n});
                for (std::size_t k = 0; k < n; ++k)
                    if (!std::isfinite(yn[k])) bad[b] = N;
            }
        });
        if (*std::min_element(bad.begin(), bad.end()) != kNone) {
            throw Diverged("terminal condition is non-finite", N);
        }
    }

    Predictors out;
    out.y.resize(N - i0);
    out.z.resize(N - i0);
    out.y_lo.resize(N - i0);
    out.y_hi.resize(N - i0);
    out.z_lo.resize(N - i0);
    out.z_hi.resize(N - i0);
    RowMatrix h_sum = RowMatrix::Zero(Pi, ni);
    RowMatrix yhat(Pi, ni), ty(Pi, ni), tz(Pi, ndi), resid2(Pi, ni);
    Eigen::MatrixXd raw, design;
    auto vmin = [](const Eigen::VectorXd& a, const Eigen::VectorXd& b) { return Eigen::VectorXd(a.cwiseMin(b)); };
    auto vmax = [](const Eigen::VectorXd& a, const Eigen::VectorXd& b) { return Eigen::VectorXd(a.cwiseMax(b)); };
    // Column ranges of a row-major buffer, reduced block by block.
    auto ranges = [&](const double* data, Eigen::Index cols, Eigen::VectorXd& lo, Eigen::VectorXd& hi) {
        std::vector<Eigen::VectorXd> l(nb), h(nb);
        parallel_for(nb, [&](std::size_t b) {
            const std::size_t p0 = b * kBlockRows, len = std::min(P, p0 + kBlockRows) - p0;
            const Eigen::Map<const RowMatrix> m(data + p0 * static_cast<std::size_t>(cols), static_cast<Eigen::Index>(len), cols);
            l[b] = m.colwise().minCoeff().transpose();
            h[b] = m.colwise().maxCoeff().transpose();
        });
        lo = tree_reduce(std::move(l), vmin);
        hi = tree_reduce(std::move(h), vmax);
    };

    for (std::size_t i = N; i-- > i0;) {
        const std::size_t local = i - i0;
        NodeFit& f = sol.fits_[local];
        const std::size_t F = f.active.size();
        const auto K = static_cast<Eigen::Index>(f.basis.size());
        const Eigen::Map<const RowMatrix> ynext(sol.Y_.data() + (local + 1) * P * n, Pi, ni);
        raw.resize(Pi, static_cast<Eigen::Index>(F));
        design.resize(Pi, K);
        parallel_for(nb, [&](std::size_t b) {
            const std::size_t p0 = b * kBlockRows, len = std::min(P, p0 + kBlockRows) - p0;
            const auto r0 = static_cast<Eigen::Index>(p0), rows = static_cast<Eigen::Index>(len);
            sol.centred_block(i, p0, len, raw.middleRows(r0, rows));
            f.basis.expand_columns(raw.middleRows(r0, rows), design.middleRows(r0, rows));
        });
        if (F > 0) {
            std::vector<Eigen::VectorXd> l(nb), h(nb);
            parallel_for(nb, [&](std::size_t b) {
                const auto r0 = static_cast<Eigen::Index>(b * kBlockRows);
                const auto rows = static_cast<Eigen::Index>(std::min(P, (b + 1) * kBlockRows)) - r0;
                l[b] = raw.middleRows(r0, rows).colwise().minCoeff().transpose();
                h[b] = raw.middleRows(r0, rows).colwise().maxCoeff().transpose();
            });
            f.lo = tree_reduce(std::move(l), vmin);
            f.hi = tree_reduce(std::move(h), vmax);
        } else {
            f.lo.resize(0);
            f.hi.resize(0);
        }
        f.gram = blocked_gram(design);
        const NormalSolver solver(f.gram, cfg.ridge);
        const Eigen::MatrixXd c_hat = solver.solve(blocked_cross(design, ynext));

        // Z targets: (Y_{i+1} − Ŷ) ΔWᵀ / Δt.
        parallel_for(nb, [&](std::size_t b) {
            const auto r0 = static_cast<Eigen::Index>(b * kBlockRows);
            const auto len = static_cast<Eigen::Index>(std::min(P, (b + 1) * kBlockRows)) - r0;
            yhat.middleRows(r0, len).noalias() = design.middleRows(r0, len) * c_hat;
            for (Eigen::Index row = r0; row < r0 + len; ++row) {
                const double* inc = sol.dW_.data() + (local * P + static_cast<std::size_t>(row)) * d;
                for (Eigen::Index k = 0; k < ni; ++k) {
                    const double r = ynext(row, k) - yhat(row, k);
                    for (std::size_t j = 0; j < d; ++j) tz(row, k * static_cast<Eigen::Index>(d) + static_cast<Eigen::Index>(j)) = r * inc[j] / dt;
                }
            }
        });
        f.coef_z = solver.solve(blocked_cross(design, tz));

        // Z fit, driver at (Ŷ, Z), Y targets Y_{i+1} − h Δt.
        Eigen::Map<RowMatrix> zfit(sol.Z_.data() + local * P * nd, Pi, ndi);
        parallel_for(nb, [&](std::size_t b) {
            const auto r0 = static_cast<Eigen::Index>(b * kBlockRows);
            const auto len = static_cast<Eigen::Index>(std::min(P, (b + 1) * kBlockRows)) - r0;
            zfit.middleRows(r0, len).noalias() = design.middleRows(r0, len) * f.coef_z;
            std::vector<double> hv(n);
            for (Eigen::Index row = r0; row < r0 + len; ++row) {
                const auto p = static_cast<std::size_t>(row);
                const PathView w{sol.W_.data() + p * (N + 1) * d, i + 1, d, dt};
                coeffs.driver(w, sol.x(p, i), {yhat.row(row).data(), n}, {zfit.row(row).data(), nd}, hv);
                for (Eigen::Index k = 0; k < ni; ++k) {
                    const double hk = hv[static_cast<std::size_t>(k)] * dt;
                    ty(row, k) = ynext(row, k) - hk;
                    h_sum(row, k) += hk;
                }
            }
        });
        f.coef_y = solver.solve(blocked_cross(design, ty));

        std::vector<std::size_t> bad(nb, kNone);
        Eigen::Map<RowMatrix> yfit(sol.Y_.data() + local * P * n, Pi, ni);
        parallel_for(nb, [&](std::size_t b) {
            const auto r0 = static_cast<Eigen::Index>(b * kBlockRows);
            const auto len = static_cast<Eigen::Index>(std::min(P, (b + 1) * kBlockRows)) - r0;
            yfit.middleRows(r0, len).noalias() = design.middleRows(r0, len) * f.coef_y;
            resid2.middleRows(r0, len) = (ty.middleRows(r0, len) - yfit.middleRows(r0, len)).array().square();
            if (!yfit.middleRows(r0, len).allFinite()) bad[b] = i;
        });
        if (*std::min_element(bad.begin(), bad.end()) != kNone) {
            throw Diverged("backward pass produced a non-finite Y at node " + std::to_string(i), i);
        }
        f.resid_var_y = blocked_mean(resid2);
        out.y[local] = f.coef_y;
        out.z[local] = f.coef_z;
        ranges(yfit.data(), ni, out.y_lo[local], out.y_hi[local]);
        ranges(zfit.data(), ndi, out.z_lo[local], out.z_hi[local]);

        if (i == i0) sol.zeta = tz;
    }

    // Start-node statistics.
    if (N == i0) {
        sol.u_value = Eigen::Map<const Eigen::VectorXd>(sol.y(0, N).data(), ni);
        sol.u_se = Eigen::VectorXd::Zero(ni);
        sol.z0 = Eigen::MatrixXd::Zero(ni, static_cast<Eigen::Index>(d));
        sol.z0_se = sol.z0;
        sol.xi = RowMatrix();
        sol.zeta = RowMatrix();
        return out;
    }
    sol.xi = Eigen::Map<const RowMatrix>(sol.Y_.data() + (N - i0) * P * n, Pi, ni) - h_sum;
    sol.u_value = Eigen::Map<const Eigen::VectorXd>(sol.y(0, i0).data(), ni);
    sol.u_se = column_se(sol.xi, sol.antithetic_);
    const Eigen::VectorXd zmean = Eigen::Map<const Eigen::VectorXd>(sol.z(0, i0).data(), ndi);
    const Eigen::VectorXd zse = column_se(sol.zeta, sol.antithetic_);
    sol.z0.resize(ni, static_cast<Eigen::Index>(d));
    sol.z0_se.resize(ni, static_cast<Eigen::Index>(d));
    for (std::size_t k = 0; k < n; ++k)
        for (std::size_t j = 0; j < d; ++j) {
            sol.z0(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(j)) = zmean[static_cast<Eigen::Index>(k * d + j)];
            sol.z0_se(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(j)) = zse[static_cast<Eigen::Index>(k * d + j)];
        }
    return out;
}

namespace {

double predictor_distance(const EnsembleSolution& sol, const Predictors& a, const Predictors& b) {
    const std::size_t nodes = a.y.size();
    if (nodes == 0) return 0.0;
    double total = 0.0;
    for (std::size_t l = 0; l < nodes; ++l) {
        const Eigen::MatrixXd& g = sol.fit(sol.start_node() + l).gram;
        const Eigen::MatrixXd dy = a.y[l] - b.y[l];
        const Eigen::MatrixXd dz = a.z[l] - b.z[l];
        total += (dy.transpose() * g * dy).trace() + (dz.transpose() * g * dz).trace();
    }
    return std::sqrt(std::max(0.0, total / static_cast<double>(nodes)));
}

// θ·fresh + (1 − θ)·old; an empty `old` stands for the zero predictors. The
// truncation range is the hull of both ranges.
Predictors mix(const Predictors& fresh, const Predictors& old, double theta) {
    Predictors out = fresh;
    for (std::size_t l = 0; l < out.y.size(); ++l) {
        if (old.y.empty()) {
            out.y[l] = theta * fresh.y[l];
            out.z[l] = theta * fresh.z[l];
            out.y_lo[l] = fresh.y_lo[l].cwiseMin(0.0);
            out.y_hi[l] = fresh.y_hi[l].cwiseMax(0.0);
            out.z_lo[l] = fresh.z_lo[l].cwiseMin(0.0);
            out.z_hi[l] = fresh.z_hi[l].cwiseMax(0.0);
            continue;
        }
        out.y[l] = theta * fresh.y[l] + (1.0 - theta) * old.y[l];
        out.z[l] = theta * fresh.z[l] + (1.0 - theta) * old.z[l];
        out.y_lo[l] = fresh.y_lo[l].cwiseMin(old.y_lo[l]);
        out.y_hi[l] = fresh.y_hi[l].cwiseMax(old.y_hi[l]);
        out.z_lo[l] = fresh.z_lo[l].cwiseMin(old.z_lo[l]);
        out.z_hi[l] = fresh.z_hi[l].cwiseMax(old.z_hi[l]);
    }
    return out;
}

} // namespace

EnsembleSolution picard_solve(const CoefficientSet& coeffs, const GridPath& gamma_t, const Eigen::VectorXd& x,
                              const SolverConfig& cfg) {
    EnsembleSolution sol = prepare_ensemble(coeffs, gamma_t, x, cfg);
    if (sol.start_node() == sol.n_steps()) {
        backward_sweep(coeffs, sol, cfg);
        sol.converged = true;
        return sol;
    }
    Predictors current;
    Predictors previous;
    for (std::size_t k = 1; k <= cfg.picard_max; ++k) {
        if (k == 1 || !coeffs.decoupled) simulate_forward(coeffs, sol, current);
        Predictors fresh = backward_sweep(coeffs, sol, cfg);
        sol.picard_iters = k;
        double dist = 0.0;
        if (k == 1) {
            Predictors zero = fresh;
            for (auto& m : zero.y) m.setZero();
            for (auto& m : zero.z) m.setZero();
            dist = predictor_distance(sol, fresh, zero);
        } else {
            dist = predictor_distance(sol, fresh, previous);
        }
        sol.picard_history.push_back(dist);
        if (!std::isfinite(dist)) throw Diverged("Picard iterates are non-finite", sol.start_node());
        if (k >= 2 && dist < cfg.picard_tol) {
            sol.converged = true;
            return sol;
        }
        current = mix(fresh, current, cfg.damping);
        previous = std::move(fresh);
    }
    if (cfg.throw_on_no_convergence) {
        throw NoConvergence("Picard iteration did not reach tolerance " + std::to_string(cfg.picard_tol) + " in " +
                                std::to_string(cfg.picard_max) + " iterations",
                            sol.picard_history);
    }
    return sol;
}

} // namespace pathfbsde
