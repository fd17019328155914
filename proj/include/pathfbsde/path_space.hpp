#pragma once

#include <cstddef>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

namespace pathfbsde {

/// Converts a real time to a grid node index. Throws InvalidArgument when
/// `t` is negative or not an integer multiple of `dt` within 1e-9 relative.
std::size_t time_to_node(double t, double dt);

/// Non-owning view of the first `nodes` grid values of a path, laid out
/// node-major with `dim` components per node.
///
/// This is what coefficient functions receive: the Brownian path W^{γ_t}
/// stopped at the current node, with no copy.
struct PathView {
    const double* data = nullptr;
    std::size_t nodes = 0;
    std::size_t dim = 0;
    double dt = 0.0;

    std::span<const double> node(std::size_t i) const { return {data + i * dim, dim}; }
    std::span<const double> last() const { return node(nodes - 1); }
    std::span<const double> values() const { return {data, nodes * dim}; }
    std::size_t last_node() const { return nodes - 1; }
    double time() const { return static_cast<double>(nodes - 1) * dt; }
};

/// A càdlàg step path on the uniform grid 0, dt, ..., t.
///
/// The value on [k dt, (k+1) dt) is node k, and the value at t is the last
/// node. End times are stored as a node count, never as a float.
class GridPath {
public:
    GridPath() = default;

    /// `values` holds nodes*d entries, node-major. Throws InvalidArgument on
    /// a ragged buffer, non-positive dt, or non-finite entries.
    GridPath(std::size_t d, double dt, std::vector<double> values);

    /// Constant path `level` (length d) on [0, t].
    static GridPath constant(std::span<const double> level, double dt, double t);
    static GridPath constant(double level, double dt, double t);

    std::size_t dim() const noexcept { return d_; }
    double dt() const noexcept { return dt_; }
    std::size_t nodes() const noexcept { return d_ == 0 ? 0 : values_.size() / d_; }
    std::size_t last_node() const noexcept { return nodes() - 1; }
    double time() const noexcept { return static_cast<double>(last_node()) * dt_; }

    std::span<const double> node(std::size_t i) const { return {values_.data() + i * d_, d_}; }
    std::span<const double> last() const { return node(last_node()); }
    const std::vector<double>& values() const noexcept { return values_; }

    /// Value of the step function at real time s ∈ [0, t].
    std::span<const double> at_time(double s) const;

    PathView view() const { return {values_.data(), nodes(), d_, dt_}; }

    /// The prefix γ_s for a grid node s ≤ last_node().
    GridPath prefix(std::size_t node) const;

    friend bool operator==(const GridPath& a, const GridPath& b) {
        return a.d_ == b.d_ && a.dt_ == b.dt_ && a.values_ == b.values_;
    }

private:
    std::size_t d_ = 0;
    double dt_ = 0.0;
    std::vector<double> values_;
};

/// Two paths on the same grid and in the same dimension, possibly ending at
/// different times.
struct PathPair {
    PathPair(GridPath first, GridPath second);

    GridPath a;
    GridPath b;
};

/// γ_t^x: the final value incremented by x, everything else untouched.
GridPath vertical_bump(const GridPath& path, std::span<const double> x);

/// γ_{t,s}: the path frozen at its final value up to time s ≥ t.
GridPath horizontal_extension(const GridPath& path, double s);
GridPath horizontal_extension_to_node(const GridPath& path, std::size_t node);

/// sup over [0,t] of the Euclidean norm.
double sup_norm(const GridPath& path);

/// sup_s |γ(s∧t) − γ̄(s∧t̄)|, the path part of d_∞.
double sup_distance(const PathPair& pair);

/// Dupire's metric: sup_distance + |t − t̄|.
double d_infinity(const PathPair& pair);

/// W^{γ_t} on [0,T]: the input on [0,t), then γ(t) plus the running sum of
/// the increments. `increments` holds one d-vector per step from t to T.
GridPath concat_brownian(const GridPath& path, std::span<const double> increments, double horizon);

/// Plain-text form: header `d dt n_nodes`, then one row of d values per node,
/// all at 17 significant digits.
void write_path(std::ostream& out, const GridPath& path);
GridPath read_path(std::istream& in);
std::string to_text(const GridPath& path);
GridPath from_text(const std::string& text);

} // namespace pathfbsde
