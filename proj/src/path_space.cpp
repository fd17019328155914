#include "pathfbsde/path_space.hpp"

#include "pathfbsde/errors.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <istream>
#include <ostream>
#include <sstream>

namespace pathfbsde {

namespace {

double euclidean(std::span<const double> v) {
    double s = 0.0;
    for (double e : v) s += e * e;
    return std::sqrt(s);
}

double euclidean_diff(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) {
        const double diff = a[k] - b[k];
        s += diff * diff;
    }
    return std::sqrt(s);
}

void require_dim(const GridPath& path, std::size_t n, const char* what) {
    if (n != path.dim()) {
        throw InvalidArgument(std::string(what) + ": expected dimension " + std::to_string(path.dim()) +
                              ", got " + std::to_string(n));
    }
}

} // namespace

std::size_t time_to_node(double t, double dt) {
    if (!(dt > 0.0) || !std::isfinite(t) || t < -1e-12) {
        throw InvalidArgument("time_to_node: invalid time " + std::to_string(t));
    }
    const double ratio = t / dt;
    const double rounded = std::round(ratio);
    if (std::abs(ratio - rounded) > 1e-9 * std::max(1.0, std::abs(ratio))) {
        throw InvalidArgument("time " + std::to_string(t) + " is not on the grid of step " + std::to_string(dt));
    }
    return static_cast<std::size_t>(rounded);
}

GridPath::GridPath(std::size_t d, double dt, std::vector<double> values)
    : d_(d), dt_(dt), values_(std::move(values)) {
    if (d_ == 0) throw InvalidArgument("GridPath: dimension must be positive");
    if (!(dt_ > 0.0) || !std::isfinite(dt_)) throw InvalidArgument("GridPath: dt must be positive");
    if (values_.empty() || values_.size() % d_ != 0) {
        throw InvalidArgument("GridPath: value count is not a positive multiple of d");
    }
    for (double v : values_) {
        if (!std::isfinite(v)) throw InvalidArgument("GridPath: non-finite value");
    }
}

GridPath GridPath::constant(std::span<const double> level, double dt, double t) {
    const std::size_t n = time_to_node(t, dt) + 1;
    std::vector<double> values;
    values.reserve(n * level.size());
    for (std::size_t i = 0; i < n; ++i) values.insert(values.end(), level.begin(), level.end());
    return GridPath(level.size(), dt, std::move(values));
}

GridPath GridPath::constant(double level, double dt, double t) {
    return constant(std::span<const double>(&level, 1), dt, t);
}

std::span<const double> GridPath::at_time(double s) const {
    if (s < 0.0 || s > time() + 1e-12 * std::max(1.0, time())) {
        throw InvalidArgument("GridPath::at_time: time outside [0, t]");
    }
    const auto k = static_cast<std::size_t>(std::floor(s / dt_ + 1e-9));
    return node(std::min(k, last_node()));
}

GridPath GridPath::prefix(std::size_t n) const {
    if (n > last_node()) throw InvalidArgument("GridPath::prefix: node beyond end of path");
    return GridPath(d_, dt_, std::vector<double>(values_.begin(), values_.begin() + (n + 1) * d_));
}

PathPair::PathPair(GridPath first, GridPath second) : a(std::move(first)), b(std::move(second)) {
    if (a.dim() != b.dim()) throw InvalidArgument("PathPair: dimension mismatch");
    if (a.dt() != b.dt()) throw InvalidArgument("PathPair: grid step mismatch");
}

GridPath vertical_bump(const GridPath& path, std::span<const double> x) {
    require_dim(path, x.size(), "vertical_bump");
    std::vector<double> values = path.values();
    const std::size_t off = path.last_node() * path.dim();
    for (std::size_t k = 0; k < x.size(); ++k) {
        if (!std::isfinite(x[k])) throw InvalidArgument("vertical_bump: non-finite bump");
        values[off + k] += x[k];
    }
    return GridPath(path.dim(), path.dt(), std::move(values));
}

GridPath horizontal_extension_to_node(const GridPath& path, std::size_t node) {
    if (node < path.last_node()) {
        throw InvalidArgument("horizontal_extension: target time precedes the end of the path");
    }
    std::vector<double> values = path.values();
    values.reserve((node + 1) * path.dim());
    const auto last = path.last();
    for (std::size_t i = path.last_node(); i < node; ++i) values.insert(values.end(), last.begin(), last.end());
    return GridPath(path.dim(), path.dt(), std::move(values));
}

GridPath horizontal_extension(const GridPath& path, double s) {
    return horizontal_extension_to_node(path, time_to_node(s, path.dt()));
}

double sup_norm(const GridPath& path) {
    double best = 0.0;
    for (std::size_t i = 0; i < path.nodes(); ++i) best = std::max(best, euclidean(path.node(i)));
    return best;
}

double sup_distance(const PathPair& pair) {
    const std::size_t na = pair.a.last_node();
    const std::size_t nb = pair.b.last_node();
    double best = 0.0;
    for (std::size_t i = 0; i <= std::max(na, nb); ++i) {
        best = std::max(best, euclidean_diff(pair.a.node(std::min(i, na)), pair.b.node(std::min(i, nb))));
    }
    return best;
}

double d_infinity(const PathPair& pair) {
    const double dn = std::abs(static_cast<double>(pair.a.last_node()) - static_cast<double>(pair.b.last_node()));
    return sup_distance(pair) + dn * pair.a.dt();
}

GridPath concat_brownian(const GridPath& path, std::span<const double> increments, double horizon) {
    const std::size_t end = time_to_node(horizon, path.dt());
    if (end < path.last_node()) throw InvalidArgument("concat_brownian: horizon precedes the end of the path");
    const std::size_t d = path.dim();
    const std::size_t steps = end - path.last_node();
    if (increments.size() != steps * d) {
        throw InvalidArgument("concat_brownian: expected " + std::to_string(steps * d) + " increment values, got " +
                              std::to_string(increments.size()));
    }
    std::vector<double> values = path.values();
    values.reserve((end + 1) * d);
    std::vector<double> current(path.last().begin(), path.last().end());
    for (std::size_t s = 0; s < steps; ++s) {
        for (std::size_t k = 0; k < d; ++k) current[k] += increments[s * d + k];
        values.insert(values.end(), current.begin(), current.end());
    }
    return GridPath(d, path.dt(), std::move(values));
}

void write_path(std::ostream& out, const GridPath& path) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", path.dt());
    out << path.dim() << ' ' << buf << ' ' << path.nodes() << '\n';
    for (std::size_t i = 0; i < path.nodes(); ++i) {
        const auto v = path.node(i);
        for (std::size_t k = 0; k < v.size(); ++k) {
            std::snprintf(buf, sizeof buf, "%.17g", v[k]);
            out << (k ? " " : "") << buf;
        }
        out << '\n';
    }
}

GridPath read_path(std::istream& in) {
    std::size_t d = 0, n = 0;
    std::string dt_token;
    if (!(in >> d >> dt_token >> n)) throw InvalidArgument("read_path: malformed header");
    const double dt = std::strtod(dt_token.c_str(), nullptr);
    std::vector<double> values(d * n);
    std::string token;
    for (auto& v : values) {
        if (!(in >> token)) throw InvalidArgument("read_path: truncated body");
        char* end = nullptr;
        v = std::strtod(token.c_str(), &end);
        if (end == token.c_str()) throw InvalidArgument("read_path: malformed value '" + token + "'");
    }
    return GridPath(d, dt, std::move(values));
}

std::string to_text(const GridPath& path) {
    std::ostringstream os;
    write_path(os, path);
    return os.str();
}

GridPath from_text(const std::string& text) {
    std::istringstream is(text);
    return read_path(is);
}

} // namespace pathfbsde
