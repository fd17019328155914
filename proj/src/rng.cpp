#include "pathfbsde/rng.hpp"

#include "pathfbsde/errors.hpp"

#include <cmath>
#include <numbers>

namespace pathfbsde {

namespace {

constexpr std::uint32_t kMul0 = 0xD2511F53u;
constexpr std::uint32_t kMul1 = 0xCD9E8D57u;
constexpr std::uint32_t kWeyl0 = 0x9E3779B9u;
constexpr std::uint32_t kWeyl1 = 0xBB67AE85u;

inline void mulhilo(std::uint32_t a, std::uint32_t b, std::uint32_t& hi, std::uint32_t& lo) {
    const std::uint64_t p = static_cast<std::uint64_t>(a) * b;
    hi = static_cast<std::uint32_t>(p >> 32);
    lo = static_cast<std::uint32_t>(p);
}

// (0, 1], 53 bits.
inline double open_unit(std::uint32_t hi, std::uint32_t lo) {
    const std::uint64_t bits = ((static_cast<std::uint64_t>(hi) << 32) | lo) >> 11;
    return (static_cast<double>(bits) + 1.0) * 0x1.0p-53;
}

} // namespace

std::array<std::uint32_t, 4> philox4x32(std::array<std::uint32_t, 4> ctr, std::array<std::uint32_t, 2> key) {
    for (int round = 0; round < 10; ++round) {
        std::uint32_t hi0, lo0, hi1, lo1;
        mulhilo(kMul0, ctr[0], hi0, lo0);
        mulhilo(kMul1, ctr[2], hi1, lo1);
        ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
        key[0] += kWeyl0;
        key[1] += kWeyl1;
    }
    return ctr;
}

IncrementSource::IncrementSource(std::uint64_t seed, std::size_t n_paths, std::size_t dim, double dt, bool antithetic,
                                 std::uint64_t node_offset)
    : seed_(seed), n_paths_(n_paths), dim_(dim), dt_(dt), sqrt_dt_(std::sqrt(dt)), antithetic_(antithetic),
      node_offset_(node_offset) {
    if (dim_ == 0) throw InvalidArgument("IncrementSource: dimension must be positive");
    if (!(dt_ > 0.0)) throw InvalidArgument("IncrementSource: dt must be positive");
    if (antithetic_ && n_paths_ % 2 != 0) throw InvalidArgument("IncrementSource: antithetic mode needs an even path count");
}

double IncrementSource::standard_normal(std::uint64_t path, std::uint64_t node, std::uint32_t component) const {
    const std::array<std::uint32_t, 4> ctr = {static_cast<std::uint32_t>(path), static_cast<std::uint32_t>(path >> 32),
                                              static_cast<std::uint32_t>(node), component / 2};
    const std::array<std::uint32_t, 2> key = {static_cast<std::uint32_t>(seed_), static_cast<std::uint32_t>(seed_ >> 32)};
    const auto r = philox4x32(ctr, key);
    const double radius = std::sqrt(-2.0 * std::log(open_unit(r[0], r[1])));
    const double angle = 2.0 * std::numbers::pi * open_unit(r[2], r[3]);
    return component % 2 == 0 ? radius * std::cos(angle) : radius * std::sin(angle);
}

void IncrementSource::fill(std::size_t path, std::size_t node, std::span<double> out) const {
    if (out.size() != dim_) throw InvalidArgument("IncrementSource::fill: output has the wrong dimension");
    double sign = 1.0;
    std::size_t source = path;
    if (antithetic_ && path >= n_paths_ / 2) {
        source = path - n_paths_ / 2;
        sign = -1.0;
    }
    const std::uint64_t abs_node = node_offset_ + node;
    for (std::size_t k = 0; k < dim_; ++k) {
        out[k] = sign * sqrt_dt_ * standard_normal(source, abs_node, static_cast<std::uint32_t>(k));
    }
}

} // namespace pathfbsde
