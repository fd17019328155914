#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>

namespace pathfbsde {

/// Philox4x32-10 counter-based bijection.
std::array<std::uint32_t, 4> philox4x32(std::array<std::uint32_t, 4> counter, std::array<std::uint32_t, 2> key);

/// Gaussian increment stream addressed by (seed, path, node, component).
///
/// Every increment is a pure function of its address, so any subset can be
/// regenerated in any order on any thread. Node indices are shifted by
/// `node_offset`, which lets a solve started later on the grid read the same
/// numbers as the tail of an earlier one.
class IncrementSource {
public:
    IncrementSource(std::uint64_t seed, std::size_t n_paths, std::size_t dim, double dt, bool antithetic = false,
                    std::uint64_t node_offset = 0);

    std::uint64_t seed() const noexcept { return seed_; }
    std::size_t n_paths() const noexcept { return n_paths_; }
    std::size_t dim() const noexcept { return dim_; }
    double dt() const noexcept { return dt_; }
    bool antithetic() const noexcept { return antithetic_; }
    std::uint64_t node_offset() const noexcept { return node_offset_; }

    /// Writes the d components of ΔW for `path` over step `node` (relative to
    /// the start of the solve), scaled by √dt.
    void fill(std::size_t path, std::size_t node, std::span<double> out) const;

    /// Standard normal at an absolute address, without antithetic mapping.
    double standard_normal(std::uint64_t path, std::uint64_t node, std::uint32_t component) const;

private:
    std::uint64_t seed_;
    std::size_t n_paths_;
    std::size_t dim_;
    double dt_;
    double sqrt_dt_;
    bool antithetic_;
    std::uint64_t node_offset_;
};

} // namespace pathfbsde
