#pragma once

#include <cstddef>
#include <functional>
#include <vector>

namespace pathfbsde {

/// Worker count: PATHFBSDE_THREADS if set and positive, else the hardware
/// concurrency.
std::size_t worker_count();

/// Runs fn(b) for b in [0, n_blocks). Blocks are claimed dynamically; results
/// must be written to per-block slots so the outcome is schedule-free.
void parallel_for(std::size_t n_blocks, const std::function<void(std::size_t)>& fn);

/// Rows per block for path-parallel loops. Fixed, so block boundaries and
/// every reduction built on them do not depend on the worker count.
inline constexpr std::size_t kBlockRows = 2048;

inline std::size_t block_count(std::size_t rows) { return (rows + kBlockRows - 1) / kBlockRows; }

/// Fixed-shape pairwise tree reduction: ((p0+p1)+(p2+p3))+...
template <class T, class Add>
T tree_reduce(std::vector<T> parts, Add add) {
    if (parts.empty()) return T{};
    std::size_t n = parts.size();
    while (n > 1) {
        const std::size_t half = (n + 1) / 2;
        for (std::size_t i = 0; i < n / 2; ++i) parts[i] = add(parts[2 * i], parts[2 * i + 1]);
        if (n % 2 == 1) parts[n / 2] = parts[n - 1];
        n = half;
    }
    return parts[0];
}

} // namespace pathfbsde
