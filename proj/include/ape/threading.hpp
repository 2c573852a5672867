#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <thread>
#include <vector>

namespace ape {

/// Static-partition parallel loop over [0, n). Results must not depend on the
/// partition: workers own disjoint indices and any cross-index reduction is the
/// caller's job, done in index order.
inline void parallel_for(std::int64_t n, int workers, const std::function<void(std::int64_t)>& body) {
    if (n <= 0) return;
    workers = std::max(1, int(std::min<std::int64_t>(workers, n)));
    if (workers == 1) {
        for (std::int64_t i = 0; i < n; ++i) body(i);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(workers);
    const std::int64_t chunk = (n + workers - 1) / workers;
    for (int t = 0; t < workers; ++t) {
        const std::int64_t lo = t * chunk;
        const std::int64_t hi = std::min(n, lo + chunk);
        if (lo >= hi) break;
        pool.emplace_back([&body, lo, hi] {
            for (std::int64_t i = lo; i < hi; ++i) body(i);
        });
    }
    for (auto& th : pool) th.join();
}

inline int default_workers() {
    const unsigned hc = std::thread::hardware_concurrency();
    return hc == 0 ? 1 : int(std::min(hc, 4u));
}

} // namespace ape
