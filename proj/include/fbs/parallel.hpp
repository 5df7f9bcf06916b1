#pragma once

#include <cstdint>
#include <functional>
#include <thread>
#include <vector>

namespace fbs {

// Worker count for per-sample parallel sections. Distinct samples write
// disjoint planes, so results are bitwise identical for any setting.
inline int thread_count = 1;

template <typename Fn>
inline void parallel_for_samples(int64_t n_samples, Fn&& fn) {
    const int workers = std::min<int64_t>(thread_count, n_samples);
    if (workers <= 1) {
        for (int64_t n = 0; n < n_samples; ++n) fn(n);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(workers));
    for (int w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            for (int64_t n = w; n < n_samples; n += workers) fn(n);
        });
    }
    for (auto& t : pool) t.join();
}

}  // namespace fbs
