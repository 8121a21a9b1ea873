#pragma once

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <functional>
#include <thread>
#include <vector>

namespace kr {

/// Worker cap shared by all parallel loops. 0 means "hardware default".
/// Mirrors the CLI --threads flag and the KR_THREADS environment variable.
inline int& thread_cap() {
    static int cap = [] {
        if (const char* e = std::getenv("KR_THREADS")) {
            int v = std::atoi(e);
            if (v > 0) return v;
        }
        return 0;
    }();
    return cap;
}

inline void set_threads(int n) { thread_cap() = n; }

inline int effective_threads(std::size_t work_items) {
    unsigned hw = std::thread::hardware_concurrency();
    if (hw == 0) hw = 1;
    int cap = thread_cap() > 0 ? thread_cap() : static_cast<int>(hw);
    return static_cast<int>(std::min<std::size_t>(cap, std::max<std::size_t>(work_items, 1)));
}

/// Runs fn(i) for i in [0, n). Each index writes only its own slot in any
/// shared output, so the result does not depend on the worker count;
/// reductions are done by the caller afterwards in index order.
inline void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn) {
    int nt = effective_threads(n);
    if (nt <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(nt));
    for (int t = 0; t < nt; ++t) {
        pool.emplace_back([&] {
            for (;;) {
                std::size_t i = next.fetch_add(1);
                if (i >= n) break;
                fn(i);
            }
        });
    }
    for (auto& th : pool) th.join();
}

} // namespace kr
