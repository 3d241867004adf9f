#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <thread>
#include <vector>

namespace rattn {

// Worker cap: RATTN_THREADS env var, else hardware concurrency.
inline int thread_count() {
    static int n = [] {
        int hw = static_cast<int>(std::thread::hardware_concurrency());
        if (hw <= 0) hw = 1;
        if (const char* env = std::getenv("RATTN_THREADS")) {
            int cap = std::atoi(env);
            if (cap >= 1) hw = std::min(hw, cap);
        }
        return hw;
    }();
    return n;
}

// Runs fn(i) for i in [0, n). Each index is executed by exactly one worker with
// a sequential inner order, so results are bitwise independent of the worker count.
inline void parallel_for(int64_t n, const std::function<void(int64_t)>& fn) {
    int workers = thread_count();
    if (workers <= 1 || n <= 1) {
        for (int64_t i = 0; i < n; ++i) fn(i);
        return;
    }
    workers = static_cast<int>(std::min<int64_t>(workers, n));
    std::vector<std::thread> pool;
    pool.reserve(workers - 1);
    auto run_slice = [&](int w) {
        for (int64_t i = w; i < n; i += workers) fn(i);
    };
    for (int w = 1; w < workers; ++w) pool.emplace_back(run_slice, w);
    run_slice(0);
    for (auto& t : pool) t.join();
}

}  // namespace rattn
