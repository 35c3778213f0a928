#pragma once

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

namespace erelab {

/// Worker cap from ERE_LAB_THREADS (0 or unset = hardware concurrency).
inline int worker_count() {
    int cap = 0;
    if (const char* env = std::getenv("ERE_LAB_THREADS")) {
        cap = std::atoi(env);
        if (cap < 0) cap = 0;
    }
    if (cap == 0) {
        unsigned hw = std::thread::hardware_concurrency();
        cap = hw == 0 ? 1 : static_cast<int>(hw);
    }
    return cap;
}

/// Run f(i) for i in [begin, end). Work items must write to disjoint slots;
/// results are then bitwise independent of the worker count and schedule.
template <class F>
void parallel_for(int begin, int end, F&& f) {
    const int count = end - begin;
    if (count <= 0) return;
    const int workers = std::min(worker_count(), count);
    if (workers <= 1 || count < 4) {
        for (int i = begin; i < end; ++i) f(i);
        return;
    }
    std::atomic<int> next{begin};
    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(workers));
    std::exception_ptr first_error;
    std::atomic<bool> failed{false};
    std::mutex err_mutex;
    for (int w = 0; w < workers; ++w) {
        pool.emplace_back([&]() {
            for (;;) {
                const int i = next.fetch_add(1);
                if (i >= end || failed.load(std::memory_order_relaxed)) break;
                try {
                    f(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(err_mutex);
                    if (!first_error) first_error = std::current_exception();
                    failed.store(true, std::memory_order_relaxed);
                    break;
                }
            }
        });
    }
    for (auto& th : pool) th.join();
    if (first_error) std::rethrow_exception(first_error);
}

} // namespace erelab
