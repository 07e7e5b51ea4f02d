#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <thread>
#include <utility>
#include <vector>

namespace diagnet {

// Worker cap: DIAGNET_THREADS when set to a positive integer, otherwise the
// machine's core count. Values below 1 (and unparseable text) fall back to 1.
inline std::size_t max_threads() {
    if (const char* env = std::getenv("DIAGNET_THREADS")) {
        const long v = std::atol(env);
        return v >= 1 ? static_cast<std::size_t>(v) : 1;
    }
    const unsigned hw = std::thread::hardware_concurrency();
    return hw ? hw : 1;
}

// Runs fn(i) for every i in [0, count), split into contiguous chunks over at
// most max_threads() workers. Each index runs exactly once, so writing result
// i into slot i of a pre-sized buffer gives the same bytes at any thread
// count. The first exception raised by any worker is rethrown to the caller
// after all workers have joined.
template <typename Fn>
void parallel_for(std::size_t count, Fn&& fn) {
    const std::size_t workers = std::min(max_threads(), count);
    if (workers <= 1) {
        for (std::size_t i = 0; i < count; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(workers);
    std::exception_ptr first_error;
    std::mutex error_mutex;
    const std::size_t chunk = (count + workers - 1) / workers;
    for (std::size_t w = 0; w < workers; ++w) {
        const std::size_t lo = w * chunk;
        const std::size_t hi = std::min(count, lo + chunk);
        if (lo >= hi) break;
        pool.emplace_back([&, lo, hi] {
            try {
                for (std::size_t i = lo; i < hi; ++i) fn(i);
            } catch (...) {
                const std::lock_guard<std::mutex> lock(error_mutex);
                if (!first_error) first_error = std::current_exception();
            }
        });
    }
    for (std::thread& t : pool) t.join();
    if (first_error) std::rethrow_exception(first_error);
}

} // namespace diagnet
