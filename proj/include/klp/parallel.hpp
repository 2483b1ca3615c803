#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace klp {

/// Runs fn(i) for i in [0, n) on up to `workers` threads. Work items must only
/// write to their own output slot; the call returns after every item finished.
/// If items throw, the exception from the lowest index is rethrown so the
/// reported failure does not depend on scheduling.
template <typename Fn>
void parallel_for(std::size_t n, unsigned workers, Fn&& fn) {
    if (workers <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::mutex error_mutex;
    std::size_t error_index = n;
    std::exception_ptr error;

    auto body = [&] {
        for (std::size_t i = next++; i < n; i = next++) {
            try {
                fn(i);
            } catch (...) {
                std::lock_guard lock(error_mutex);
                if (i < error_index) {
                    error_index = i;
                    error = std::current_exception();
                }
            }
        }
    };
    const auto count = std::min<std::size_t>(workers, n);
    std::vector<std::jthread> threads;
    threads.reserve(count - 1);
    for (std::size_t t = 1; t < count; ++t) threads.emplace_back(body);
    body();
    threads.clear();
    if (error) std::rethrow_exception(error);
}

}  // namespace klp
