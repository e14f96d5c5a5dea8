#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <thread>
#include <vector>

namespace s4mil {

namespace detail {
inline std::atomic<unsigned> max_threads{0};
}

/// Caps the number of worker threads used by parallel_for. 0 means "hardware concurrency".
inline void set_max_threads(unsigned n) { detail::max_threads.store(n); }

inline unsigned max_threads() {
    unsigned n = detail::max_threads.load();
    if (n == 0) n = std::max(1u, std::thread::hardware_concurrency());
    return n;
}

/// Runs fn(begin, end) over contiguous blocks covering [0, count), one block
/// per worker. Each index is processed by exactly one worker and writes only
/// its own outputs, so results do not depend on the thread count.
template <typename Fn>
void parallel_blocks(std::size_t count, Fn&& fn) {
    const std::size_t workers = std::min<std::size_t>(max_threads(), count);
    if (workers <= 1) {
        if (count > 0) fn(std::size_t{0}, count);
        return;
    }
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(workers);
    const std::size_t block = (count + workers - 1) / workers;
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            try {
                const std::size_t begin = std::min(count, w * block);
                const std::size_t end = std::min(count, (w + 1) * block);
                if (begin < end) fn(begin, end);
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

/// Runs fn(i) for i in [0, count).
template <typename Fn>
void parallel_for(std::size_t count, Fn&& fn) {
    parallel_blocks(count, [&](std::size_t begin, std::size_t end) {
        for (std::size_t i = begin; i < end; ++i) fn(i);
    });
}

}  // namespace s4mil
