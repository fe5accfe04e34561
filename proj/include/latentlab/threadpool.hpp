#pragma once

#include <atomic>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace latentlab {

// Index-parallel loop for embarrassingly parallel work (evaluation,
// rollouts). Each worker claims indices from a shared counter; fn(i) must
// only write to slots addressed by i so results are identical for any thread
// count. The first exception thrown by any worker is rethrown on the caller.
inline void parallel_for(int n, int n_threads, const std::function<void(int)> &fn) {
    if (n <= 0) return;
    if (n_threads <= 1 || n == 1) {
        for (int i = 0; i < n; i++) fn(i);
        return;
    }
    int workers = std::min(n_threads, n);
    std::atomic<int> next{0};
    std::exception_ptr err;
    std::mutex err_mu;
    auto body = [&]() {
        while (true) {
            int i = next.fetch_add(1);
            if (i >= n) return;
            try {
                fn(i);
            } catch (...) {
                std::lock_guard<std::mutex> lk(err_mu);
                if (!err) err = std::current_exception();
                return;
            }
        }
    };
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (int w = 0; w < workers; w++) pool.emplace_back(body);
    for (auto &t : pool) t.join();
    if (err) std::rethrow_exception(err);
}

}  // namespace latentlab
