#pragma once

// Row-partitioned parallel loops and a fixed-topology pairwise reduction.
//
// Every parallel loop in the library writes into per-index slots and every
// sum goes through pairwise_sum(), so results do not depend on how many
// workers are active.

#include <algorithm>
#include <atomic>
#include <condition_variable>
#include <cstddef>
#include <functional>
#include <mutex>
#include <span>
#include <thread>
#include <vector>

namespace kpdepth {

namespace detail {

class WorkerPool {
public:
    explicit WorkerPool(unsigned workers) { resize(workers); }
    ~WorkerPool() { stop(); }

    WorkerPool(const WorkerPool&) = delete;
    WorkerPool& operator=(const WorkerPool&) = delete;

    unsigned size() const { return static_cast<unsigned>(threads_.size()) + 1; }

    void resize(unsigned workers) {
        stop();
        workers = std::max(1u, workers);
        shutdown_ = false;
        generation_ = 0;
        for (unsigned w = 1; w < workers; ++w)
            threads_.emplace_back([this, w] { loop(w); });
    }

    // Runs job(worker_index) on every worker, including the caller as worker 0.
    void run(const std::function<void(unsigned)>& job) {
        if (threads_.empty()) {
            job(0);
            return;
        }
        {
            std::lock_guard lock(mutex_);
            job_ = &job;
            pending_ = static_cast<unsigned>(threads_.size());
            ++generation_;
        }
        wake_.notify_all();
        job(0);
        std::unique_lock lock(mutex_);
        done_.wait(lock, [this] { return pending_ == 0; });
        job_ = nullptr;
    }

private:
    void loop(unsigned index) {
        std::size_t seen = 0;
        for (;;) {
            const std::function<void(unsigned)>* job = nullptr;
            {
                std::unique_lock lock(mutex_);
                wake_.wait(lock, [&] { return shutdown_ || generation_ != seen; });
                if (shutdown_)
                    return;
                seen = generation_;
                job = job_;
            }
            (*job)(index);
            {
                std::lock_guard lock(mutex_);
                if (--pending_ == 0)
                    done_.notify_one();
            }
        }
    }

    void stop() {
        {
            std::lock_guard lock(mutex_);
            shutdown_ = true;
        }
        wake_.notify_all();
        for (auto& t : threads_)
            t.join();
        threads_.clear();
    }

    std::vector<std::thread> threads_;
    std::mutex mutex_;
    std::condition_variable wake_;
    std::condition_variable done_;
    const std::function<void(unsigned)>* job_ = nullptr;
    unsigned pending_ = 0;
    std::size_t generation_ = 0;
    bool shutdown_ = false;
};

inline WorkerPool& pool() {
    static WorkerPool instance(1);
    return instance;
}

} // namespace detail

/// Caps the number of workers used by parallel_for. 0 selects the number of
/// logical cores.
inline void set_num_threads(unsigned n) {
    if (n == 0)
        n = std::max(1u, std::thread::hardware_concurrency());
    if (n != detail::pool().size())
        detail::pool().resize(n);
}

inline unsigned num_threads() { return detail::pool().size(); }

/// Calls body(lo, hi) over disjoint chunks covering [0, n). Chunks are handed
/// out dynamically; body must only write to slots indexed inside its chunk.
template <typename Body>
void parallel_for(std::size_t n, Body&& body, std::size_t grain = 1) {
    if (n == 0)
        return;
    auto& workers = detail::pool();
    if (workers.size() == 1 || n <= grain) {
        body(std::size_t{0}, n);
        return;
    }
    const std::size_t chunk = std::max(grain, n / (4 * workers.size()) + 1);
    std::atomic<std::size_t> next{0};
    const std::function<void(unsigned)> job = [&](unsigned) {
        for (;;) {
            const std::size_t lo = next.fetch_add(chunk);
            if (lo >= n)
                return;
            body(lo, std::min(n, lo + chunk));
        }
    };
    workers.run(job);
}

/// Pairwise summation with a topology fixed by the input length only.
inline double pairwise_sum(std::span<const double> values) {
    const std::size_t n = values.size();
    if (n <= 8) {
        double s = 0.0;
        for (double v : values)
            s += v;
        return s;
    }
    const std::size_t half = n / 2;
    return pairwise_sum(values.first(half)) + pairwise_sum(values.subspan(half));
}

/// Strided variant: sums values[offset + k * stride] for k in [0, count).
inline double pairwise_sum_strided(std::span<const double> values, std::size_t offset,
                                   std::size_t stride, std::size_t count) {
    if (count <= 8) {
        double s = 0.0;
        for (std::size_t k = 0; k < count; ++k)
            s += values[offset + k * stride];
        return s;
    }
    const std::size_t half = count / 2;
    return pairwise_sum_strided(values, offset, stride, half) +
           pairwise_sum_strided(values, offset + half * stride, stride, count - half);
}

} // namespace kpdepth
