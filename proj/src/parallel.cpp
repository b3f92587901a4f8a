#include "oattn/parallel.hpp"

#include <algorithm>
#include <cstdlib>

namespace oattn {

namespace {
thread_local bool g_in_worker = false;

int configured_threads() {
    if (const char* env = std::getenv("ORACLE_ATTN_THREADS")) {
        const int n = std::atoi(env);
        if (n >= 1) return std::min(n, 64);
    }
    const unsigned hw = std::thread::hardware_concurrency();
    return static_cast<int>(std::clamp(hw, 1u, 8u));
}
}  // namespace

ThreadPool& ThreadPool::instance() {
    static ThreadPool pool;
    return pool;
}

ThreadPool::ThreadPool() {
    const int n = configured_threads();
    for (int i = 0; i < n - 1; ++i) workers_.emplace_back([this, i] { worker_loop(i); });
}

ThreadPool::~ThreadPool() {
    {
        std::lock_guard<std::mutex> lk(mu_);
        stop_ = true;
    }
    cv_work_.notify_all();
    for (auto& w : workers_) w.join();
}

void ThreadPool::worker_loop(int idx) {
    g_in_worker = true;
    std::uint64_t seen = 0;
    for (;;) {
        Task task;
        {
            std::unique_lock<std::mutex> lk(mu_);
            cv_work_.wait(lk, [&] { return stop_ || epoch_ != seen; });
            if (stop_) return;
            seen = epoch_;
            task = tasks_[static_cast<std::size_t>(idx)];
        }
        if (task.body && task.begin < task.end) (*task.body)(task.begin, task.end);
        {
            std::lock_guard<std::mutex> lk(mu_);
            if (--pending_ == 0) cv_done_.notify_one();
        }
    }
}

void ThreadPool::parallel_for(std::int64_t n,
                              const std::function<void(std::int64_t, std::int64_t)>& body) {
    if (n <= 0) return;
    const int threads = size();
    // Nested calls and degenerate sizes run inline; partitioning depends only
    // on n and the pool size, so results are reproducible run to run.
    if (threads == 1 || n == 1 || g_in_worker) {
        body(0, n);
        return;
    }
    const std::int64_t chunk = (n + threads - 1) / threads;
    {
        std::lock_guard<std::mutex> lk(mu_);
        tasks_.assign(workers_.size(), Task{});
        for (std::size_t t = 0; t < workers_.size(); ++t) {
            const std::int64_t b = static_cast<std::int64_t>(t + 1) * chunk;
            const std::int64_t e = std::min(n, b + chunk);
            if (b < e) tasks_[t] = Task{&body, b, e};
        }
        pending_ = static_cast<int>(workers_.size());
        ++epoch_;
    }
    cv_work_.notify_all();
    body(0, std::min(n, chunk));
    {
        std::unique_lock<std::mutex> lk(mu_);
        cv_done_.wait(lk, [&] { return pending_ == 0; });
    }
}

}  // namespace oattn
