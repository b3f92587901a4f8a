#pragma once

#include <condition_variable>
#include <cstdint>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace oattn {

// Static-partition parallel_for over [0, n). Each index is processed by
// exactly one worker in ascending order within its chunk, so floating-point
// results are bit-identical regardless of how many threads run.
class ThreadPool {
public:
    static ThreadPool& instance();

    int size() const { return static_cast<int>(workers_.size()) + 1; }

    void parallel_for(std::int64_t n, const std::function<void(std::int64_t, std::int64_t)>& body);

    ~ThreadPool();

private:
    ThreadPool();

    struct Task {
        const std::function<void(std::int64_t, std::int64_t)>* body = nullptr;
        std::int64_t begin = 0, end = 0;
    };

    void worker_loop(int idx);

    std::vector<std::thread> workers_;
    std::mutex mu_;
    std::condition_variable cv_work_, cv_done_;
    std::vector<Task> tasks_;
    std::uint64_t epoch_ = 0;
    int pending_ = 0;
    bool stop_ = false;
};

inline void parallel_for(std::int64_t n, const std::function<void(std::int64_t, std::int64_t)>& body) {
    ThreadPool::instance().parallel_for(n, body);
}

}  // namespace oattn
