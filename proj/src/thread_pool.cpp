#include "distillforge/thread_pool.hpp"

#include <algorithm>
#include <atomic>
#include <condition_variable>
#include <cstdlib>
#include <mutex>
#include <thread>
#include <vector>

namespace distillforge {

namespace {

int resolve_default_threads() {
    int hw = static_cast<int>(std::thread::hardware_concurrency());
    if (hw <= 0) hw = 1;
    if (const char* env = std::getenv("DISTILLFORGE_THREADS")) {
        int cap = std::atoi(env);
        if (cap > 0) hw = std::min(hw, cap);
    }
    return hw;
}

int g_threads = -1;

class Pool {
public:
    explicit Pool(int n) : n_workers_(n) {
        for (int i = 0; i < n; ++i)
            workers_.emplace_back([this, i] { worker(i + 1); });
    }

    ~Pool() {
        {
            std::unique_lock<std::mutex> lk(mu_);
            stop_ = true;
        }
        cv_.notify_all();
        for (auto& t : workers_) t.join();
    }

    void run(long n, const std::function<void(long, long)>& fn) {
        long parts = std::min<long>(n, n_workers_ + 1);
        std::unique_lock<std::mutex> lk(mu_);
        job_fn_ = &fn;
        job_n_ = n;
        job_parts_ = parts;
        pending_ = parts - 1;  // caller runs part 0
        ++generation_;
        lk.unlock();
        cv_.notify_all();

        run_part(0);

        std::unique_lock<std::mutex> lk2(mu_);
        done_cv_.wait(lk2, [this] { return pending_ == 0; });
        job_fn_ = nullptr;
    }

private:
    void run_part(long part) {
        long chunk = (job_n_ + job_parts_ - 1) / job_parts_;
        long begin = part * chunk;
        long end = std::min(job_n_, begin + chunk);
        if (begin < end) (*job_fn_)(begin, end);
    }

    void worker(int index) {
        std::uint64_t seen = 0;
        for (;;) {
            std::unique_lock<std::mutex> lk(mu_);
            cv_.wait(lk, [&] { return stop_ || generation_ != seen; });
            if (stop_) return;
            seen = generation_;
            bool mine = index < job_parts_;
            lk.unlock();
            if (!mine) continue;  // pending_ counts only participating workers
            run_part(index);
            std::unique_lock<std::mutex> lk2(mu_);
            if (--pending_ == 0) done_cv_.notify_all();
        }
    }

    int n_workers_;
    std::vector<std::thread> workers_;
    std::mutex mu_;
    std::condition_variable cv_;
    std::condition_variable done_cv_;
    const std::function<void(long, long)>* job_fn_ = nullptr;
    long job_n_ = 0;
    long job_parts_ = 0;
    long pending_ = 0;
    std::uint64_t generation_ = 0;
    bool stop_ = false;
};

Pool* g_pool = nullptr;

}  // namespace

int worker_threads() {
    if (g_threads < 0) g_threads = resolve_default_threads();
    return g_threads;
}

void set_worker_threads(int n) {
    if (n < 1) n = 1;
    if (g_pool && g_threads == n) return;
    delete g_pool;
    g_pool = nullptr;
    g_threads = n;
}

void parallel_for(long n, const std::function<void(long, long)>& fn) {
    if (n <= 0) return;
    int threads = worker_threads();
    if (threads <= 1 || n == 1) {
        fn(0, n);
        return;
    }
    if (!g_pool) g_pool = new Pool(threads - 1);
    g_pool->run(n, fn);
}

}  // namespace distillforge
