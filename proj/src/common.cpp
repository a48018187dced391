#include "haan/common.hpp"

#include <cmath>
#include <condition_variable>
#include <cstdlib>
#include <mutex>
#include <thread>
#include <vector>

namespace haan {

double Rng::normal(double mean, double stddev) {
    if (has_cached_) {
        has_cached_ = false;
        return mean + stddev * cached_;
    }
    double u1 = 0.0;
    do {
        u1 = uniform();
    } while (u1 <= 1e-12);
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * 3.14159265358979323846 * u2;
    cached_ = r * std::sin(theta);
    has_cached_ = true;
    return mean + stddev * r * std::cos(theta);
}

int thread_count() {
    static const int cached = [] {
        const char* env = std::getenv("HAAN_THREADS");
        long v = env ? std::strtol(env, nullptr, 10) : 0;
        if (v <= 0) {
            unsigned hw = std::thread::hardware_concurrency();
            v = hw ? static_cast<long>(hw) : 1;
        }
        return static_cast<int>(v);
    }();
    return cached;
}

namespace {

// Minimal persistent pool. parallel_for blocks until every chunk finished, so
// a single shared task slot is enough.
class Pool {
public:
    explicit Pool(int workers) {
        for (int i = 0; i < workers; ++i) {
            threads_.emplace_back([this] { worker_loop(); });
        }
    }

    ~Pool() {
        {
            std::lock_guard<std::mutex> lock(mu_);
            stop_ = true;
        }
        cv_.notify_all();
        for (auto& t : threads_) t.join();
    }

    void run(std::size_t n, std::size_t chunks, const std::function<void(std::size_t, std::size_t)>& fn) {
        {
            std::lock_guard<std::mutex> lock(mu_);
            fn_ = &fn;
            total_ = n;
            chunks_ = chunks;
            next_chunk_ = 0;
            pending_ = chunks;
            ++generation_;
        }
        cv_.notify_all();
        help();
        std::unique_lock<std::mutex> lock(mu_);
        done_cv_.wait(lock, [this] { return pending_ == 0; });
        fn_ = nullptr;
    }

private:
    void help() {
        while (true) {
            std::size_t chunk;
            {
                std::lock_guard<std::mutex> lock(mu_);
                if (next_chunk_ >= chunks_) return;
                chunk = next_chunk_++;
            }
            execute(chunk);
        }
    }

    void execute(std::size_t chunk) {
        const std::size_t per = (total_ + chunks_ - 1) / chunks_;
        const std::size_t begin = chunk * per;
        const std::size_t end = std::min(total_, begin + per);
        if (begin < end) (*fn_)(begin, end);
        std::lock_guard<std::mutex> lock(mu_);
        if (--pending_ == 0) done_cv_.notify_all();
    }

    void worker_loop() {
        std::uint64_t seen = 0;
        while (true) {
            std::size_t chunk;
            {
                std::unique_lock<std::mutex> lock(mu_);
                cv_.wait(lock, [&] { return stop_ || (generation_ != seen && next_chunk_ < chunks_); });
                if (stop_) return;
                if (next_chunk_ >= chunks_) {
                    seen = generation_;
                    continue;
                }
                chunk = next_chunk_++;
                if (next_chunk_ >= chunks_) seen = generation_;
            }
            execute(chunk);
        }
    }

    std::vector<std::thread> threads_;
    std::mutex mu_;
    std::condition_variable cv_;
    std::condition_variable done_cv_;
    const std::function<void(std::size_t, std::size_t)>* fn_ = nullptr;
    std::size_t total_ = 0;
    std::size_t chunks_ = 0;
    std::size_t next_chunk_ = 0;
    std::size_t pending_ = 0;
    std::uint64_t generation_ = 0;
    bool stop_ = false;
};

}  // namespace

void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& fn) {
    if (n == 0) return;
    const int workers = thread_count();
    if (workers <= 1 || n < 2) {
        fn(0, n);
        return;
    }
    static Pool pool(thread_count() - 1);
    const std::size_t chunks = std::min<std::size_t>(n, static_cast<std::size_t>(workers));
    pool.run(n, chunks, fn);
}

}  // namespace haan
