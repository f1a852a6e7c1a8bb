#include "core/common.hpp"

#include <atomic>
#include <cmath>
#include <condition_variable>
#include <cstdio>
#include <cstdlib>
#include <memory>
#include <mutex>
#include <thread>

namespace poseidon {

// ---------------------------------------------------------------------------
// logging
// ---------------------------------------------------------------------------

namespace {
std::mutex g_log_mutex;
LogSink g_log_sink;
}  // namespace

void set_log_sink(LogSink sink) {
    std::lock_guard<std::mutex> lock(g_log_mutex);
    g_log_sink = std::move(sink);
}

static void emit_log(const std::string& line) {
    std::lock_guard<std::mutex> lock(g_log_mutex);
    if (g_log_sink) {
        g_log_sink(line);
    } else {
        std::fprintf(stderr, "%s\n", line.c_str());
    }
}

void log_info(const std::string& msg) { emit_log(msg); }
void log_warn(const std::string& msg) { emit_log("warning: " + msg); }

// ---------------------------------------------------------------------------
// rng
// ---------------------------------------------------------------------------

uint64_t mix_seed(uint64_t seed, uint64_t tag) {
    // splitmix64 over the xor-combined inputs
    uint64_t z = seed ^ (tag + 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

uint64_t hash_str(const std::string& s) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

double Rng::normal() {
    if (have_spare_) {
        have_spare_ = false;
        return spare_;
    }
    // Box-Muller; u1 nudged away from 0 so log stays finite
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
}

double Rng::trunc_normal(double std_dev, double clip) {
    for (;;) {
        const double z = normal();
        if (std::fabs(z) <= clip) return z * std_dev;
    }
}

int64_t Rng::randint(int64_t n) {
    if (n <= 0) throw UsageError("randint: n must be positive");
    const uint64_t un = static_cast<uint64_t>(n);
    const uint64_t limit = UINT64_MAX - UINT64_MAX % un;
    for (;;) {
        const uint64_t x = next_u64();
        if (x < limit) return static_cast<int64_t>(x % un);
    }
}

// ---------------------------------------------------------------------------
// thread pool
// ---------------------------------------------------------------------------

namespace {

struct Task {
    std::function<void(int64_t)> chunk_body;
    int64_t total = 0;
    std::atomic<int64_t> next{0};
    std::atomic<int64_t> completed{0};
    std::mutex m;
    std::condition_variable cv;
};

thread_local bool t_in_parallel = false;

class Pool {
  public:
    static Pool& instance() {
        static Pool pool;
        return pool;
    }

    int helpers() const { return static_cast<int>(threads_.size()); }

    void run(std::shared_ptr<Task> task) {
        // one run at a time; nested/concurrent callers fall back to inline
        std::lock_guard<std::mutex> run_lock(run_mutex_);
        {
            std::lock_guard<std::mutex> lock(mutex_);
            current_ = task;
            ++generation_;
        }
        wake_.notify_all();
        execute(*task);
        {
            std::unique_lock<std::mutex> lock(task->m);
            task->cv.wait(lock, [&] { return task->completed.load() == task->total; });
        }
        std::lock_guard<std::mutex> lock(mutex_);
        if (current_ == task) current_.reset();
    }

  private:
    Pool() {
        int n = 0;
        if (const char* env = std::getenv("POSEIDON_THREADS")) {
            n = std::atoi(env);
        }
        if (n <= 0) {
            n = static_cast<int>(std::thread::hardware_concurrency());
            if (n <= 0) n = 1;
            if (n > 16) n = 16;
        }
        for (int i = 0; i < n - 1; ++i) {
            threads_.emplace_back([this] { worker_loop(); });
        }
    }

    ~Pool() {
        {
            std::lock_guard<std::mutex> lock(mutex_);
            stop_ = true;
        }
        wake_.notify_all();
        for (auto& t : threads_) t.join();
    }

    void worker_loop() {
        uint64_t seen = 0;
        for (;;) {
            std::shared_ptr<Task> task;
            {
                std::unique_lock<std::mutex> lock(mutex_);
                wake_.wait(lock, [&] { return stop_ || (generation_ != seen && current_); });
                if (stop_) return;
                seen = generation_;
                task = current_;
            }
            if (task) {
                t_in_parallel = true;
                execute(*task);
                t_in_parallel = false;
            }
        }
    }

    static void execute(Task& t) {
        for (;;) {
            const int64_t c = t.next.fetch_add(1, std::memory_order_relaxed);
            if (c >= t.total) return;
            t.chunk_body(c);
            if (t.completed.fetch_add(1, std::memory_order_acq_rel) + 1 == t.total) {
                std::lock_guard<std::mutex> lock(t.m);
                t.cv.notify_all();
            }
        }
    }

    std::vector<std::thread> threads_;
    std::mutex run_mutex_;
    std::mutex mutex_;
    std::condition_variable wake_;
    std::shared_ptr<Task> current_;
    uint64_t generation_ = 0;
    bool stop_ = false;
};

}  // namespace

int worker_count() {
    static int n = Pool::instance().helpers() + 1;
    return n;
}

void parallel_for(int64_t begin, int64_t end, int64_t grain,
                  const std::function<void(int64_t, int64_t)>& body) {
    if (end <= begin) return;
    if (grain < 1) grain = 1;
    const int64_t span = end - begin;
    const int64_t chunks = (span + grain - 1) / grain;
    // Small loops, nested calls, and single-worker builds run inline.
    if (chunks == 1 || worker_count() == 1 || t_in_parallel) {
        body(begin, end);
        return;
    }
    auto task = std::make_shared<Task>();
    task->total = chunks;
    task->chunk_body = [&, begin, end, grain](int64_t c) {
        const int64_t lo = begin + c * grain;
        const int64_t hi = std::min(end, lo + grain);
        body(lo, hi);
    };
    t_in_parallel = true;  // nested parallel_for from the body runs inline
    Pool::instance().run(std::move(task));
    t_in_parallel = false;
}

}  // namespace poseidon
