#include "vitta/thread_pool.hpp"

#include <atomic>
#include <condition_variable>
#include <mutex>
#include <stdexcept>
#include <thread>
#include <vector>

namespace vitta {

namespace {

thread_local bool t_inside_worker = false;

class Pool {
 public:
  explicit Pool(int n) : stop_(false) {
    for (int i = 0; i < n; ++i) {
      workers_.emplace_back([this] {
        t_inside_worker = true;
        for (;;) {
          std::function<void()> job;
          {
            std::unique_lock<std::mutex> lk(mu_);
            cv_.wait(lk, [this] { return stop_ || !jobs_.empty(); });
            if (stop_ && jobs_.empty()) return;
            job = std::move(jobs_.back());
            jobs_.pop_back();
          }
          job();
        }
      });
    }
  }

  ~Pool() {
    {
      std::lock_guard<std::mutex> lk(mu_);
      stop_ = true;
    }
    cv_.notify_all();
    for (auto& w : workers_) w.join();
  }

  int size() const { return static_cast<int>(workers_.size()); }

  void run_partitioned(std::int64_t count,
                       const std::function<void(std::int64_t, std::int64_t)>& fn) {
    int n = size() + 1;  // workers plus the calling thread
    std::int64_t chunk = (count + n - 1) / n;
    std::atomic<int> remaining(0);
    std::mutex done_mu;
    std::condition_variable done_cv;
    std::exception_ptr error;
    std::mutex error_mu;

    auto run_range = [&](std::int64_t b, std::int64_t e) {
      try {
        fn(b, e);
      } catch (...) {
        std::lock_guard<std::mutex> lk(error_mu);
        if (!error) error = std::current_exception();
      }
    };

    std::int64_t first_end = std::min<std::int64_t>(chunk, count);
    {
      std::lock_guard<std::mutex> lk(mu_);
      for (std::int64_t b = first_end; b < count; b += chunk) {
        std::int64_t e = std::min<std::int64_t>(b + chunk, count);
        remaining.fetch_add(1);
        jobs_.emplace_back([&, b, e] {
          run_range(b, e);
          if (remaining.fetch_sub(1) == 1) {
            std::lock_guard<std::mutex> dlk(done_mu);
            done_cv.notify_all();
          }
        });
      }
    }
    cv_.notify_all();
    if (first_end > 0) run_range(0, first_end);
    {
      std::unique_lock<std::mutex> lk(done_mu);
      done_cv.wait(lk, [&] { return remaining.load() == 0; });
    }
    if (error) std::rethrow_exception(error);
  }

 private:
  std::vector<std::thread> workers_;
  std::vector<std::function<void()>> jobs_;
  std::mutex mu_;
  std::condition_variable cv_;
  bool stop_;
};

std::mutex g_pool_mu;
Pool* g_pool = nullptr;
int g_threads = 0;  // 0 = uninitialized -> hardware_concurrency

Pool* pool() {
  std::lock_guard<std::mutex> lk(g_pool_mu);
  if (g_threads == 0) {
    g_threads = std::max(1u, std::thread::hardware_concurrency());
  }
  if (!g_pool) g_pool = new Pool(g_threads - 1);
  return g_pool;
}

}  // namespace

void set_num_threads(int n) {
  if (n < 1) throw std::invalid_argument("set_num_threads: n must be >= 1");
  std::lock_guard<std::mutex> lk(g_pool_mu);
  if (g_pool && g_threads == n) return;
  delete g_pool;
  g_pool = new Pool(n - 1);
  g_threads = n;
}

int num_threads() {
  pool();
  return g_threads;
}

void parallel_for_chunks(std::int64_t count,
                         const std::function<void(std::int64_t, std::int64_t)>& fn) {
  if (count <= 0) return;
  if (t_inside_worker || num_threads() == 1) {
    fn(0, count);
    return;
  }
  pool()->run_partitioned(count, fn);
}

void parallel_for(std::int64_t count, const std::function<void(std::int64_t)>& fn) {
  parallel_for_chunks(count, [&](std::int64_t b, std::int64_t e) {
    for (std::int64_t i = b; i < e; ++i) fn(i);
  });
}

}  // namespace vitta
