#include "smoltolk/threading.hpp"

#include <atomic>
#include <condition_variable>
#include <cstdlib>
#include <mutex>
#include <thread>
#include <vector>

namespace smoltolk {

namespace {

int env_thread_count() {
  if (const char* env = std::getenv("SMOLTOLK_THREADS")) {
    int v = std::atoi(env);
    if (v >= 1) return v;
  }
  unsigned hc = std::thread::hardware_concurrency();
  return hc == 0 ? 1 : static_cast<int>(hc);
}

std::atomic<int> g_override{0};

// Persistent pool; tasks are (chunk range, fn) pairs dispatched per
// parallel_for call. The calling thread always executes chunk 0.
class Pool {
 public:
  explicit Pool(int workers) {
    for (int i = 0; i < workers; ++i) {
      threads_.emplace_back([this] { worker_loop(); });
    }
  }

  ~Pool() {
    {
      std::lock_guard<std::mutex> lk(mu_);
      stop_ = true;
    }
    cv_.notify_all();
    for (auto& t : threads_) t.join();
  }

  void run(i64 n, int chunks, const std::function<void(i64, i64)>& fn) {
    i64 per = (n + chunks - 1) / chunks;
    std::atomic<int> remaining{0};
    std::mutex done_mu;
    std::condition_variable done_cv;

    int issued = 0;
    {
      std::lock_guard<std::mutex> lk(mu_);
      for (int c = 1; c < chunks; ++c) {
        i64 b = c * per, e = std::min<i64>(n, (c + 1) * per);
        if (b >= e) continue;
        tasks_.push_back([&fn, b, e, &remaining, &done_mu, &done_cv] {
          fn(b, e);
          if (remaining.fetch_sub(1) == 1) {
            std::lock_guard<std::mutex> dlk(done_mu);
            done_cv.notify_one();
          }
        });
        ++issued;
      }
      remaining.store(issued);
    }
    cv_.notify_all();

    fn(0, std::min<i64>(n, per));

    if (issued > 0) {
      std::unique_lock<std::mutex> dlk(done_mu);
      done_cv.wait(dlk, [&] { return remaining.load() == 0; });
    }
  }

 private:
  void worker_loop() {
    for (;;) {
      std::function<void()> task;
      {
        std::unique_lock<std::mutex> lk(mu_);
        cv_.wait(lk, [this] { return stop_ || !tasks_.empty(); });
        if (stop_ && tasks_.empty()) return;
        task = std::move(tasks_.back());
        tasks_.pop_back();
      }
      task();
    }
  }

  std::mutex mu_;
  std::condition_variable cv_;
  std::vector<std::function<void()>> tasks_;
  std::vector<std::thread> threads_;
  bool stop_ = false;
};

Pool& pool() {
  // Size the pool by the machine, not the current cap, so a later
  // set_thread_count() above the env value still has workers to use.
  static Pool p(std::max(env_thread_count(), static_cast<int>(std::thread::hardware_concurrency())) - 1);
  return p;
}

thread_local bool g_in_worker = false;

}  // namespace

int thread_count() {
  int o = g_override.load();
  return o >= 1 ? o : env_thread_count();
}

void set_thread_count(int n) { g_override.store(n); }

void parallel_for(i64 n, const std::function<void(i64, i64)>& fn) {
  if (n <= 0) return;
  int t = thread_count();
  if (t <= 1 || n == 1 || g_in_worker) {
    fn(0, n);
    return;
  }
  int chunks = static_cast<int>(std::min<i64>(t, n));
  pool().run(n, chunks, [&fn](i64 b, i64 e) {
    g_in_worker = true;
    fn(b, e);
    g_in_worker = false;
  });
}

}  // namespace smoltolk
