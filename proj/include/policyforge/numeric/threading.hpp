#ifndef POLICYFORGE_NUMERIC_THREADING_HPP_
#define POLICYFORGE_NUMERIC_THREADING_HPP_

#include <atomic>
#include <condition_variable>
#include <cstdlib>
#include <functional>
#include <mutex>
#include <queue>
#include <thread>
#include <vector>

namespace policyforge {

// Worker count: POLICY_FORGE_THREADS caps it, hardware concurrency otherwise.
inline int worker_count() {
  int hw = static_cast<int>(std::thread::hardware_concurrency());
  if (hw <= 0) hw = 1;
  if (const char* env = std::getenv("POLICY_FORGE_THREADS")) {
    const int cap = std::atoi(env);
    if (cap >= 1 && cap < hw) hw = cap;
  }
  return hw;
}

namespace detail {
inline thread_local bool inside_pool_worker = false;
}  // namespace detail

class ThreadPool {
 public:
  explicit ThreadPool(int num_threads) {
    for (int i = 0; i < num_threads; ++i) {
      threads_.emplace_back([this] { worker(); });
    }
  }

  ~ThreadPool() {
    {
      std::unique_lock<std::mutex> lock(m_);
      done_ = true;
    }
    cv_.notify_all();
    for (auto& t : threads_) t.join();
  }

  int size() const { return static_cast<int>(threads_.size()); }

  void schedule(std::function<void()> task) {
    {
      std::unique_lock<std::mutex> lock(m_);
      queue_.push(std::move(task));
    }
    cv_.notify_one();
  }

 private:
  void worker() {
    detail::inside_pool_worker = true;
    for (;;) {
      std::function<void()> task;
      {
        std::unique_lock<std::mutex> lock(m_);
        cv_.wait(lock, [this] { return done_ || !queue_.empty(); });
        if (done_ && queue_.empty()) return;
        task = std::move(queue_.front());
        queue_.pop();
      }
      task();
    }
  }

  std::vector<std::thread> threads_;
  std::mutex m_;
  std::condition_variable cv_;
  std::queue<std::function<void()>> queue_;
  bool done_ = false;
};

inline ThreadPool& global_pool() {
  static ThreadPool pool(worker_count());
  return pool;
}

// Work items must be independent. Nested calls from inside a pool worker run
// inline so the fixed-size pool can never deadlock on itself.
inline void parallel_for(int n, const std::function<void(int)>& fn) {
  if (n <= 0) return;
  if (detail::inside_pool_worker) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  ThreadPool& pool = global_pool();
  if (n == 1 || pool.size() <= 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::atomic<int> live{0};
  std::mutex m;
  std::condition_variable cv;
  const int workers = std::min(pool.size(), n);
  live.store(workers);
  for (int w = 0; w < workers; ++w) {
    pool.schedule([&] {
      for (;;) {
        const int i = next.fetch_add(1);
        if (i >= n) break;
        fn(i);
      }
      if (live.fetch_sub(1) == 1) {
        std::unique_lock<std::mutex> lock(m);
        cv.notify_one();
      }
    });
  }
  std::unique_lock<std::mutex> lock(m);
  cv.wait(lock, [&] { return live.load() == 0; });
}

}  // namespace policyforge

#endif  // POLICYFORGE_NUMERIC_THREADING_HPP_
