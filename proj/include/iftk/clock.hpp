#pragma once

#include <chrono>
#include <cstdint>
#include <mutex>
#include <thread>

namespace iftk {

/// Time source abstraction so rate limiting and backoff are testable under a
/// simulated clock.
class Clock {
 public:
  virtual ~Clock() = default;
  virtual std::int64_t now_ms() = 0;
  virtual void sleep_ms(std::int64_t ms) = 0;
};

class SystemClock final : public Clock {
 public:
  std::int64_t now_ms() override {
    return std::chrono::duration_cast<std::chrono::milliseconds>(
               std::chrono::steady_clock::now().time_since_epoch())
        .count();
  }
  void sleep_ms(std::int64_t ms) override {
    if (ms > 0) std::this_thread::sleep_for(std::chrono::milliseconds(ms));
  }

  static SystemClock& instance() {
    static SystemClock clock;
    return clock;
  }
};

/// Simulated clock: sleeping advances time instantly.
class MockClock final : public Clock {
 public:
  explicit MockClock(std::int64_t start_ms = 0) : now_(start_ms) {}

  std::int64_t now_ms() override {
    std::lock_guard<std::mutex> lock(mu_);
    return now_;
  }

  void sleep_ms(std::int64_t ms) override {
    std::lock_guard<std::mutex> lock(mu_);
    if (ms > 0) now_ += ms;
  }

  void advance_ms(std::int64_t ms) { sleep_ms(ms); }

 private:
  std::mutex mu_;
  std::int64_t now_ = 0;
};

}  // namespace iftk
