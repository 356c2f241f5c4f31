#pragma once

#include <condition_variable>
#include <deque>
#include <mutex>

#include "iftk/clock.hpp"
#include "iftk/errors.hpp"

namespace iftk {

/// Sliding-window rate limiter: at most `max_requests` grants inside any
/// window of `window_ms`. acquire() blocks (via the clock) until a slot opens.
class RateLimiter {
 public:
  RateLimiter(std::size_t max_requests, std::int64_t window_ms,
              Clock& clock = SystemClock::instance())
      : max_requests_(max_requests), window_ms_(window_ms), clock_(clock) {
    if (max_requests_ == 0) throw ConfigError("rate limiter: max_requests must be >= 1");
    if (window_ms_ <= 0) throw ConfigError("rate limiter: window must be positive");
  }

  void acquire() {
    for (;;) {
      std::int64_t wait_ms = 0;
      {
        std::lock_guard<std::mutex> lock(mu_);
        const std::int64_t now = clock_.now_ms();
        while (!grants_.empty() && grants_.front() <= now - window_ms_) {
          grants_.pop_front();
        }
        if (grants_.size() < max_requests_) {
          grants_.push_back(now);
          return;
        }
        wait_ms = grants_.front() + window_ms_ - now;
      }
      clock_.sleep_ms(wait_ms > 0 ? wait_ms : 1);
    }
  }

 private:
  std::size_t max_requests_;
  std::int64_t window_ms_;
  Clock& clock_;
  std::mutex mu_;
  std::deque<std::int64_t> grants_;
};

/// Bounds the number of requests simultaneously in flight.
class InFlightLimiter {
 public:
  explicit InFlightLimiter(std::size_t max_in_flight) : max_(max_in_flight) {
    if (max_ == 0) throw ConfigError("in-flight limiter: limit must be >= 1");
  }

  class Token {
   public:
    explicit Token(InFlightLimiter& l) : limiter_(&l) {}
    Token(const Token&) = delete;
    Token& operator=(const Token&) = delete;
    Token(Token&& other) noexcept : limiter_(other.limiter_) { other.limiter_ = nullptr; }
    ~Token() {
      if (limiter_) limiter_->release();
    }

   private:
    InFlightLimiter* limiter_;
  };

  Token enter() {
    std::unique_lock<std::mutex> lock(mu_);
    cv_.wait(lock, [&] { return in_flight_ < max_; });
    ++in_flight_;
    return Token(*this);
  }

 private:
  void release() {
    {
      std::lock_guard<std::mutex> lock(mu_);
      --in_flight_;
    }
    cv_.notify_one();
  }

  std::size_t max_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::size_t in_flight_ = 0;
};

}  // namespace iftk
