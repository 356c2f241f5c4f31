#pragma once

#include <cstdint>
#include <functional>

#include "iftk/clock.hpp"
#include "iftk/errors.hpp"
#include "iftk/util.hpp"

namespace iftk {

/// Exponential backoff with full jitter. Only errors flagged retryable
/// (transport failures, throttling statuses) are retried.
struct RetryPolicy {
  std::size_t max_attempts = 5;
  std::int64_t base_delay_ms = 200;
  std::int64_t max_delay_ms = 20000;
  std::uint64_t jitter_seed = 0x9e3779b97f4a7c15ull;
};

template <typename Fn>
auto with_retries(Fn&& fn, const RetryPolicy& policy, Clock& clock,
                  std::size_t* attempts_out = nullptr) -> decltype(fn()) {
  if (policy.max_attempts == 0) throw ConfigError("retry policy: max_attempts must be >= 1");
  Rng jitter(policy.jitter_seed);
  std::size_t attempt = 0;
  for (;;) {
    ++attempt;
    if (attempts_out) *attempts_out = attempt;
    try {
      return fn();
    } catch (const BackendError& e) {
      if (!e.retryable() || attempt >= policy.max_attempts) throw;
      std::int64_t delay = policy.base_delay_ms << (attempt - 1);
      if (delay > policy.max_delay_ms || delay <= 0) delay = policy.max_delay_ms;
      clock.sleep_ms(static_cast<std::int64_t>(jitter.unit() * static_cast<double>(delay)));
    }
  }
}

}  // namespace iftk
