/*
    Licensed under the Apache License, Version 2.0 (the "License");
    you may not use this file except in compliance with the License.
    You may obtain a copy of the License at

        https://www.apache.org/licenses/LICENSE-2.0

    Unless required by applicable law or agreed to in writing, software
    distributed under the License is distributed on an "AS IS" BASIS,
    WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
    See the License for the specific language governing permissions and
    limitations under the License.
*/

#pragma once

#include <atomic>
#include <cstdint>
#include <mutex>
#include <string>
#include <vector>

#include "flow/batching.hpp"

namespace flow {

/// End-of-job counters for one process.
struct StatsSnapshot {
  std::uint64_t late_items = 0;
  std::uint64_t windows_emitted = 0;
  std::uint64_t watermark_regressions = 0;
  std::uint64_t batches_sent = 0;
  std::uint64_t items_sent = 0;
  std::uint64_t items_received = 0;
  std::uint64_t flush_size = 0;
  std::uint64_t flush_timeout = 0;
  std::uint64_t flush_control = 0;
  std::uint64_t flush_terminate = 0;
  /// Non-terminate batches whose data count was neither 0 nor the policy size.
  std::uint64_t partial_nonfinal_batches = 0;
  std::uint64_t iterations = 0;
  std::vector<double> iteration_ms;
  std::uint64_t tcp_bytes_sent = 0;
  std::uint64_t tcp_frames_sent = 0;
  std::uint64_t max_mux_queue = 0;
};

class JobStats {
 public:
  std::atomic<std::uint64_t> late_items{0};
  std::atomic<std::uint64_t> windows_emitted{0};
  std::atomic<std::uint64_t> watermark_regressions{0};
  std::atomic<std::uint64_t> batches_sent{0};
  std::atomic<std::uint64_t> items_sent{0};
  std::atomic<std::uint64_t> items_received{0};
  std::atomic<std::uint64_t> flush_size{0};
  std::atomic<std::uint64_t> flush_timeout{0};
  std::atomic<std::uint64_t> flush_control{0};
  std::atomic<std::uint64_t> flush_terminate{0};
  std::atomic<std::uint64_t> partial_nonfinal_batches{0};
  std::atomic<std::uint64_t> tcp_bytes_sent{0};
  std::atomic<std::uint64_t> tcp_frames_sent{0};
  std::atomic<std::uint64_t> max_mux_queue{0};

  void record_flush(FlushReason reason, std::size_t data_items, const BatchingPolicy& policy) {
    batches_sent.fetch_add(1, std::memory_order_relaxed);
    items_sent.fetch_add(data_items, std::memory_order_relaxed);
    switch (reason) {
      case FlushReason::size:
        flush_size.fetch_add(1, std::memory_order_relaxed);
        break;
      case FlushReason::timeout:
        flush_timeout.fetch_add(1, std::memory_order_relaxed);
        break;
      case FlushReason::control:
        flush_control.fetch_add(1, std::memory_order_relaxed);
        break;
      case FlushReason::terminate:
        flush_terminate.fetch_add(1, std::memory_order_relaxed);
        break;
    }
    if (reason != FlushReason::terminate && data_items != 0 && data_items != policy.size)
      partial_nonfinal_batches.fetch_add(1, std::memory_order_relaxed);
  }

  void record_iteration(double ms) {
    std::lock_guard lock(mu_);
    iteration_ms_.push_back(ms);
  }

  void observe_mux_queue(std::uint64_t len) {
    auto cur = max_mux_queue.load(std::memory_order_relaxed);
    while (len > cur && !max_mux_queue.compare_exchange_weak(cur, len)) {
    }
  }

  StatsSnapshot snapshot() const {
    StatsSnapshot s;
    s.late_items = late_items.load();
    s.windows_emitted = windows_emitted.load();
    s.watermark_regressions = watermark_regressions.load();
    s.batches_sent = batches_sent.load();
    s.items_sent = items_sent.load();
    s.items_received = items_received.load();
    s.flush_size = flush_size.load();
    s.flush_timeout = flush_timeout.load();
    s.flush_control = flush_control.load();
    s.flush_terminate = flush_terminate.load();
    s.partial_nonfinal_batches = partial_nonfinal_batches.load();
    s.tcp_bytes_sent = tcp_bytes_sent.load();
    s.tcp_frames_sent = tcp_frames_sent.load();
    s.max_mux_queue = max_mux_queue.load();
    std::lock_guard lock(mu_);
    s.iteration_ms = iteration_ms_;
    s.iterations = iteration_ms_.size();
    return s;
  }

 private:
  mutable std::mutex mu_;
  std::vector<double> iteration_ms_;
};

}  // namespace flow
