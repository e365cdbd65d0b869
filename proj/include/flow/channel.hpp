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

#include <algorithm>
#include <chrono>
#include <condition_variable>
#include <cstddef>
#include <deque>
#include <memory>
#include <mutex>
#include <optional>
#include <vector>

#include "flow/batching.hpp"
#include "flow/error.hpp"
#include "flow/message.hpp"

namespace flow {

inline constexpr std::size_t kChannelCapacity = 32;

struct Envelope {
  std::size_t channel = 0;
  std::unique_ptr<AnyBatch> batch;
};

/// Input queue of one task: many producers, one consumer. Each input channel
/// holds at most `capacity` batches (producers block when it is full) unless
/// the channel is marked unbounded.
class TaskQueue {
 public:
  TaskQueue(std::size_t channels, std::vector<bool> unbounded, std::size_t capacity = kChannelCapacity)
      : counts_(channels, 0), unbounded_(std::move(unbounded)), capacity_(capacity) {
    unbounded_.resize(channels, false);
  }

  void push(Envelope env) {
    std::unique_lock lock(mu_);
    auto ch = env.channel;
    if (ch >= counts_.size()) throw InvariantError("task queue: channel out of range");
    not_full_.wait(lock, [&] { return closed_ || unbounded_[ch] || counts_[ch] < capacity_; });
    if (closed_) throw JobAborted();
    ++counts_[ch];
    max_depth_ = std::max(max_depth_, counts_[ch]);
    items_.push_back(std::move(env));
    lock.unlock();
    not_empty_.notify_one();
  }

  /// Waits for the next envelope until `deadline`; nullopt on timeout.
  std::optional<Envelope> pop_until(std::optional<Clock::time_point> deadline) {
    std::unique_lock lock(mu_);
    auto ready = [&] { return closed_ || !items_.empty(); };
    if (deadline) {
      if (!not_empty_.wait_until(lock, *deadline, ready)) return std::nullopt;
    } else {
      not_empty_.wait(lock, ready);
    }
    if (closed_) throw JobAborted();
    Envelope env = std::move(items_.front());
    items_.pop_front();
    bool was_full = counts_[env.channel]-- >= capacity_;
    lock.unlock();
    if (was_full) not_full_.notify_all();
    return env;
  }

  void close() {
    {
      std::lock_guard lock(mu_);
      closed_ = true;
    }
    not_empty_.notify_all();
    not_full_.notify_all();
  }

  /// Largest per-channel depth ever observed.
  std::size_t max_depth() const {
    std::lock_guard lock(mu_);
    return max_depth_;
  }
  std::size_t capacity() const { return capacity_; }

 private:
  mutable std::mutex mu_;
  std::condition_variable not_empty_;
  std::condition_variable not_full_;
  std::deque<Envelope> items_;
  std::vector<std::size_t> counts_;
  std::vector<bool> unbounded_;
  std::size_t capacity_;
  std::size_t max_depth_ = 0;
  bool closed_ = false;
};

/// Bounded blocking FIFO (mux queues). `capacity` 0 means unbounded.
template <class T>
class BlockingQueue {
 public:
  explicit BlockingQueue(std::size_t capacity = 0) : capacity_(capacity) {}

  void push(T value) {
    std::unique_lock lock(mu_);
    not_full_.wait(lock, [&] { return closed_ || capacity_ == 0 || items_.size() < capacity_; });
    if (closed_) throw JobAborted();
    items_.push_back(std::move(value));
    max_len_ = std::max(max_len_, items_.size());
    lock.unlock();
    not_empty_.notify_one();
  }

  /// nullopt once the queue is closed and drained.
  std::optional<T> pop() {
    std::unique_lock lock(mu_);
    not_empty_.wait(lock, [&] { return closed_ || !items_.empty(); });
    if (items_.empty()) return std::nullopt;
    T value = std::move(items_.front());
    items_.pop_front();
    lock.unlock();
    not_full_.notify_one();
    return value;
  }

  std::optional<T> pop_until(Clock::time_point deadline) {
    std::unique_lock lock(mu_);
    if (!not_empty_.wait_until(lock, deadline, [&] { return closed_ || !items_.empty(); })) return std::nullopt;
    if (items_.empty()) return std::nullopt;
    T value = std::move(items_.front());
    items_.pop_front();
    lock.unlock();
    not_full_.notify_one();
    return value;
  }

  void close() {
    {
      std::lock_guard lock(mu_);
      closed_ = true;
    }
    not_empty_.notify_all();
    not_full_.notify_all();
  }

  bool closed() const {
    std::lock_guard lock(mu_);
    return closed_;
  }

  std::size_t max_len() const {
    std::lock_guard lock(mu_);
    return max_len_;
  }
  std::size_t capacity() const { return capacity_; }

 private:
  mutable std::mutex mu_;
  std::condition_variable not_empty_;
  std::condition_variable not_full_;
  std::deque<T> items_;
  std::size_t capacity_;
  std::size_t max_len_ = 0;
  bool closed_ = false;
};

/// Unbounded multi-producer multi-consumer item channel returned by
/// collect_channel. Closes after `producers` calls to `producer_done`.
template <class T>
class ItemChannel {
 public:
  void send(T value) {
    {
      std::lock_guard lock(mu_);
      items_.push_back(std::move(value));
    }
    cv_.notify_one();
  }

  void add_producers(std::size_t n) {
    std::lock_guard lock(mu_);
    producers_ += n;
    armed_ = true;
  }

  void producer_done() {
    bool notify = false;
    {
      std::lock_guard lock(mu_);
      if (producers_ > 0 && --producers_ == 0) notify = true;
    }
    if (notify) cv_.notify_all();
  }

  /// Closes regardless of producers (job finished or failed).
  void close() {
    {
      std::lock_guard lock(mu_);
      force_closed_ = true;
    }
    cv_.notify_all();
  }

  /// Next item, or nullopt once the channel is closed and drained.
  std::optional<T> recv() {
    std::unique_lock lock(mu_);
    cv_.wait(lock, [&] { return !items_.empty() || is_closed(); });
    if (items_.empty()) return std::nullopt;
    T value = std::move(items_.front());
    items_.pop_front();
    return value;
  }

  /// Like recv, but gives up at `deadline`. Sets `closed` once drained and closed.
  std::optional<T> recv_until(Clock::time_point deadline, bool& closed) {
    std::unique_lock lock(mu_);
    cv_.wait_until(lock, deadline, [&] { return !items_.empty() || is_closed(); });
    closed = items_.empty() && is_closed();
    if (items_.empty()) return std::nullopt;
    T value = std::move(items_.front());
    items_.pop_front();
    return value;
  }

  std::optional<T> try_recv() {
    std::lock_guard lock(mu_);
    if (items_.empty()) return std::nullopt;
    T value = std::move(items_.front());
    items_.pop_front();
    return value;
  }

 private:
  bool is_closed() const { return force_closed_ || (armed_ && producers_ == 0); }

  std::mutex mu_;
  std::condition_variable cv_;
  std::deque<T> items_;
  std::size_t producers_ = 0;
  bool armed_ = false;
  bool force_closed_ = false;
};

}  // namespace flow
