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

#include <chrono>
#include <cstdint>
#include <optional>
#include <string>
#include <variant>

#include "flow/error.hpp"
#include "flow/message.hpp"

namespace flow {

using Clock = std::chrono::steady_clock;

struct BatchingPolicy {
  enum class Mode { fixed, adaptive, unbatched };

  Mode mode = Mode::adaptive;
  std::size_t size = 1024;
  std::chrono::microseconds timeout = std::chrono::milliseconds(50);

  static BatchingPolicy fixed(std::size_t n) {
    if (n == 0) throw BuildError("batch size must be positive");
    return {Mode::fixed, n, {}};
  }
  static BatchingPolicy adaptive(std::size_t n, std::chrono::microseconds timeout) {
    if (n == 0) throw BuildError("batch size must be positive");
    if (timeout.count() <= 0) throw BuildError("batch timeout must be positive");
    return {Mode::adaptive, n, timeout};
  }
  static BatchingPolicy unbatched() { return {Mode::unbatched, 1, {}}; }

  /// `fixed:N`, `adaptive:N:MSms` or `unbatched`.
  static BatchingPolicy parse(const std::string& text) {
    auto fail = [&] { return BuildError("bad batching policy `" + text + "`"); };
    auto number = [&](const std::string& s) {
      if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos) throw fail();
      return std::stoull(s);
    };
    if (text == "unbatched") return unbatched();
    if (text.rfind("fixed:", 0) == 0) return fixed(number(text.substr(6)));
    if (text.rfind("adaptive:", 0) == 0) {
      auto rest = text.substr(9);
      auto colon = rest.find(':');
      if (colon == std::string::npos) throw fail();
      auto ms = rest.substr(colon + 1);
      if (ms.size() < 3 || ms.substr(ms.size() - 2) != "ms") throw fail();
      return adaptive(number(rest.substr(0, colon)), std::chrono::milliseconds(number(ms.substr(0, ms.size() - 2))));
    }
    throw fail();
  }

  std::string str() const {
    switch (mode) {
      case Mode::fixed:
        return "fixed:" + std::to_string(size);
      case Mode::adaptive:
        return "adaptive:" + std::to_string(size) + ":" +
               std::to_string(std::chrono::duration_cast<std::chrono::milliseconds>(timeout).count()) + "ms";
      case Mode::unbatched:
        return "unbatched";
    }
    return {};
  }
};

enum class FlushReason : std::uint8_t { size, timeout, control, terminate };

template <class T>
struct Emitted {
  Batch<T> batch;
  FlushReason reason;
};

/// Accumulates messages for one destination and decides when a batch departs.
/// Stamps consecutive sequence numbers and the current epoch on every batch.
template <class T>
class Batcher {
 public:
  explicit Batcher(BatchingPolicy policy, Clock::time_point now = Clock::now())
      : policy_(policy), last_emit_(now) {
    pending_.messages.reserve(policy_.mode == BatchingPolicy::Mode::unbatched ? 1 : std::min<std::size_t>(policy_.size, 4096));
  }

  void set_epoch(std::uint32_t e) { epoch_ = e; }
  std::uint32_t epoch() const { return epoch_; }
  std::uint32_t next_seq() const { return seq_; }
  bool empty() const { return pending_.messages.empty(); }
  std::size_t buffered() const { return pending_.messages.size(); }

  std::optional<Emitted<T>> push(StreamMessage<T> msg, Clock::time_point now) {
    bool control = !is_data(msg);
    bool terminate = std::holds_alternative<Terminate>(msg);
    pending_.messages.push_back(std::move(msg));
    if (terminate) return emit(FlushReason::terminate, now);
    if (control) return emit(FlushReason::control, now);
    switch (policy_.mode) {
      case BatchingPolicy::Mode::unbatched:
        return emit(FlushReason::size, now);
      case BatchingPolicy::Mode::fixed:
        if (pending_.messages.size() >= policy_.size) return emit(FlushReason::size, now);
        return std::nullopt;
      case BatchingPolicy::Mode::adaptive:
        if (pending_.messages.size() >= policy_.size) return emit(FlushReason::size, now);
        if (now - last_emit_ >= policy_.timeout) return emit(FlushReason::timeout, now);
        return std::nullopt;
    }
    return std::nullopt;
  }

  /// Same as `push`, reading the clock only when the policy needs it.
  std::optional<Emitted<T>> push(StreamMessage<T> msg) {
    return push(std::move(msg), policy_.mode == BatchingPolicy::Mode::adaptive ? Clock::now() : last_emit_);
  }

  /// Timer flush: emits the partial batch once the adaptive timeout has elapsed.
  std::optional<Emitted<T>> poll(Clock::time_point now) {
    if (policy_.mode != BatchingPolicy::Mode::adaptive || empty()) return std::nullopt;
    if (now - last_emit_ < policy_.timeout) return std::nullopt;
    return emit(FlushReason::timeout, now);
  }

  std::optional<Clock::time_point> deadline() const {
    if (policy_.mode != BatchingPolicy::Mode::adaptive || empty()) return std::nullopt;
    return last_emit_ + policy_.timeout;
  }

  /// Emits whatever is buffered (used for FlushBatch-free forced flushes).
  std::optional<Emitted<T>> flush(Clock::time_point now = Clock::now()) {
    if (empty()) return std::nullopt;
    return emit(FlushReason::control, now);
  }

 private:
  Emitted<T> emit(FlushReason reason, Clock::time_point now) {
    Batch<T> out;
    out.seq = seq_++;
    out.epoch = epoch_;
    out.messages.reserve(pending_.messages.capacity());
    std::swap(out.messages, pending_.messages);
    last_emit_ = now;
    return Emitted<T>{std::move(out), reason};
  }

  BatchingPolicy policy_;
  Batch<T> pending_;
  Clock::time_point last_emit_;
  std::uint32_t seq_ = 0;
  std::uint32_t epoch_ = 0;
};

}  // namespace flow
