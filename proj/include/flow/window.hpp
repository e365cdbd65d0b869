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
#include <deque>
#include <functional>
#include <map>
#include <optional>
#include <unordered_map>
#include <utility>
#include <vector>

#include "flow/error.hpp"
#include "flow/hash.hpp"
#include "flow/message.hpp"
#include "flow/node.hpp"

namespace flow {

/// Per-channel latest watermark; the frontier is their minimum. Terminated
/// channels stop holding the frontier back.
class WatermarkFrontier {
 public:
  explicit WatermarkFrontier(std::size_t channels = 0) : latest_(channels, kMinTime), closed_(channels, false) {}

  std::size_t channels() const { return latest_.size(); }
  Timestamp frontier() const { return frontier_; }
  Timestamp latest(std::size_t ch) const { return latest_[ch]; }

  /// Records watermark `t` on `ch`; returns the new frontier iff it advanced.
  std::optional<Timestamp> observe(std::size_t ch, Timestamp t) {
    if (t < latest_[ch])
      throw InvariantError("watermark regressed on channel " + std::to_string(ch) + ": " +
                           std::to_string(latest_[ch]) + " -> " + std::to_string(t));
    latest_[ch] = t;
    return recompute();
  }

  /// Channel terminated; returns the new frontier iff it advanced to a finite value.
  std::optional<Timestamp> close(std::size_t ch) {
    closed_[ch] = true;
    return recompute();
  }

 private:
  std::optional<Timestamp> recompute() {
    Timestamp m = kMaxTime;
    bool any_open = false;
    for (std::size_t i = 0; i < latest_.size(); ++i) {
      if (closed_[i]) continue;
      any_open = true;
      m = std::min(m, latest_[i]);
    }
    if (!any_open || m <= frontier_) return std::nullopt;
    frontier_ = m;
    return m;
  }

  std::vector<Timestamp> latest_;
  std::vector<bool> closed_;
  Timestamp frontier_ = kMinTime;
};

enum class WindowKind { count, processing_time, event_time, transaction };

/// Size and slide of a count or time window. Time units are event-time units
/// for event time and milliseconds for processing time.
struct WindowDescriptor {
  WindowKind kind = WindowKind::count;
  std::int64_t size = 1;
  std::int64_t slide = 1;

  void validate() const {
    if (kind == WindowKind::transaction) return;
    if (size <= 0) throw BuildError("window size must be positive");
    if (slide <= 0) throw BuildError("window slide must be positive");
  }
};

struct CountWindow {
  static WindowDescriptor tumbling(std::size_t n) { return {WindowKind::count, static_cast<std::int64_t>(n), static_cast<std::int64_t>(n)}; }
  static WindowDescriptor sliding(std::size_t size, std::size_t slide) {
    return {WindowKind::count, static_cast<std::int64_t>(size), static_cast<std::int64_t>(slide)};
  }
};

struct EventTimeWindow {
  static WindowDescriptor tumbling(Timestamp size) { return {WindowKind::event_time, size, size}; }
  static WindowDescriptor sliding(Timestamp size, Timestamp slide) { return {WindowKind::event_time, size, slide}; }
};

struct ProcessingTimeWindow {
  static WindowDescriptor tumbling(std::chrono::milliseconds size) {
    return {WindowKind::processing_time, size.count(), size.count()};
  }
  static WindowDescriptor sliding(std::chrono::milliseconds size, std::chrono::milliseconds slide) {
    return {WindowKind::processing_time, size.count(), slide.count()};
  }
};

/// Closes the current window after an item for which `commit` returns true.
template <class P>
struct TransactionWindow {
  P commit;
};
template <class P>
TransactionWindow(P) -> TransactionWindow<P>;

/// Window definition bound to the item type.
template <class V>
struct WindowSpec {
  WindowDescriptor desc;
  std::function<bool(const V&)> commit;
};

inline std::int64_t floor_div(std::int64_t a, std::int64_t b) {
  auto q = a / b;
  if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
  return q;
}

/// Inclusive range of window indices k with k*slide <= ts < k*slide + size.
/// Empty (first > last) when ts falls in a gap.
inline std::pair<std::int64_t, std::int64_t> time_windows_of(Timestamp ts, std::int64_t size, std::int64_t slide) {
  return {floor_div(ts - size, slide) + 1, floor_div(ts, slide)};
}

// Aggregators: incremental (init/step/finish) or full-window.

template <class V>
struct SumAgg {
  using Acc = V;
  using Out = V;
  Acc init() const { return V{}; }
  void step(Acc& a, const V& v) const { a += v; }
  Out finish(Acc&& a) const { return std::move(a); }
};

template <class V>
struct MaxAgg {
  using Acc = std::optional<V>;
  using Out = V;
  Acc init() const { return std::nullopt; }
  void step(Acc& a, const V& v) const {
    if (!a || *a < v) a = v;
  }
  Out finish(Acc&& a) const { return std::move(*a); }
};

template <class V>
struct CountAgg {
  using Acc = std::uint64_t;
  using Out = std::uint64_t;
  Acc init() const { return 0; }
  void step(Acc& a, const V&) const { ++a; }
  Out finish(Acc&& a) const { return a; }
};

template <class V, class A, class F>
struct FoldAgg {
  using Acc = A;
  using Out = A;
  A init_value;
  F f;
  Acc init() const { return init_value; }
  void step(Acc& a, const V& v) const { f(a, v); }
  Out finish(Acc&& a) const { return std::move(a); }
};

/// Full-window aggregate: buffers the window and hands it to `f` on close.
template <class V, class F>
struct ProcessAgg {
  using Acc = std::vector<V>;
  using Out = std::invoke_result_t<const F&, const std::vector<V>&>;
  F f;
  Acc init() const { return {}; }
  void step(Acc& a, const V& v) const { a.push_back(v); }
  Out finish(Acc&& a) const { return f(a); }
};

/// Per-key window state for one task. Emission goes through `emit(key, out, ts)`.
template <class K, class V, class Agg>
class WindowCore {
 public:
  using Acc = typename Agg::Acc;
  using Out = typename Agg::Out;

  WindowCore(WindowSpec<V> spec, Agg agg, JobStats* stats) : spec_(std::move(spec)), agg_(std::move(agg)), stats_(stats) {
    spec_.desc.validate();
  }

  WindowKind kind() const { return spec_.desc.kind; }

  template <class Emit>
  void item(K&& key, V&& v, MaybeTime ts, Clock::time_point now, Emit&& emit) {
    switch (spec_.desc.kind) {
      case WindowKind::count:
        count_item(std::move(key), v, ts, emit);
        break;
      case WindowKind::event_time:
        if (!ts) throw InvariantError("event-time window received an item without timestamp");
        if (*ts < frontier_) {
          stats_->late_items.fetch_add(1, std::memory_order_relaxed);
          return;
        }
        time_item(key, v, *ts);
        break;
      case WindowKind::processing_time: {
        if (!origin_) origin_ = now;
        auto t = elapsed_ms(now);
        close_time_windows(t, emit);
        time_item(key, v, t);
        break;
      }
      case WindowKind::transaction: {
        auto [it, fresh] = txn_.try_emplace(key, agg_.init());
        (void)fresh;
        agg_.step(it->second, v);
        if (spec_.commit(v)) {
          emit_one(key, std::exchange(it->second, agg_.init()), ts, emit);
          txn_.erase(it);
        }
        break;
      }
    }
  }

  /// Event time: closes windows whose end is at or before `frontier`.
  template <class Emit>
  void advance(Timestamp frontier, Emit&& emit) {
    if (frontier <= frontier_) return;
    frontier_ = frontier;
    if (spec_.desc.kind == WindowKind::event_time) close_time_windows(frontier, emit);
  }

  /// Processing time: closes windows whose end has passed on the task clock.
  template <class Emit>
  void tick(Clock::time_point now, Emit&& emit) {
    if (spec_.desc.kind != WindowKind::processing_time || !origin_) return;
    close_time_windows(elapsed_ms(now), emit);
  }

  /// End of input: time windows flush as if the frontier were +inf, tumbling
  /// count windows flush their partial tail, sliding tails are dropped.
  template <class Emit>
  void drain(Emit&& emit) {
    switch (spec_.desc.kind) {
      case WindowKind::count:
        if (spec_.desc.size == spec_.desc.slide) {
          for (auto& [k, st] : counts_)
            for (auto& w : st.open) emit_one(k, std::move(w.acc), w.last_ts, emit);
        }
        counts_.clear();
        break;
      case WindowKind::event_time:
      case WindowKind::processing_time:
        close_time_windows(kMaxTime, emit);
        break;
      case WindowKind::transaction:
        for (auto& [k, acc] : txn_) emit_one(k, std::move(acc), std::nullopt, emit);
        txn_.clear();
        break;
    }
  }

  std::size_t open_windows() const {
    std::size_t n = 0;
    for (const auto& [k, m] : time_) n += m.size();
    for (const auto& [k, st] : counts_) n += st.open.size();
    return n + txn_.size();
  }

 private:
  struct CountOpen {
    std::int64_t filled = 0;
    Acc acc;
    MaybeTime last_ts;
  };
  struct CountState {
    std::int64_t seen = 0;
    std::deque<CountOpen> open;
  };

  template <class Emit>
  void emit_one(const K& key, Acc&& acc, MaybeTime ts, Emit& emit) {
    stats_->windows_emitted.fetch_add(1, std::memory_order_relaxed);
    emit(key, agg_.finish(std::move(acc)), ts);
  }

  template <class Emit>
  void count_item(K&& key, const V& v, MaybeTime ts, Emit& emit) {
    auto it = counts_.find(key);
    if (it == counts_.end()) it = counts_.emplace(std::move(key), CountState{}).first;
    auto& st = it->second;
    if (st.seen % spec_.desc.slide == 0) st.open.push_back(CountOpen{0, agg_.init(), std::nullopt});
    ++st.seen;
    for (auto& w : st.open) {
      agg_.step(w.acc, v);
      ++w.filled;
      w.last_ts = ts;
    }
    while (!st.open.empty() && st.open.front().filled >= spec_.desc.size) {
      emit_one(it->first, std::move(st.open.front().acc), st.open.front().last_ts, emit);
      st.open.pop_front();
    }
  }

  void time_item(const K& key, const V& v, Timestamp t) {
    auto [first, last] = time_windows_of(t, spec_.desc.size, spec_.desc.slide);
    for (auto k = first; k <= last; ++k) {
      auto& bucket = time_[k];
      auto it = bucket.find(key);
      if (it == bucket.end()) it = bucket.emplace(key, agg_.init()).first;
      agg_.step(it->second, v);
    }
  }

  template <class Emit>
  void close_time_windows(Timestamp upto, Emit& emit) {
    while (!time_.empty()) {
      auto it = time_.begin();
      Timestamp end = it->first * spec_.desc.slide + spec_.desc.size;
      if (end > upto) break;
      MaybeTime out_ts;
      if (spec_.desc.kind == WindowKind::event_time) out_ts = end - 1;
      for (auto& [k, acc] : it->second) emit_one(k, std::move(acc), out_ts, emit);
      time_.erase(it);
    }
  }

  Timestamp elapsed_ms(Clock::time_point now) const {
    return std::chrono::duration_cast<std::chrono::milliseconds>(now - *origin_).count();
  }

  WindowSpec<V> spec_;
  Agg agg_;
  JobStats* stats_;
  Timestamp frontier_ = kMinTime;
  std::optional<Clock::time_point> origin_;
  std::map<std::int64_t, std::unordered_map<K, Acc, KeyHasher<K>>> time_;
  std::unordered_map<K, CountState, KeyHasher<K>> counts_;
  std::unordered_map<K, Acc, KeyHasher<K>> txn_;
};

/// Window over a keyed stream; outputs (key, aggregate).
template <class K, class V, class Agg>
class KeyedWindowOp final : public Collector<std::pair<K, V>> {
 public:
  using Out = std::pair<K, typename Agg::Out>;

  KeyedWindowOp(std::size_t id, WindowSpec<V> spec, Agg agg, TaskEnv& env, CollectorPtr<Out> next)
      : id_(id), core_(std::move(spec), std::move(agg), env.stats), next_(std::move(next)) {
    if (core_.kind() == WindowKind::processing_time)
      env.tickers.push_back([this](Clock::time_point now) { guarded(id_, [&] { core_.tick(now, emitter()); }); });
  }

  void push(std::pair<K, V>&& x, MaybeTime ts) override {
    auto now = core_.kind() == WindowKind::processing_time ? Clock::now() : Clock::time_point{};
    guarded(id_, [&] { core_.item(std::move(x.first), std::move(x.second), ts, now, emitter()); });
  }
  void watermark(Timestamp t) override {
    guarded(id_, [&] { core_.advance(t, emitter()); });
    next_->watermark(t);
  }
  void flush() override { next_->flush(); }
  void iteration_end(std::uint32_t e) override {
    guarded(id_, [&] { core_.drain(emitter()); });
    next_->iteration_end(e);
  }
  void end() override {
    guarded(id_, [&] { core_.drain(emitter()); });
    next_->end();
  }

 private:
  auto emitter() {
    return [this](const K& k, typename Agg::Out&& v, MaybeTime ts) { next_->push(Out(k, std::move(v)), ts); };
  }

  std::size_t id_;
  WindowCore<K, V, Agg> core_;
  CollectorPtr<Out> next_;
};

/// Window over a whole (non-keyed) stream; runs on a single replica.
template <class V, class Agg>
class AllWindowOp final : public Collector<V> {
 public:
  using Out = typename Agg::Out;

  AllWindowOp(std::size_t id, WindowSpec<V> spec, Agg agg, TaskEnv& env, CollectorPtr<Out> next)
      : id_(id), core_(std::move(spec), std::move(agg), env.stats), next_(std::move(next)) {
    if (core_.kind() == WindowKind::processing_time)
      env.tickers.push_back([this](Clock::time_point now) { guarded(id_, [&] { core_.tick(now, emitter()); }); });
  }

  void push(V&& x, MaybeTime ts) override {
    auto now = core_.kind() == WindowKind::processing_time ? Clock::now() : Clock::time_point{};
    guarded(id_, [&] { core_.item(std::monostate{}, std::move(x), ts, now, emitter()); });
  }
  void watermark(Timestamp t) override {
    guarded(id_, [&] { core_.advance(t, emitter()); });
    next_->watermark(t);
  }
  void flush() override { next_->flush(); }
  void iteration_end(std::uint32_t e) override {
    guarded(id_, [&] { core_.drain(emitter()); });
    next_->iteration_end(e);
  }
  void end() override {
    guarded(id_, [&] { core_.drain(emitter()); });
    next_->end();
  }

 private:
  auto emitter() {
    return [this](const std::monostate&, Out&& v, MaybeTime ts) { next_->push(std::move(v), ts); };
  }

  std::size_t id_;
  WindowCore<std::monostate, V, Agg> core_;
  CollectorPtr<Out> next_;
};

}  // namespace flow
