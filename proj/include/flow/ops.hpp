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
#include <deque>
#include <fstream>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "flow/hash.hpp"
#include "flow/node.hpp"

namespace flow {

// Stateless and per-replica stateful elementwise operators.

template <class In, class Out, class F>
class MapOp final : public ChainOp<In, Out> {
 public:
  MapOp(std::size_t id, F f, CollectorPtr<Out> next) : ChainOp<In, Out>(id, std::move(next)), f_(std::move(f)) {}
  void push(In&& x, MaybeTime ts) override {
    this->next_->push(guarded(this->op_id_, [&] { return static_cast<Out>(f_(std::move(x))); }), ts);
  }

 private:
  F f_;
};

template <class In, class Out, class F>
class FlatMapOp final : public ChainOp<In, Out> {
 public:
  FlatMapOp(std::size_t id, F f, CollectorPtr<Out> next) : ChainOp<In, Out>(id, std::move(next)), f_(std::move(f)) {}
  void push(In&& x, MaybeTime ts) override {
    auto out = guarded(this->op_id_, [&] { return f_(std::move(x)); });
    for (auto& y : out) this->next_->push(Out(std::move(y)), ts);
  }

 private:
  F f_;
};

template <class T, class F>
class FilterOp final : public ChainOp<T, T> {
 public:
  FilterOp(std::size_t id, F f, CollectorPtr<T> next) : ChainOp<T, T>(id, std::move(next)), f_(std::move(f)) {}
  void push(T&& x, MaybeTime ts) override {
    if (guarded(this->op_id_, [&] { return static_cast<bool>(f_(std::as_const(x))); })) this->next_->push(std::move(x), ts);
  }

 private:
  F f_;
};

template <class In, class Out, class S, class F>
class RichMapOp final : public ChainOp<In, Out> {
 public:
  RichMapOp(std::size_t id, S init, F f, CollectorPtr<Out> next)
      : ChainOp<In, Out>(id, std::move(next)), state_(std::move(init)), f_(std::move(f)) {}
  void push(In&& x, MaybeTime ts) override {
    this->next_->push(guarded(this->op_id_, [&] { return static_cast<Out>(f_(state_, std::move(x))); }), ts);
  }

 private:
  S state_;
  F f_;
};

template <class T>
class IdentityOp final : public ChainOp<T, T> {
 public:
  using ChainOp<T, T>::ChainOp;
  void push(T&& x, MaybeTime ts) override { this->next_->push(std::move(x), ts); }
};

/// Pairs each item with its event timestamp.
template <class T>
class WithTimestampOp final : public ChainOp<T, std::pair<Timestamp, T>> {
 public:
  using ChainOp<T, std::pair<Timestamp, T>>::ChainOp;
  void push(T&& x, MaybeTime ts) override {
    if (!ts) throw InvariantError("with_timestamp on an item without timestamp");
    this->next_->push(std::pair<Timestamp, T>(*ts, std::move(x)), ts);
  }
};

/// Attaches event timestamps; drops items older than this replica's last watermark.
template <class T, class TsFn, class WmFn>
class AddTimestampsOp final : public ChainOp<T, T> {
 public:
  AddTimestampsOp(std::size_t id, TsFn ts_fn, WmFn wm_fn, JobStats* stats, CollectorPtr<T> next)
      : ChainOp<T, T>(id, std::move(next)), ts_fn_(std::move(ts_fn)), wm_fn_(std::move(wm_fn)), stats_(stats) {}

  void push(T&& x, MaybeTime) override {
    Timestamp ts = guarded(this->op_id_, [&] { return static_cast<Timestamp>(ts_fn_(std::as_const(x))); });
    if (ts < last_wm_) {
      stats_->late_items.fetch_add(1, std::memory_order_relaxed);
      return;
    }
    std::optional<Timestamp> wm = guarded(this->op_id_, [&] { return wm_fn_(std::as_const(x), ts); });
    this->next_->push(std::move(x), ts);
    if (wm && *wm > last_wm_) {
      last_wm_ = *wm;
      this->next_->watermark(*wm);
    }
  }

  // Upstream watermarks are replaced by the ones generated here.
  void watermark(Timestamp) override {}

 private:
  TsFn ts_fn_;
  WmFn wm_fn_;
  JobStats* stats_;
  Timestamp last_wm_ = kMinTime;
};

// Folds. Each emits its accumulator when the input ends and at every
// iteration boundary (then starts over from the initial value).

template <class In, class Acc, class F>
class FoldOp final : public ChainOp<In, Acc> {
 public:
  FoldOp(std::size_t id, Acc init, F f, CollectorPtr<Acc> next)
      : ChainOp<In, Acc>(id, std::move(next)), init_(init), acc_(std::move(init)), f_(std::move(f)) {}

  void push(In&& x, MaybeTime) override {
    guarded(this->op_id_, [&] { f_(acc_, std::move(x)); });
  }
  void iteration_end(std::uint32_t e) override {
    emit();
    this->next_->iteration_end(e);
  }
  void end() override {
    emit();
    this->next_->end();
  }

 private:
  void emit() {
    this->next_->push(std::exchange(acc_, init_), std::nullopt);
  }

  Acc init_;
  Acc acc_;
  F f_;
};

/// Reduce: like fold without an identity, so empty input emits nothing.
template <class T, class F>
class ReduceOp final : public ChainOp<T, T> {
 public:
  ReduceOp(std::size_t id, F f, CollectorPtr<T> next) : ChainOp<T, T>(id, std::move(next)), f_(std::move(f)) {}

  void push(T&& x, MaybeTime) override {
    if (!acc_) {
      acc_.emplace(std::move(x));
      return;
    }
    guarded(this->op_id_, [&] { *acc_ = static_cast<T>(f_(std::move(*acc_), std::move(x))); });
  }
  void iteration_end(std::uint32_t e) override {
    emit();
    this->next_->iteration_end(e);
  }
  void end() override {
    emit();
    this->next_->end();
  }

 private:
  void emit() {
    if (acc_) {
      this->next_->push(std::move(*acc_), std::nullopt);
      acc_.reset();
    }
  }

  std::optional<T> acc_;
  F f_;
};

template <class K, class V, class Acc, class F>
class KeyedFoldOp final : public ChainOp<std::pair<K, V>, std::pair<K, Acc>> {
 public:
  KeyedFoldOp(std::size_t id, Acc init, F f, CollectorPtr<std::pair<K, Acc>> next)
      : ChainOp<std::pair<K, V>, std::pair<K, Acc>>(id, std::move(next)), init_(std::move(init)), f_(std::move(f)) {}

  void push(std::pair<K, V>&& x, MaybeTime) override {
    auto it = accs_.find(x.first);
    if (it == accs_.end()) it = accs_.emplace(std::move(x.first), init_).first;
    guarded(this->op_id_, [&] { f_(it->second, std::move(x.second)); });
  }
  void iteration_end(std::uint32_t e) override {
    emit();
    this->next_->iteration_end(e);
  }
  void end() override {
    emit();
    this->next_->end();
  }

 private:
  void emit() {
    for (auto& [k, a] : accs_) this->next_->push(std::pair<K, Acc>(k, std::move(a)), std::nullopt);
    accs_.clear();
  }

  Acc init_;
  F f_;
  std::unordered_map<K, Acc, KeyHasher<K>> accs_;
};

template <class K, class V, class F>
class KeyedReduceOp final : public ChainOp<std::pair<K, V>, std::pair<K, V>> {
 public:
  KeyedReduceOp(std::size_t id, F f, CollectorPtr<std::pair<K, V>> next)
      : ChainOp<std::pair<K, V>, std::pair<K, V>>(id, std::move(next)), f_(std::move(f)) {}

  void push(std::pair<K, V>&& x, MaybeTime) override {
    auto it = accs_.find(x.first);
    if (it == accs_.end()) {
      accs_.emplace(std::move(x.first), std::move(x.second));
      return;
    }
    guarded(this->op_id_, [&] { it->second = static_cast<V>(f_(std::move(it->second), std::move(x.second))); });
  }
  void iteration_end(std::uint32_t e) override {
    emit();
    this->next_->iteration_end(e);
  }
  void end() override {
    emit();
    this->next_->end();
  }

 private:
  void emit() {
    for (auto& [k, v] : accs_) this->next_->push(std::pair<K, V>(k, std::move(v)), std::nullopt);
    accs_.clear();
  }

  F f_;
  std::unordered_map<K, V, KeyHasher<K>> accs_;
};

/// Copies every message to each of its outputs.
template <class T>
class SplitOp final : public Collector<T> {
 public:
  explicit SplitOp(std::vector<CollectorPtr<T>> outs) : outs_(std::move(outs)) {}

  void push(T&& x, MaybeTime ts) override {
    for (std::size_t i = 0; i + 1 < outs_.size(); ++i) outs_[i]->push(T(x), ts);
    outs_.back()->push(std::move(x), ts);
  }
  void watermark(Timestamp t) override {
    for (auto& o : outs_) o->watermark(t);
  }
  void flush() override {
    for (auto& o : outs_) o->flush();
  }
  void iteration_end(std::uint32_t e) override {
    for (auto& o : outs_) o->iteration_end(e);
  }
  void end() override {
    for (auto& o : outs_) o->end();
  }

 private:
  std::vector<CollectorPtr<T>> outs_;
};

// Multi-input operators. Each input port gets a PortAdapter forwarding to the
// owning operator; the task delivers the input frontier through port 0.

template <std::size_t P, class W, class Owner>
class PortAdapter final : public Collector<W> {
 public:
  explicit PortAdapter(std::shared_ptr<Owner> owner) : owner_(std::move(owner)) {}
  void push(W&& x, MaybeTime ts) override { owner_->template on_item<P>(std::move(x), ts); }
  void watermark(Timestamp t) override { owner_->on_watermark(t); }
  void flush() override { owner_->on_flush(); }
  void iteration_end(std::uint32_t e) override { owner_->on_iteration_end(P, e); }
  void end() override { owner_->on_end(P); }

 private:
  std::shared_ptr<Owner> owner_;
};

/// Counts per-port control events and fires once every port has reported.
class PortBarrier {
 public:
  explicit PortBarrier(std::size_t ports) : ended_(ports, false), iter_(ports, 0) {}

  bool end(std::size_t p) {
    ended_[p] = true;
    return std::all_of(ended_.begin(), ended_.end(), [](bool b) { return b; });
  }
  bool iteration_end(std::size_t p, std::uint32_t e) {
    iter_[p] = e;
    return std::all_of(iter_.begin(), iter_.end(), [&](std::uint32_t x) { return x == e; });
  }

 private:
  std::vector<bool> ended_;
  std::vector<std::uint32_t> iter_;
};

template <class T>
class MergeOp final {
 public:
  explicit MergeOp(CollectorPtr<T> next) : next_(std::move(next)) {}

  template <std::size_t P>
  void on_item(T&& x, MaybeTime ts) {
    next_->push(std::move(x), ts);
  }
  void on_watermark(Timestamp t) { next_->watermark(t); }
  void on_flush() { next_->flush(); }
  void on_iteration_end(std::size_t p, std::uint32_t e) {
    if (barrier_.iteration_end(p, e)) next_->iteration_end(e);
  }
  void on_end(std::size_t p) {
    if (barrier_.end(p)) next_->end();
  }

 private:
  CollectorPtr<T> next_;
  PortBarrier barrier_{2};
};

/// Pairs the i-th item of each input in arrival order; runs on one replica.
template <class A, class B>
class ZipOp final {
 public:
  explicit ZipOp(CollectorPtr<std::pair<A, B>> next) : next_(std::move(next)) {}

  template <std::size_t P>
  void on_item(std::conditional_t<P == 0, A, B>&& x, MaybeTime) {
    if constexpr (P == 0) {
      if (b_.empty()) {
        if (!b_ended_) a_.push_back(std::move(x));
        return;
      }
      next_->push(std::pair<A, B>(std::move(x), std::move(b_.front())), std::nullopt);
      b_.pop_front();
    } else {
      if (a_.empty()) {
        if (!a_ended_) b_.push_back(std::move(x));
        return;
      }
      next_->push(std::pair<A, B>(std::move(a_.front()), std::move(x)), std::nullopt);
      a_.pop_front();
    }
  }
  void on_watermark(Timestamp t) { next_->watermark(t); }
  void on_flush() { next_->flush(); }
  void on_iteration_end(std::size_t p, std::uint32_t e) {
    if (barrier_.iteration_end(p, e)) {
      a_.clear();
      b_.clear();
      next_->iteration_end(e);
    }
  }
  void on_end(std::size_t p) {
    (p == 0 ? a_ended_ : b_ended_) = true;
    if (p == 0) b_.clear();
    else a_.clear();
    if (barrier_.end(p)) next_->end();
  }

 private:
  CollectorPtr<std::pair<A, B>> next_;
  std::deque<A> a_;
  std::deque<B> b_;
  bool a_ended_ = false;
  bool b_ended_ = false;
  PortBarrier barrier_{2};
};

enum class JoinKind { inner, left, outer };

template <class A, class B, JoinKind J>
struct JoinValue;
template <class A, class B>
struct JoinValue<A, B, JoinKind::inner> {
  using type = std::pair<A, B>;
};
template <class A, class B>
struct JoinValue<A, B, JoinKind::left> {
  using type = std::pair<A, std::optional<B>>;
};
template <class A, class B>
struct JoinValue<A, B, JoinKind::outer> {
  using type = std::pair<std::optional<A>, std::optional<B>>;
};
template <class A, class B, JoinKind J>
using JoinValueT = typename JoinValue<A, B, J>::type;

/// Hash join over fully received, key-partitioned inputs. The smaller side
/// is the build side; output pairs are keyed by the join key.
template <class K, class A, class B, JoinKind J>
class JoinOp final {
 public:
  using Out = std::pair<K, JoinValueT<A, B, J>>;

  explicit JoinOp(CollectorPtr<Out> next) : next_(std::move(next)) {}

  template <std::size_t P>
  void on_item(std::conditional_t<P == 0, std::pair<K, A>, std::pair<K, B>>&& x, MaybeTime) {
    if constexpr (P == 0) left_.push_back(std::move(x));
    else right_.push_back(std::move(x));
  }
  void on_watermark(Timestamp t) { next_->watermark(t); }
  void on_flush() { next_->flush(); }
  void on_iteration_end(std::size_t p, std::uint32_t e) {
    if (barrier_.iteration_end(p, e)) {
      run();
      next_->iteration_end(e);
    }
  }
  void on_end(std::size_t p) {
    if (barrier_.end(p)) {
      run();
      next_->end();
    }
  }

 private:
  void run() {
    if (left_.size() <= right_.size() && J == JoinKind::inner) {
      probe_with_left_build();
    } else {
      probe_with_right_build();
    }
    left_.clear();
    right_.clear();
  }

  void emit(const K& k, JoinValueT<A, B, J>&& v) { next_->push(Out(k, std::move(v)), std::nullopt); }

  // Build on the left, probe with the right (inner joins only).
  void probe_with_left_build() {
    std::unordered_multimap<K, std::size_t, KeyHasher<K>> index;
    index.reserve(left_.size());
    for (std::size_t i = 0; i < left_.size(); ++i) index.emplace(left_[i].first, i);
    for (auto& [k, b] : right_) {
      auto [lo, hi] = index.equal_range(k);
      for (auto it = lo; it != hi; ++it) emit(k, JoinValueT<A, B, J>(left_[it->second].second, b));
    }
  }

  void probe_with_right_build() {
    std::unordered_multimap<K, std::size_t, KeyHasher<K>> index;
    index.reserve(right_.size());
    for (std::size_t i = 0; i < right_.size(); ++i) index.emplace(right_[i].first, i);
    std::vector<bool> right_matched(right_.size(), false);
    for (auto& [k, a] : left_) {
      auto [lo, hi] = index.equal_range(k);
      if (lo == hi) {
        if constexpr (J == JoinKind::left) emit(k, JoinValueT<A, B, J>(a, std::nullopt));
        if constexpr (J == JoinKind::outer) emit(k, JoinValueT<A, B, J>(a, std::nullopt));
        continue;
      }
      for (auto it = lo; it != hi; ++it) {
        right_matched[it->second] = true;
        emit(k, JoinValueT<A, B, J>(a, right_[it->second].second));
      }
    }
    if constexpr (J == JoinKind::outer) {
      for (std::size_t i = 0; i < right_.size(); ++i)
        if (!right_matched[i]) emit(right_[i].first, JoinValueT<A, B, J>(std::nullopt, right_[i].second));
    }
  }

  CollectorPtr<Out> next_;
  std::vector<std::pair<K, A>> left_;
  std::vector<std::pair<K, B>> right_;
  PortBarrier barrier_{2};
};

// Sinks.

template <class T, class F>
class ForEachOp final : public Collector<T> {
 public:
  ForEachOp(std::size_t id, F f) : id_(id), f_(std::move(f)) {}
  void push(T&& x, MaybeTime) override {
    guarded(id_, [&] { f_(std::move(x)); });
  }
  void watermark(Timestamp) override {}
  void flush() override {}
  void iteration_end(std::uint32_t) override {}
  void end() override {}

 private:
  std::size_t id_;
  F f_;
};

/// Shared result of a collect sink. Filled in the process running the sink's
/// single replica (host 0); other processes see nullopt.
template <class T>
class CollectState {
 public:
  void deliver(std::vector<T> items) {
    std::lock_guard lock(mu_);
    value_ = std::move(items);
  }

  void finish(bool ok) {
    {
      std::lock_guard lock(mu_);
      done_ = true;
      ok_ = ok;
    }
    cv_.notify_all();
  }

  void reset() {
    std::lock_guard lock(mu_);
    done_ = false;
    ok_ = false;
    value_.reset();
  }

  /// Blocks until the job completes. The reference stays valid until the next run.
  const std::optional<std::vector<T>>& get() {
    std::unique_lock lock(mu_);
    cv_.wait(lock, [&] { return done_; });
    if (!ok_) throw JobError("collect result unavailable: job failed");
    return value_;
  }

 private:
  std::mutex mu_;
  std::condition_variable cv_;
  std::optional<std::vector<T>> value_;
  bool done_ = false;
  bool ok_ = false;
};

template <class T>
class CollectOp final : public Collector<T> {
 public:
  explicit CollectOp(std::shared_ptr<CollectState<T>> state) : state_(std::move(state)) {}
  void push(T&& x, MaybeTime) override { items_.push_back(std::move(x)); }
  void watermark(Timestamp) override {}
  void flush() override {}
  void iteration_end(std::uint32_t) override {}
  void end() override { state_->deliver(std::move(items_)); }

 private:
  std::shared_ptr<CollectState<T>> state_;
  std::vector<T> items_;
};

template <class T>
class ChannelSinkOp final : public Collector<T> {
 public:
  explicit ChannelSinkOp(std::shared_ptr<ItemChannel<T>> ch) : ch_(std::move(ch)) {}
  void push(T&& x, MaybeTime) override { ch_->send(std::move(x)); }
  void watermark(Timestamp) override {}
  void flush() override {}
  void iteration_end(std::uint32_t) override {}
  void end() override { ch_->producer_done(); }

 private:
  std::shared_ptr<ItemChannel<T>> ch_;
};

// Sources.

/// Pushes items from `next()` until it returns nullopt or the job stops.
template <class T, class Next>
void drive_source(TaskEnv& env, Collector<T>& out, std::size_t op_id, Next&& next) {
  std::size_t n = 0;
  while (!env.should_stop()) {
    std::optional<T> x = guarded(op_id, [&] { return std::optional<T>(next()); });
    if (!x) break;
    out.push(std::move(*x), std::nullopt);
    if ((++n & 255) == 0) env.poll_timers(Clock::now());
  }
  env.check_aborted();
  out.end();
}

/// Adapts a range (held by value) into a `next()` callable.
template <class R>
auto range_cursor(R range) {
  using T = std::decay_t<decltype(*std::begin(range))>;
  struct Cursor {
    std::shared_ptr<R> r;
    decltype(std::begin(*r)) it;
    std::optional<T> operator()() {
      if (it == std::end(*r)) return std::nullopt;
      T v = *it;
      ++it;
      return v;
    }
  };
  auto holder = std::make_shared<R>(std::move(range));
  auto it = std::begin(*holder);
  return Cursor{holder, it};
}

/// Lines whose first byte lies in [begin, end) of the file.
class LineChunkReader {
 public:
  LineChunkReader(const std::string& path, std::size_t replica, std::size_t replicas) : in_(path, std::ios::binary) {
    if (!in_) throw JobError("cannot open " + path);
    in_.seekg(0, std::ios::end);
    auto size = static_cast<std::size_t>(in_.tellg());
    begin_ = size * replica / replicas;
    end_ = size * (replica + 1) / replicas;
    pos_ = begin_;
    in_.seekg(static_cast<std::streamoff>(begin_));
    if (begin_ > 0) {
      // The line in progress at `begin_` belongs to the previous chunk.
      in_.seekg(static_cast<std::streamoff>(begin_ - 1));
      char c = 0;
      in_.get(c);
      if (c != '\n') {
        std::string skip;
        std::getline(in_, skip);
        pos_ = begin_ + skip.size() + 1;
      }
    }
  }

  std::optional<std::string> operator()() {
    if (pos_ >= end_ || !in_) return std::nullopt;
    std::string line;
    if (!std::getline(in_, line)) return std::nullopt;
    pos_ += line.size() + 1;
    return line;
  }

 private:
  std::ifstream in_;
  std::size_t begin_ = 0;
  std::size_t end_ = 0;
  std::size_t pos_ = 0;
};

}  // namespace flow
