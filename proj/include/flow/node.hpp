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
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <typeinfo>
#include <vector>

#include "flow/batching.hpp"
#include "flow/channel.hpp"
#include "flow/error.hpp"
#include "flow/hash.hpp"
#include "flow/message.hpp"
#include "flow/planner.hpp"
#include "flow/stats.hpp"
#include "flow/util.hpp"

namespace flow {

/// Control half of a collector, callable without knowing the item type.
class AnyCollector {
 public:
  virtual ~AnyCollector() = default;
  virtual void watermark(Timestamp t) = 0;
  virtual void flush() = 0;
  virtual void iteration_end(std::uint32_t epoch) = 0;
  virtual void end() = 0;
};

/// Push-based consumer of a typed stream. Operators of a fused stage are
/// chained through collectors; the last one is a Router.
template <class T>
class Collector : public AnyCollector {
 public:
  virtual void push(T&& item, MaybeTime ts) = 0;
};

template <class T>
using CollectorPtr = std::shared_ptr<Collector<T>>;

template <class T>
CollectorPtr<T> as_collector(const std::shared_ptr<AnyCollector>& c) {
  auto typed = std::dynamic_pointer_cast<Collector<T>>(c);
  if (!typed) throw InvariantError(std::string("collector type mismatch, expected ") + typeid(T).name());
  return typed;
}

/// Runs `fn`, attributing any non-engine exception to operator `op`.
template <class F>
decltype(auto) guarded(std::size_t op, F&& fn) {
  try {
    return fn();
  } catch (const OperatorError&) {
    throw;
  } catch (const JobAborted&) {
    throw;
  } catch (const InvariantError&) {
    throw;
  } catch (const std::exception& e) {
    throw OperatorError(op, e.what());
  } catch (...) {
    throw OperatorError(op, "unknown exception");
  }
}

/// Operator with one input and one downstream collector; control messages
/// pass through unless overridden.
template <class In, class Out>
class ChainOp : public Collector<In> {
 public:
  ChainOp(std::size_t op_id, CollectorPtr<Out> next) : op_id_(op_id), next_(std::move(next)) {}

  void watermark(Timestamp t) override { next_->watermark(t); }
  void flush() override { next_->flush(); }
  void iteration_end(std::uint32_t epoch) override { next_->iteration_end(epoch); }
  void end() override { next_->end(); }

 protected:
  std::size_t op_id_;
  CollectorPtr<Out> next_;
};

/// Destination of batches produced by one router for one receiver replica.
class Outbox {
 public:
  virtual ~Outbox() = default;
  virtual void send(std::unique_ptr<AnyBatch> batch) = 0;
};

class InMemoryOutbox final : public Outbox {
 public:
  InMemoryOutbox(TaskQueue* queue, std::size_t channel) : queue_(queue), channel_(channel) {}
  void send(std::unique_ptr<AnyBatch> batch) override { queue_->push(Envelope{channel_, std::move(batch)}); }

 private:
  TaskQueue* queue_;
  std::size_t channel_;
};

/// Something holding buffered output with a flush deadline.
class TimedFlusher {
 public:
  virtual ~TimedFlusher() = default;
  virtual std::optional<Clock::time_point> deadline() const = 0;
  virtual void poll(Clock::time_point now) = 0;
};

/// Per-task execution context handed to operators while a stage is built and run.
struct TaskEnv {
  Coord coord;
  std::size_t replica = 0;
  std::size_t replicas = 1;
  BatchingPolicy batching;
  JobStats* stats = nullptr;
  const std::atomic<bool>* stop_requested = nullptr;
  const std::atomic<bool>* aborted = nullptr;
  const ExecutionPlan* plan = nullptr;
  std::vector<TimedFlusher*> timed;
  std::vector<std::function<void(Clock::time_point)>> tickers;

  bool should_stop() const {
    return (stop_requested && stop_requested->load(std::memory_order_relaxed)) ||
           (aborted && aborted->load(std::memory_order_relaxed));
  }
  void check_aborted() const {
    if (aborted && aborted->load(std::memory_order_relaxed)) throw JobAborted();
  }

  std::optional<Clock::time_point> next_deadline() const {
    std::optional<Clock::time_point> d;
    for (auto* t : timed)
      if (auto td = t->deadline(); td && (!d || *td < *d)) d = td;
    return d;
  }

  void poll_timers(Clock::time_point now) {
    for (auto* t : timed) t->poll(now);
    for (auto& tick : tickers) tick(now);
  }
};

struct RouterSpec {
  EdgeKind kind = EdgeKind::one_to_one;
  /// Indexed by receiver replica; one-to-one edges hold a single entry.
  std::vector<std::shared_ptr<Outbox>> dests;
  std::uint32_t initial_epoch = 0;
  TaskEnv* env = nullptr;
  std::size_t sender_replica = 0;
};

/// Last collector of a stage: picks destinations, batches and sends.
template <class W>
class Router final : public Collector<W>, public TimedFlusher {
 public:
  explicit Router(RouterSpec spec) : spec_(std::move(spec)), policy_(spec_.env->batching) {
    auto now = Clock::now();
    batchers_.reserve(spec_.dests.size());
    for (std::size_t i = 0; i < spec_.dests.size(); ++i) {
      batchers_.emplace_back(policy_, now);
      batchers_.back().set_epoch(spec_.initial_epoch);
    }
    if (!spec_.dests.empty()) rr_ = spec_.sender_replica % spec_.dests.size();
  }

  void push(W&& item, MaybeTime ts) override {
    const auto n = batchers_.size();
    switch (spec_.kind) {
      case EdgeKind::one_to_one:
        send_to(0, make_message(std::move(item), ts));
        break;
      case EdgeKind::round_robin: {
        auto d = rr_;
        rr_ = rr_ + 1 == n ? 0 : rr_ + 1;
        send_to(d, make_message(std::move(item), ts));
        break;
      }
      case EdgeKind::keyed:
        if constexpr (is_pair_v<W>) {
          send_to(replica_for_hash(key_hash(item.first), n), make_message(std::move(item), ts));
        } else {
          throw InvariantError("keyed routing of an unkeyed item");
        }
        break;
      case EdgeKind::broadcast:
        for (std::size_t d = 0; d + 1 < n; ++d) send_to(d, make_message(W(item), ts));
        send_to(n - 1, make_message(std::move(item), ts));
        break;
    }
  }

  void watermark(Timestamp t) override {
    if (t < last_watermark_) {
      spec_.env->stats->watermark_regressions.fetch_add(1, std::memory_order_relaxed);
      return;
    }
    if (t == last_watermark_) return;
    last_watermark_ = t;
    for (std::size_t d = 0; d < batchers_.size(); ++d) send_to(d, Watermark{t});
  }

  void flush() override {
    for (std::size_t d = 0; d < batchers_.size(); ++d) send_to(d, FlushBatch{});
  }

  void iteration_end(std::uint32_t epoch) override {
    for (std::size_t d = 0; d < batchers_.size(); ++d) {
      send_to(d, IterationEnd{epoch});
      batchers_[d].set_epoch(epoch + 1);
    }
  }

  void end() override {
    if (ended_) throw InvariantError("router terminated twice");
    ended_ = true;
    for (std::size_t d = 0; d < batchers_.size(); ++d) send_to(d, Terminate{});
  }

  std::optional<Clock::time_point> deadline() const override {
    std::optional<Clock::time_point> out;
    for (const auto& b : batchers_)
      if (auto d = b.deadline(); d && (!out || *d < *out)) out = d;
    return out;
  }

  void poll(Clock::time_point now) override {
    for (std::size_t d = 0; d < batchers_.size(); ++d)
      if (auto e = batchers_[d].poll(now)) deliver(d, std::move(*e));
  }

  std::size_t destinations() const { return batchers_.size(); }

 private:
  static StreamMessage<W> make_message(W&& item, MaybeTime ts) {
    if (ts) return TimestampedItem<W>{std::move(item), *ts};
    return Item<W>{std::move(item)};
  }

  void send_to(std::size_t d, StreamMessage<W> msg) {
    if (ended_ && !std::holds_alternative<Terminate>(msg)) throw InvariantError("message after terminate");
    if (auto e = batchers_[d].push(std::move(msg))) deliver(d, std::move(*e));
  }

  void deliver(std::size_t d, Emitted<W> e) {
    spec_.env->stats->record_flush(e.reason, e.batch.data_count(), policy_);
    spec_.dests[d]->send(std::make_unique<TypedBatch<W>>(std::move(e.batch)));
  }

  RouterSpec spec_;
  BatchingPolicy policy_;
  std::vector<Batcher<W>> batchers_;
  std::size_t rr_ = 0;
  Timestamp last_watermark_ = kMinTime;
  bool ended_ = false;
};

/// Receives the control messages of a task's input channels.
class InputHandler {
 public:
  virtual ~InputHandler() = default;
  virtual void on_batch_header(std::size_t channel, std::uint32_t seq, std::uint32_t epoch) = 0;
  virtual void on_watermark(std::size_t channel, Timestamp t) = 0;
  virtual void on_flush() = 0;
  virtual void on_terminate(std::size_t channel) = 0;
  virtual void on_iteration_end(std::size_t channel, std::uint32_t epoch) = 0;
};

/// Type-erased handling of the wire type of one input port.
struct PortType {
  std::unique_ptr<AnyBatch> (*decode)(Reader&);
  std::size_t (*deliver)(AnyBatch&, AnyCollector&, std::size_t channel, InputHandler&);
};

template <class W>
const PortType& port_type() {
  static const PortType t{
      [](Reader& r) -> std::unique_ptr<AnyBatch> {
        return std::make_unique<TypedBatch<W>>(Codec<Batch<W>>::decode(r));
      },
      [](AnyBatch& any, AnyCollector& c, std::size_t ch, InputHandler& h) -> std::size_t {
        auto& batch = static_cast<TypedBatch<W>&>(any).batch;
        auto& col = static_cast<Collector<W>&>(c);
        h.on_batch_header(ch, batch.seq, batch.epoch);
        std::size_t items = 0;
        for (auto& m : batch.messages) {
          switch (m.index()) {
            case 0:
              ++items;
              col.push(std::move(std::get<0>(m).value), std::nullopt);
              break;
            case 1: {
              ++items;
              auto& ti = std::get<1>(m);
              col.push(std::move(ti.value), ti.ts);
              break;
            }
            case 2:
              h.on_watermark(ch, std::get<2>(m).ts);
              break;
            case 3:
              h.on_flush();
              break;
            case 4:
              h.on_terminate(ch);
              break;
            case 5:
              h.on_iteration_end(ch, std::get<5>(m).epoch);
              break;
          }
        }
        return items;
      }};
  return t;
}

/// Input port of a node: wire type plus the sender-side router factory.
struct PortInfo {
  const PortType* type = nullptr;
  std::function<std::shared_ptr<AnyCollector>(RouterSpec)> make_router;
};

template <class T>
PortInfo plain_port() {
  return PortInfo{&port_type<T>(), [](RouterSpec spec) -> std::shared_ptr<AnyCollector> {
                    auto* env = spec.env;
                    auto r = std::make_shared<Router<T>>(std::move(spec));
                    env->timed.push_back(r.get());
                    return r;
                  }};
}

/// Computes the key on the sending side and routes `pair<K, T>` by its hash.
template <class T, class K, class KeyFn>
class KeyingRouter final : public Collector<T> {
 public:
  KeyingRouter(std::size_t op_id, KeyFn key_fn, CollectorPtr<std::pair<K, T>> next)
      : op_id_(op_id), key_fn_(std::move(key_fn)), next_(std::move(next)) {}

  void push(T&& item, MaybeTime ts) override {
    K key = guarded(op_id_, [&] { return static_cast<K>(key_fn_(std::as_const(item))); });
    next_->push(std::pair<K, T>(std::move(key), std::move(item)), ts);
  }
  void watermark(Timestamp t) override { next_->watermark(t); }
  void flush() override { next_->flush(); }
  void iteration_end(std::uint32_t e) override { next_->iteration_end(e); }
  void end() override { next_->end(); }

 private:
  std::size_t op_id_;
  KeyFn key_fn_;
  CollectorPtr<std::pair<K, T>> next_;
};

template <class T, class K, class KeyFn>
PortInfo keying_port(std::size_t op_id, KeyFn key_fn) {
  return PortInfo{&port_type<std::pair<K, T>>(), [op_id, key_fn](RouterSpec spec) -> std::shared_ptr<AnyCollector> {
                    auto* env = spec.env;
                    auto r = std::make_shared<Router<std::pair<K, T>>>(std::move(spec));
                    env->timed.push_back(r.get());
                    return std::make_shared<KeyingRouter<T, K, KeyFn>>(op_id, key_fn, r);
                  }};
}

using Collectors = std::vector<std::shared_ptr<AnyCollector>>;

/// One logical operator: its descriptor plus the factories the runtime uses
/// to instantiate it inside each task of its stage.
class Node {
 public:
  OperatorDescriptor desc;
  std::vector<PortInfo> ports;
  /// Instantiates the operator for one task; returns one collector per input port.
  std::function<Collectors(TaskEnv&, Collectors&)> build;
  /// Sources only: drives the task until the source is exhausted.
  std::function<void(TaskEnv&, Collectors&)> run;
  /// Called once per process before tasks start, with the local replica count of this node's stage.
  std::function<void(std::size_t local_replicas)> on_start;
  /// Called once per process after all threads joined.
  std::function<void(bool ok)> on_finish;
};

}  // namespace flow
