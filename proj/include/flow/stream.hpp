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
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <thread>
#include <type_traits>
#include <utility>
#include <vector>

#include "flow/iteration.hpp"
#include "flow/node.hpp"
#include "flow/ops.hpp"
#include "flow/planner.hpp"
#include "flow/runtime.hpp"
#include "flow/window.hpp"

namespace flow {

struct Config {
  Topology topology = Topology::local(1);
  std::size_t host_index = 0;
  BatchingPolicy batching = BatchingPolicy::adaptive(1024, std::chrono::milliseconds(50));
  net::RetryPolicy connect_retry{};
};

template <class T>
class Stream;
template <class K, class V>
class KeyedStream;
class Environment;

namespace detail {

struct Graph {
  Config config;
  std::vector<std::shared_ptr<Node>> nodes;
  JobStats stats;
  bool executed = false;
  /// Loop head op id -> wait for the state of an iteration in this process.
  std::map<std::size_t, std::function<void(std::uint32_t, const std::atomic<bool>&)>> loop_waiters;

  LogicalPlan logical() const {
    LogicalPlan p;
    for (const auto& n : nodes) p.ops.push_back(n->desc);
    return p;
  }

  Node& add(OpKind kind, Partitioning effect, std::vector<PortSpec> inputs, std::vector<PortInfo> ports,
            std::size_t slots, std::size_t bound) {
    auto n = std::make_shared<Node>();
    n->desc.id = nodes.size();
    n->desc.kind = kind;
    n->desc.effect = effect;
    n->desc.inputs = std::move(inputs);
    n->desc.slots = slots;
    n->desc.bound = bound;
    n->ports = std::move(ports);
    nodes.push_back(n);
    return *n;
  }
};

/// Where a stream handle points: an operator output plus its parallelism limits.
struct Handle {
  std::shared_ptr<Graph> g;
  std::size_t op = 0;
  std::size_t slot = 0;
  /// Replica bound of operators appended to this stream (0 = unbounded).
  std::size_t bound = 0;
  /// Sticky limit from max_parallelism, restored after repartitioning.
  std::size_t cap = 0;
  bool timestamped = false;

  PortSpec port(bool keyed = false, bool broadcast = false) const { return PortSpec{op, slot, keyed, broadcast, false}; }
};

inline std::size_t min_bound(std::size_t a, std::size_t b) {
  if (a == 0) return b;
  if (b == 0) return a;
  return std::min(a, b);
}

template <class R>
using RangeValueT = std::decay_t<decltype(*std::begin(std::declval<R&>()))>;

/// Node whose build wraps one collector around output slot 0.
template <class In, class Out, class Make>
std::function<Collectors(TaskEnv&, Collectors&)> single(std::size_t id, Make make) {
  return [id, make](TaskEnv& env, Collectors& outs) -> Collectors {
    CollectorPtr<In> c = make(id, env, as_collector<Out>(outs[0]));
    return Collectors{c};
  };
}

inline std::function<Collectors(TaskEnv&, Collectors&)> pass_outputs() {
  return [](TaskEnv&, Collectors& outs) { return outs; };
}

}  // namespace detail

/// Result of a collect sink; available after the job completes, and only in
/// the process that ran the sink (host 0). Other processes get nullopt.
template <class T>
class CollectResult {
 public:
  explicit CollectResult(std::shared_ptr<CollectState<T>> s) : state_(std::move(s)) {}
  const std::optional<std::vector<T>>& get() const { return state_->get(); }

 private:
  std::shared_ptr<CollectState<T>> state_;
};

template <class T, class Agg>
class AllWindowBuilder;
template <class K, class V>
class KeyedWindowBuilder;

template <class T>
class Stream {
 public:
  using value_type = T;

  // Element-wise.

  template <class F>
  auto map(F f) const {
    using Out = std::decay_t<std::invoke_result_t<F&, T&&>>;
    return chain<Out>(OpKind::map, [f](std::size_t id, TaskEnv&, CollectorPtr<Out> next) {
      return std::make_shared<MapOp<T, Out, F>>(id, f, std::move(next));
    });
  }

  /// `f` returns any iterable; each element becomes an output item.
  template <class F>
  auto flat_map(F f) const {
    using Out = detail::RangeValueT<std::invoke_result_t<F&, T&&>>;
    return chain<Out>(OpKind::flat_map, [f](std::size_t id, TaskEnv&, CollectorPtr<Out> next) {
      return std::make_shared<FlatMapOp<T, Out, F>>(id, f, std::move(next));
    });
  }

  template <class F>
  Stream<T> filter(F f) const {
    return chain<T>(OpKind::filter, [f](std::size_t id, TaskEnv&, CollectorPtr<T> next) {
      return std::make_shared<FilterOp<T, F>>(id, f, std::move(next));
    });
  }

  /// Map with replica-local mutable state: `f(S& state, T item)`.
  template <class S, class F>
  auto rich_map(S init, F f) const {
    using Out = std::decay_t<std::invoke_result_t<F&, S&, T&&>>;
    return chain<Out>(OpKind::rich_map, [init, f](std::size_t id, TaskEnv&, CollectorPtr<Out> next) {
      return std::make_shared<RichMapOp<T, Out, S, F>>(id, init, f, std::move(next));
    });
  }

  /// Attaches event time. `wm_fn(item, ts)` may return a watermark to emit after the item.
  template <class TsFn, class WmFn>
  Stream<T> add_timestamps(TsFn ts_fn, WmFn wm_fn) const {
    auto out = chain<T>(OpKind::add_timestamps, [ts_fn, wm_fn](std::size_t id, TaskEnv& env, CollectorPtr<T> next) {
      return std::make_shared<AddTimestampsOp<T, TsFn, WmFn>>(id, ts_fn, wm_fn, env.stats, std::move(next));
    });
    out.h_.timestamped = true;
    return out;
  }

  /// Exposes event time: items become `pair<Timestamp, T>`.
  Stream<std::pair<Timestamp, T>> with_timestamp() const {
    if (!h_.timestamped) throw BuildError("with_timestamp on a stream without timestamps");
    using Out = std::pair<Timestamp, T>;
    return chain<Out>(OpKind::map, [](std::size_t id, TaskEnv&, CollectorPtr<Out> next) {
      return std::make_shared<WithTimestampOp<T>>(id, std::move(next));
    });
  }

  // Folds.

  /// Sequential fold on a single replica: `f(Acc&, T)`.
  template <class Acc, class F>
  Stream<Acc> fold(Acc init, F f) const {
    return collapse<Acc>(OpKind::fold, [init, f](std::size_t id, TaskEnv&, CollectorPtr<Acc> next) {
      return std::make_shared<FoldOp<T, Acc, F>>(id, init, f, std::move(next));
    });
  }

  template <class F>
  Stream<T> reduce(F f) const {
    return collapse<T>(OpKind::reduce, [f](std::size_t id, TaskEnv&, CollectorPtr<T> next) {
      return std::make_shared<ReduceOp<T, F>>(id, f, std::move(next));
    });
  }

  /// Two-phase fold: `local(Acc&, T)` per replica, then `global(Acc&, Acc)` on one replica.
  template <class Acc, class L, class G>
  Stream<Acc> fold_assoc(Acc init, L local, G global) const {
    auto partial = chain<Acc>(OpKind::local_fold, [init, local](std::size_t id, TaskEnv&, CollectorPtr<Acc> next) {
      return std::make_shared<FoldOp<T, Acc, L>>(id, init, local, std::move(next));
    });
    return partial.template collapse<Acc>(OpKind::global_fold, [init, global](std::size_t id, TaskEnv&, CollectorPtr<Acc> next) {
      return std::make_shared<FoldOp<Acc, Acc, G>>(id, init, global, std::move(next));
    });
  }

  template <class F>
  Stream<T> reduce_assoc(F f) const {
    auto partial = chain<T>(OpKind::local_reduce, [f](std::size_t id, TaskEnv&, CollectorPtr<T> next) {
      return std::make_shared<ReduceOp<T, F>>(id, f, std::move(next));
    });
    return partial.template collapse<T>(OpKind::global_reduce, [f](std::size_t id, TaskEnv&, CollectorPtr<T> next) {
      return std::make_shared<ReduceOp<T, F>>(id, f, std::move(next));
    });
  }

  // Partitioning.

  /// Routes items by `key_fn(item)`; the result carries `pair<K, T>` items.
  template <class KeyFn>
  auto group_by(KeyFn key_fn) const {
    using K = std::decay_t<std::invoke_result_t<KeyFn&, const T&>>;
    auto& g = *h_.g;
    auto& n = g.add(OpKind::key_by, Partitioning::by_key, {h_.port(true)}, {keying_port<T, K>(g.nodes.size(), key_fn)}, 1,
                    h_.cap);
    n.build = detail::single<std::pair<K, T>, std::pair<K, T>>(n.desc.id, [](std::size_t id, TaskEnv&, auto next) {
      return std::make_shared<IdentityOp<std::pair<K, T>>>(id, std::move(next));
    });
    return KeyedStream<K, T>(derive(n.desc.id, h_.cap, h_.timestamped));
  }

  /// Per-key reduction: a replica-local pre-reduce, the key exchange, and the final reduce.
  template <class KeyFn, class F>
  KeyedStream<std::decay_t<std::invoke_result_t<KeyFn&, const T&>>, T> group_by_reduce(KeyFn key_fn, F f) const {
    using K = std::decay_t<std::invoke_result_t<KeyFn&, const T&>>;
    using P = std::pair<K, T>;
    auto local = chain<P>(OpKind::local_reduce, [key_fn, f](std::size_t id, TaskEnv&, CollectorPtr<P> next) {
      auto reduce = std::make_shared<KeyedReduceOp<K, T, F>>(id, f, std::move(next));
      return std::make_shared<KeyingRouter<T, K, KeyFn>>(id, key_fn, reduce);
    });
    return KeyedStream<K, T>(local.h_).key_exchange().reduce(f);
  }

  /// Round-robin redistribution over all replicas.
  Stream<T> shuffle() const {
    auto& g = *h_.g;
    auto& n = g.add(OpKind::shuffle, Partitioning::round_robin, {h_.port()}, {plain_port<T>()}, 1, h_.cap);
    n.build = detail::single<T, T>(n.desc.id, [](std::size_t id, TaskEnv&, CollectorPtr<T> next) {
      return std::make_shared<IdentityOp<T>>(id, std::move(next));
    });
    return Stream<T>(derive(n.desc.id, h_.cap, h_.timestamped));
  }

  /// Caps the replica count of the operators that follow.
  Stream<T> max_parallelism(std::size_t n) const {
    if (n == 0) throw BuildError("max_parallelism must be positive");
    auto h = h_;
    h.bound = detail::min_bound(h.bound, n);
    h.cap = detail::min_bound(h.cap, n);
    return Stream<T>(h);
  }

  // Multiple streams.

  std::vector<Stream<T>> split(std::size_t ways) const {
    if (ways == 0) throw BuildError("split needs at least one output");
    auto& g = *h_.g;
    auto& n = g.add(OpKind::split, Partitioning::preserves, {h_.port()}, {plain_port<T>()}, ways, h_.bound);
    n.build = [](TaskEnv&, Collectors& outs) -> Collectors {
      std::vector<CollectorPtr<T>> typed;
      for (auto& o : outs) typed.push_back(as_collector<T>(o));
      return Collectors{std::make_shared<SplitOp<T>>(std::move(typed))};
    };
    std::vector<Stream<T>> out;
    for (std::size_t s = 0; s < ways; ++s) {
      auto h = derive(n.desc.id, h_.bound, h_.timestamped);
      h.slot = s;
      out.push_back(Stream<T>(h));
    }
    return out;
  }

  Stream<T> merge(const Stream<T>& other) const {
    same_graph(other.h_);
    auto& g = *h_.g;
    auto bound = h_.bound == other.h_.bound ? h_.bound : std::size_t{0};
    auto& n = g.add(OpKind::merge, Partitioning::preserves, {h_.port(), other.h_.port()}, {plain_port<T>(), plain_port<T>()},
                    1, bound);
    n.build = [](TaskEnv&, Collectors& outs) -> Collectors {
      auto op = std::make_shared<MergeOp<T>>(as_collector<T>(outs[0]));
      return Collectors{std::make_shared<PortAdapter<0, T, MergeOp<T>>>(op),
                        std::make_shared<PortAdapter<1, T, MergeOp<T>>>(op)};
    };
    auto h = derive(n.desc.id, bound, h_.timestamped && other.h_.timestamped);
    h.cap = detail::min_bound(h_.cap, other.h_.cap);
    return Stream<T>(h);
  }

  /// Pairs items of both streams in arrival order on a single replica.
  template <class U>
  Stream<std::pair<T, U>> zip(const Stream<U>& other) const {
    same_graph(other.h_);
    using Z = ZipOp<T, U>;
    auto& g = *h_.g;
    auto& n = g.add(OpKind::zip, Partitioning::collapses, {h_.port(), other.h_.port()}, {plain_port<T>(), plain_port<U>()},
                    1, 1);
    n.build = [](TaskEnv&, Collectors& outs) -> Collectors {
      auto op = std::make_shared<Z>(as_collector<std::pair<T, U>>(outs[0]));
      return Collectors{std::make_shared<PortAdapter<0, T, Z>>(op), std::make_shared<PortAdapter<1, U, Z>>(op)};
    };
    auto h = derive(n.desc.id, 1, false);
    h.cap = detail::min_bound(h_.cap, other.h_.cap);
    return Stream<std::pair<T, U>>(h);
  }

  template <class U, class KA, class KB>
  auto join(const Stream<U>& other, KA key_a, KB key_b) const {
    return join_impl<JoinKind::inner>(other, key_a, key_b);
  }
  template <class U, class KA, class KB>
  auto left_join(const Stream<U>& other, KA key_a, KB key_b) const {
    return join_impl<JoinKind::left>(other, key_a, key_b);
  }
  template <class U, class KA, class KB>
  auto outer_join(const Stream<U>& other, KA key_a, KB key_b) const {
    return join_impl<JoinKind::outer>(other, key_a, key_b);
  }

  // Windows over the whole stream (single replica).

  auto window_all(WindowDescriptor desc) const { return AllWindowBuilder<T, void>(*this, WindowSpec<T>{desc, {}}); }

  // Iteration.

  /// Feeds the stream through `body` until `pred(state)` is false or `max_iters`
  /// iterations ran. Each iteration folds the body output with `local_fold(D&, const T&)`
  /// per replica and `global_fold(S&, D)` on the leader. Returns the final
  /// state and the items produced by the last iteration.
  template <class S, class Body, class LF, class GF, class Pred>
  std::pair<Stream<S>, Stream<T>> iterate(std::uint32_t max_iters, S init, Body body, LF local_fold, GF global_fold,
                                          Pred pred) const {
    auto [state, exit] = loop<false>(max_iters, std::move(init), body, local_fold, global_fold, pred);
    return {state, *exit};
  }

  /// Like iterate, but every iteration re-reads the original input.
  template <class S, class Body, class LF, class GF, class Pred>
  Stream<S> replay(std::uint32_t max_iters, S init, Body body, LF local_fold, GF global_fold, Pred pred) const {
    return loop<true>(max_iters, std::move(init), body, local_fold, global_fold, pred).first;
  }

  // Sinks.

  template <class F>
  void for_each(F f) const {
    auto& n = h_.g->add(OpKind::sink_for_each, Partitioning::preserves, {h_.port()}, {plain_port<T>()}, 0, h_.bound);
    n.build = [id = n.desc.id, f](TaskEnv&, Collectors&) -> Collectors {
      return Collectors{std::make_shared<ForEachOp<T, F>>(id, f)};
    };
  }

  CollectResult<T> collect() const {
    auto state = std::make_shared<CollectState<T>>();
    auto& n = h_.g->add(OpKind::sink_collect, Partitioning::collapses, {h_.port()}, {plain_port<T>()}, 0, 1);
    n.build = [state](TaskEnv&, Collectors&) -> Collectors { return Collectors{std::make_shared<CollectOp<T>>(state)}; };
    n.on_start = [state](std::size_t) { state->reset(); };
    n.on_finish = [state](bool ok) { state->finish(ok); };
    return CollectResult<T>(state);
  }

  /// Items from every replica of this process, readable while the job runs.
  std::shared_ptr<ItemChannel<T>> collect_channel() const {
    auto ch = std::make_shared<ItemChannel<T>>();
    auto& n = h_.g->add(OpKind::sink_channel, Partitioning::preserves, {h_.port()}, {plain_port<T>()}, 0, h_.bound);
    n.build = [ch](TaskEnv&, Collectors&) -> Collectors { return Collectors{std::make_shared<ChannelSinkOp<T>>(ch)}; };
    n.on_start = [ch](std::size_t local) { ch->add_producers(local); };
    n.on_finish = [ch](bool) { ch->close(); };
    return ch;
  }

  std::size_t id() const { return h_.op; }
  bool timestamped() const { return h_.timestamped; }

 private:
  template <class>
  friend class Stream;
  template <class, class>
  friend class KeyedStream;
  template <class, class>
  friend class AllWindowBuilder;
  template <class, class>
  friend class KeyedWindowBuilder;
  friend class Environment;

  explicit Stream(detail::Handle h) : h_(std::move(h)) {}

  detail::Handle derive(std::size_t op, std::size_t bound, bool ts) const {
    detail::Handle h = h_;
    h.op = op;
    h.slot = 0;
    h.bound = bound;
    h.timestamped = ts;
    return h;
  }

  void same_graph(const detail::Handle& o) const {
    if (o.g != h_.g) throw BuildError("streams belong to different environments");
  }

  /// Appends a partition-preserving single-input operator.
  template <class Out, class Make>
  Stream<Out> chain(OpKind kind, Make make) const {
    auto& n = h_.g->add(kind, Partitioning::preserves, {h_.port()}, {plain_port<T>()}, 1, h_.bound);
    n.build = detail::single<T, Out>(n.desc.id, make);
    return Stream<Out>(derive(n.desc.id, h_.bound, h_.timestamped));
  }

  /// Appends a single-replica operator.
  template <class Out, class Make>
  Stream<Out> collapse(OpKind kind, Make make) const {
    auto& n = h_.g->add(kind, Partitioning::collapses, {h_.port()}, {plain_port<T>()}, 1, 1);
    n.build = detail::single<T, Out>(n.desc.id, make);
    return Stream<Out>(derive(n.desc.id, 1, false));
  }

  template <JoinKind J, class U, class KA, class KB>
  auto join_impl(const Stream<U>& other, KA key_a, KB key_b) const {
    same_graph(other.h_);
    using K = std::decay_t<std::invoke_result_t<KA&, const T&>>;
    static_assert(std::is_same_v<K, std::decay_t<std::invoke_result_t<KB&, const U&>>>, "join keys must have one type");
    using Op = JoinOp<K, T, U, J>;
    using V = JoinValueT<T, U, J>;
    auto& g = *h_.g;
    auto id = g.nodes.size();
    auto cap = detail::min_bound(h_.cap, other.h_.cap);
    auto& n = g.add(OpKind::join, Partitioning::by_key, {h_.port(true), other.h_.port(true)},
                    {keying_port<T, K>(id, key_a), keying_port<U, K>(id, key_b)}, 1, cap);
    n.build = [](TaskEnv&, Collectors& outs) -> Collectors {
      auto op = std::make_shared<Op>(as_collector<std::pair<K, V>>(outs[0]));
      return Collectors{std::make_shared<PortAdapter<0, std::pair<K, T>, Op>>(op),
                        std::make_shared<PortAdapter<1, std::pair<K, U>, Op>>(op)};
    };
    auto h = derive(id, cap, false);
    h.cap = cap;
    return KeyedStream<K, V>(h);
  }

  template <bool Replay, class S, class Body, class LF, class GF, class Pred>
  std::pair<Stream<S>, std::optional<Stream<T>>> loop(std::uint32_t max_iters, S init, Body& body, LF& local_fold,
                                                      GF& global_fold, Pred& pred) const {
    using D = ArgT<LF, 0>;
    using Head = HeadOp<T, S, Replay>;
    using Delta = std::pair<std::uint32_t, D>;
    if (max_iters == 0) throw BuildError("iteration needs max_iters >= 1");
    auto& g = *h_.g;
    auto cell = std::make_shared<IterationState<S>>(init);

    std::vector<PortInfo> head_ports{plain_port<T>(), plain_port<LoopControl<S>>()};
    if (!Replay) head_ports.push_back(plain_port<T>());
    auto& head = g.add(OpKind::iteration_head, Partitioning::round_robin, {h_.port()}, std::move(head_ports),
                       Replay ? 1 : 2, 0);
    const auto head_id = head.desc.id;
    head.build = [head_id, cell](TaskEnv&, Collectors& outs) -> Collectors {
      auto op = std::make_shared<Head>(head_id, cell, as_collector<T>(outs[0]),
                                       Replay ? nullptr : as_collector<T>(outs[1]));
      Collectors ports{std::make_shared<PortAdapter<0, T, Head>>(op),
                       std::make_shared<PortAdapter<1, LoopControl<S>, Head>>(op)};
      if constexpr (!Replay) ports.push_back(std::make_shared<PortAdapter<2, T, Head>>(op));
      return ports;
    };
    head.on_start = [cell](std::size_t) { cell->reset(); };
    g.loop_waiters[head_id] = [cell](std::uint32_t it, const std::atomic<bool>& aborted) { cell->wait_for(it, aborted); };

    detail::Handle body_in = h_;
    body_in.op = head_id;
    body_in.slot = 0;
    body_in.bound = 0;
    body_in.cap = 0;
    body_in.timestamped = false;
    auto body_out = body(Stream<T>(body_in), StateRef<S>(cell));
    using B = typename decltype(body_out)::value_type;
    static_assert(Replay || std::is_same_v<B, T>, "the iteration body must keep the item type");
    same_graph(body_out.h_);

    auto& tail = g.add(OpKind::iteration_tail, Partitioning::preserves, {body_out.h_.port()}, {plain_port<B>()},
                       Replay ? 1 : 2, body_out.h_.bound);
    const auto tail_id = tail.desc.id;
    tail.build = [tail_id, local_fold](TaskEnv& env, Collectors& outs) -> Collectors {
      auto op = std::make_shared<TailOp<B, D, LF, Replay>>(tail_id, static_cast<std::uint32_t>(env.replica), local_fold,
                                                            as_collector<Delta>(outs[0]),
                                                            Replay ? nullptr : as_collector<B>(outs[1]));
      return Collectors{op};
    };

    auto& leader = g.add(OpKind::iteration_leader, Partitioning::collapses, {PortSpec{tail_id, 0}}, {plain_port<Delta>()},
                         2, 1);
    const auto leader_id = leader.desc.id;
    leader.build = [leader_id, tail_id, init, global_fold, pred, max_iters](TaskEnv& env, Collectors& outs) -> Collectors {
      auto tails = env.plan->replicas(env.plan->staged.stage_of[tail_id]);
      return Collectors{std::make_shared<LeaderOp<S, D, GF, Pred>>(leader_id, init, global_fold, pred, max_iters, tails,
                                                                   env.stats, as_collector<S>(outs[0]),
                                                                   as_collector<LoopControl<S>>(outs[1]))};
    };

    auto& head_desc = head.desc;
    head_desc.inputs.push_back(PortSpec{leader_id, 1, false, true, true});
    if (!Replay) head_desc.inputs.push_back(PortSpec{tail_id, 1, false, false, true});

    Stream<S> state(derive(leader_id, 1, false));
    if constexpr (Replay) {
      return {state, std::nullopt};
    } else {
      auto h = derive(head_id, 0, false);
      h.slot = 1;
      return {state, Stream<T>(h)};
    }
  }

  detail::Handle h_;
};

/// Stream of `pair<K, V>` partitioned by K.
template <class K, class V>
class KeyedStream {
 public:
  using item_type = std::pair<K, V>;

  /// `f(V)` or `f(const K&, V)`; keys are kept.
  template <class F>
  auto map(F f) const {
    if constexpr (std::is_invocable_v<F&, const K&, V&&>) {
      using R = std::decay_t<std::invoke_result_t<F&, const K&, V&&>>;
      return KeyedStream<K, R>(s().map([f](item_type&& x) mutable {
        return std::pair<K, R>(x.first, f(std::as_const(x.first), std::move(x.second)));
      }).h_);
    } else {
      using R = std::decay_t<std::invoke_result_t<F&, V&&>>;
      return KeyedStream<K, R>(s().map([f](item_type&& x) mutable {
        return std::pair<K, R>(std::move(x.first), f(std::move(x.second)));
      }).h_);
    }
  }

  /// `f(const V&)` or `f(const K&, const V&)`.
  template <class F>
  KeyedStream<K, V> filter(F f) const {
    return KeyedStream<K, V>(s().filter([f](const item_type& x) mutable {
      if constexpr (std::is_invocable_v<F&, const K&, const V&>) {
        return static_cast<bool>(f(x.first, x.second));
      } else {
        return static_cast<bool>(f(x.second));
      }
    }).h_);
  }

  template <class F>
  KeyedStream<K, V> reduce(F f) const {
    return KeyedStream<K, V>(
        s().template chain<item_type>(OpKind::keyed_reduce, [f](std::size_t id, TaskEnv&, CollectorPtr<item_type> next) {
          return std::make_shared<KeyedReduceOp<K, V, F>>(id, f, std::move(next));
        }).h_);
  }

  /// Per-key fold `f(Acc&, V)` emitted when the input ends.
  template <class Acc, class F>
  KeyedStream<K, Acc> fold(Acc init, F f) const {
    using Out = std::pair<K, Acc>;
    return KeyedStream<K, Acc>(
        s().template chain<Out>(OpKind::keyed_fold, [init, f](std::size_t id, TaskEnv&, CollectorPtr<Out> next) {
          return std::make_shared<KeyedFoldOp<K, V, Acc, F>>(id, init, f, std::move(next));
        }).h_);
  }

  KeyedWindowBuilder<K, V> window(WindowDescriptor desc) const;
  template <class P>
  KeyedWindowBuilder<K, V> window(TransactionWindow<P> txn) const;

  Stream<item_type> unkey() const { return s(); }
  Stream<item_type> shuffle() const { return s().shuffle(); }

  template <class F>
  void for_each(F f) const {
    s().for_each(std::move(f));
  }
  CollectResult<item_type> collect() const { return s().collect(); }

  std::size_t id() const { return h_.op; }

 private:
  template <class>
  friend class Stream;
  template <class, class>
  friend class KeyedStream;
  template <class, class>
  friend class KeyedWindowBuilder;

  explicit KeyedStream(detail::Handle h) : h_(std::move(h)) {}

  Stream<item_type> s() const { return Stream<item_type>(h_); }

  /// Key exchange for items that already carry their key.
  KeyedStream<K, V> key_exchange() const {
    auto& g = *h_.g;
    auto& n = g.add(OpKind::key_by, Partitioning::by_key, {h_.port(true)}, {plain_port<item_type>()}, 1, h_.cap);
    n.build = detail::single<item_type, item_type>(n.desc.id, [](std::size_t id, TaskEnv&, CollectorPtr<item_type> next) {
      return std::make_shared<IdentityOp<item_type>>(id, std::move(next));
    });
    auto h = h_;
    h.op = n.desc.id;
    h.slot = 0;
    h.bound = h_.cap;
    return KeyedStream<K, V>(h);
  }

  detail::Handle h_;
};

namespace detail {

inline void check_window(const WindowDescriptor& desc, bool timestamped) {
  desc.validate();
  if (desc.kind == WindowKind::event_time && !timestamped)
    throw BuildError("event-time window on a stream without timestamps (use add_timestamps)");
}

}  // namespace detail

/// Window over a whole stream; pick an aggregate to finish.
template <class T, class Unused>
class AllWindowBuilder {
 public:
  AllWindowBuilder(Stream<T> s, WindowSpec<T> spec) : s_(std::move(s)), spec_(std::move(spec)) {
    detail::check_window(spec_.desc, s_.h_.timestamped);
  }

  Stream<T> sum() const { return apply(SumAgg<T>{}); }
  Stream<T> max() const { return apply(MaxAgg<T>{}); }
  Stream<std::uint64_t> count() const { return apply(CountAgg<T>{}); }
  template <class A, class F>
  Stream<A> fold(A init, F f) const {
    return apply(FoldAgg<T, A, F>{std::move(init), std::move(f)});
  }
  /// `f(const std::vector<T>&)` sees the whole window.
  template <class F>
  auto process(F f) const {
    return apply(ProcessAgg<T, F>{std::move(f)});
  }

 private:
  template <class Agg>
  Stream<typename Agg::Out> apply(Agg agg) const {
    using Out = typename Agg::Out;
    auto spec = spec_;
    auto out = s_.template collapse<Out>(OpKind::window_all, [spec, agg](std::size_t id, TaskEnv& env, CollectorPtr<Out> next) {
      return std::make_shared<AllWindowOp<T, Agg>>(id, spec, agg, env, std::move(next));
    });
    out.h_.timestamped = spec_.desc.kind == WindowKind::event_time;
    return out;
  }

  Stream<T> s_;
  WindowSpec<T> spec_;
};

/// Per-key window; pick an aggregate to finish.
template <class K, class V>
class KeyedWindowBuilder {
 public:
  KeyedWindowBuilder(KeyedStream<K, V> s, WindowSpec<V> spec) : s_(std::move(s)), spec_(std::move(spec)) {
    detail::check_window(spec_.desc, s_.h_.timestamped);
  }

  KeyedStream<K, V> sum() const { return apply(SumAgg<V>{}); }
  KeyedStream<K, V> max() const { return apply(MaxAgg<V>{}); }
  KeyedStream<K, std::uint64_t> count() const { return apply(CountAgg<V>{}); }
  template <class A, class F>
  KeyedStream<K, A> fold(A init, F f) const {
    return apply(FoldAgg<V, A, F>{std::move(init), std::move(f)});
  }
  template <class F>
  auto process(F f) const {
    return apply(ProcessAgg<V, F>{std::move(f)});
  }

 private:
  template <class Agg>
  KeyedStream<K, typename Agg::Out> apply(Agg agg) const {
    using Out = std::pair<K, typename Agg::Out>;
    auto spec = spec_;
    auto out = s_.s().template chain<Out>(OpKind::window, [spec, agg](std::size_t id, TaskEnv& env, CollectorPtr<Out> next) {
      return std::make_shared<KeyedWindowOp<K, V, Agg>>(id, spec, agg, env, std::move(next));
    });
    out.h_.timestamped = spec_.desc.kind == WindowKind::event_time || s_.h_.timestamped;
    return KeyedStream<K, typename Agg::Out>(out.h_);
  }

  KeyedStream<K, V> s_;
  WindowSpec<V> spec_;
};

template <class K, class V>
KeyedWindowBuilder<K, V> KeyedStream<K, V>::window(WindowDescriptor desc) const {
  if (desc.kind == WindowKind::transaction) throw BuildError("transaction windows need a commit predicate");
  return KeyedWindowBuilder<K, V>(*this, WindowSpec<V>{desc, {}});
}

template <class K, class V>
template <class P>
KeyedWindowBuilder<K, V> KeyedStream<K, V>::window(TransactionWindow<P> txn) const {
  WindowDescriptor d;
  d.kind = WindowKind::transaction;
  return KeyedWindowBuilder<K, V>(*this, WindowSpec<V>{d, std::function<bool(const V&)>(txn.commit)});
}

namespace detail {

struct Job {
  std::thread thread;
  std::atomic<bool> stop{false};
  std::exception_ptr error;
};

}  // namespace detail

/// Running job. Destroying an unjoined handle stops and joins it.
class JobHandle {
 public:
  explicit JobHandle(std::shared_ptr<detail::Job> job) : job_(std::move(job)) {}
  JobHandle(JobHandle&&) = default;
  JobHandle& operator=(JobHandle&&) = default;
  ~JobHandle() {
    if (job_ && job_->thread.joinable()) {
      job_->stop = true;
      job_->thread.join();
    }
  }

  /// Asks sources to finish early; the pipeline then drains normally.
  void stop() { job_->stop = true; }

  /// Waits for completion; rethrows the job's failure.
  void join() {
    if (job_->thread.joinable()) job_->thread.join();
    if (job_->error) std::rethrow_exception(job_->error);
  }

 private:
  std::shared_ptr<detail::Job> job_;
};

/// Builds and runs one job on one host of a topology.
class Environment {
 public:
  explicit Environment(Config config) : g_(std::make_shared<detail::Graph>()) {
    config.topology.validate();
    if (config.host_index >= config.topology.hosts.size())
      throw BuildError("host index " + std::to_string(config.host_index) + " not in topology");
    g_->config = std::move(config);
  }

  /// Single process with `slots` replicas per stage.
  static Environment local(std::size_t slots) {
    Config c;
    c.topology = Topology::local(slots);
    return Environment(c);
  }

  /// Topology from the file named by FLOW_CONFIG and host from FLOW_HOST_INDEX;
  /// a local topology with one slot per core when FLOW_CONFIG is unset.
  static Environment from_env() {
    Config c;
    if (const char* path = std::getenv("FLOW_CONFIG"); path && *path) {
      c.topology = Topology::parse_file(path);
    } else {
      c.topology = Topology::local(std::max(1u, std::thread::hardware_concurrency()));
    }
    if (const char* idx = std::getenv("FLOW_HOST_INDEX"); idx && *idx) {
      char* end = nullptr;
      auto v = std::strtoul(idx, &end, 10);
      if (*end != '\0') throw BuildError(std::string("FLOW_HOST_INDEX is not a number: ") + idx);
      c.host_index = v;
    }
    return Environment(c);
  }

  const Config& config() const { return g_->config; }
  void set_batching(BatchingPolicy p) { g_->config.batching = p; }
  void set_connect_retry(net::RetryPolicy r) { g_->config.connect_retry = r; }

  // Sources.

  /// Items of `range`, emitted by a single replica.
  template <class R>
  auto source_iter(R range) {
    using T = detail::RangeValueT<R>;
    auto holder = std::make_shared<const R>(std::move(range));
    return source<T>(1, [holder](std::size_t id, TaskEnv& env, Collector<T>& out) {
      drive_source<T>(env, out, id, range_cursor(R(*holder)));
    });
  }

  /// Items from `next()` until it returns nullopt, on a single replica.
  template <class F>
  auto source_fn(F next) {
    using T = typename std::invoke_result_t<F&>::value_type;
    return source<T>(1, [next](std::size_t id, TaskEnv& env, Collector<T>& out) {
      auto f = next;
      drive_source<T>(env, out, id, f);
    });
  }

  /// Every replica emits the range `gen(replica, replicas)`.
  template <class G>
  auto source_parallel(G gen) {
    using R = std::invoke_result_t<G&, std::size_t, std::size_t>;
    using T = detail::RangeValueT<R>;
    return source<T>(0, [gen](std::size_t id, TaskEnv& env, Collector<T>& out) {
      auto g = gen;
      R range = guarded(id, [&] { return g(env.replica, env.replicas); });
      drive_source<T>(env, out, id, range_cursor(std::move(range)));
    });
  }

  /// Lines of a file, split by byte ranges across replicas.
  Stream<std::string> source_file_lines(const std::string& path) {
    std::error_code ec;
    if (!std::filesystem::is_regular_file(path, ec)) throw BuildError("input file not found: " + path);
    return source<std::string>(0, [path](std::size_t id, TaskEnv& env, Collector<std::string>& out) {
      LineChunkReader reader(path, env.replica, env.replicas);
      drive_source<std::string>(env, out, id, std::ref(reader));
    });
  }

  /// Items sent into `ch` until it is closed, on a single replica.
  template <class T>
  Stream<T> source_channel(std::shared_ptr<ItemChannel<T>> ch) {
    return source<T>(1, [ch](std::size_t, TaskEnv& env, Collector<T>& out) {
      while (!env.should_stop()) {
        auto deadline = Clock::now() + kIdleTick;
        if (auto d = env.next_deadline(); d && *d < deadline) deadline = *d;
        bool closed = false;
        auto x = ch->recv_until(deadline, closed);
        if (x) out.push(std::move(*x), std::nullopt);
        else if (closed) break;
        env.poll_timers(Clock::now());
      }
      env.check_aborted();
      out.end();
    });
  }

  // Planning and execution.

  StagedPlan staged_plan() const { return fuse_stages(g_->logical()); }
  ExecutionPlan execution_plan() const { return build_execution_plan(staged_plan(), g_->config.topology); }
  std::string dump_plan() const { return execution_plan().dump(); }

  JobHandle execute_async() {
    if (g_->executed) throw BuildError("environment already executed");
    auto plan = std::make_shared<ExecutionPlan>(execution_plan());
    g_->executed = true;
    auto g = g_;
    const auto host = g->config.host_index;

    RunOptions opts;
    opts.batching = g->config.batching;
    opts.connect_retry = g->config.connect_retry;
    auto loop_of = loops_of(plan->staged.logical);
    opts.await_loop_state = [g, loop_of](std::size_t to_op, std::uint32_t it, const std::atomic<bool>& aborted) {
      if (auto head = loop_of[to_op]) g->loop_waiters.at(*head)(it, aborted);
    };

    for (const auto& n : g->nodes) {
      if (!n->on_start) continue;
      auto stage = plan->staged.stage_of[n->desc.id];
      std::size_t local = 0;
      for (auto h : plan->replica_host[stage]) local += h == host ? 1 : 0;
      n->on_start(local);
    }

    auto job = std::make_shared<detail::Job>();
    job->thread = std::thread([g, plan, opts, job, host] {
      bool ok = true;
      try {
        Worker w(*plan, g->nodes, host, opts, g->stats, job->stop);
        w.run();
      } catch (...) {
        ok = false;
        job->error = std::current_exception();
      }
      for (const auto& n : g->nodes)
        if (n->on_finish) n->on_finish(ok);
    });
    return JobHandle(job);
  }

  void execute() { execute_async().join(); }

  StatsSnapshot stats() const { return g_->stats.snapshot(); }

 private:
  template <class T, class Run>
  Stream<T> source(std::size_t bound, Run run) {
    auto& n = g_->add(OpKind::source, Partitioning::preserves, {}, {}, 1, bound);
    n.build = detail::pass_outputs();
    n.run = [id = n.desc.id, run](TaskEnv& env, Collectors& outs) {
      auto out = as_collector<T>(outs[0]);
      run(id, env, *out);
    };
    detail::Handle h;
    h.g = g_;
    h.op = n.desc.id;
    h.bound = bound;
    return Stream<T>(h);
  }

  /// For each loop-body operator (head excluded, tail included), the head of its loop.
  /// The head publishes the state itself, so it must never wait for it.
  std::vector<std::optional<std::size_t>> loops_of(const LogicalPlan& plan) const {
    std::vector<std::optional<std::size_t>> out(plan.ops.size());
    for (const auto& [head, waiter] : g_->loop_waiters) {
      std::vector<std::size_t> work;
      for (auto [c, p] : plan.consumers(head, 0)) work.push_back(c);
      while (!work.empty()) {
        auto n = work.back();
        work.pop_back();
        if (out[n]) continue;
        out[n] = head;
        if (plan.ops[n].kind == OpKind::iteration_tail) continue;
        for (auto [c, p] : plan.consumers(n)) work.push_back(c);
      }
    }
    return out;
  }

  std::shared_ptr<detail::Graph> g_;
};

}  // namespace flow
