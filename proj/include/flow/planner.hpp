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
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <queue>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "flow/error.hpp"
#include "flow/topology.hpp"

namespace flow {

enum class OpKind {
  source,
  map,
  flat_map,
  filter,
  rich_map,
  add_timestamps,
  fold,
  reduce,
  local_fold,
  global_fold,
  local_reduce,
  global_reduce,
  key_by,
  keyed_fold,
  keyed_reduce,
  shuffle,
  split,
  merge,
  zip,
  join,
  window,
  window_all,
  iteration_head,
  iteration_tail,
  iteration_leader,
  sink_for_each,
  sink_collect,
  sink_channel,
};

inline const char* kind_name(OpKind k) {
  switch (k) {
    case OpKind::source: return "source";
    case OpKind::map: return "map";
    case OpKind::flat_map: return "flat_map";
    case OpKind::filter: return "filter";
    case OpKind::rich_map: return "rich_map";
    case OpKind::add_timestamps: return "add_timestamps";
    case OpKind::fold: return "fold";
    case OpKind::reduce: return "reduce";
    case OpKind::local_fold: return "local_fold";
    case OpKind::global_fold: return "global_fold";
    case OpKind::local_reduce: return "local_reduce";
    case OpKind::global_reduce: return "global_reduce";
    case OpKind::key_by: return "key_by";
    case OpKind::keyed_fold: return "keyed_fold";
    case OpKind::keyed_reduce: return "keyed_reduce";
    case OpKind::shuffle: return "shuffle";
    case OpKind::split: return "split";
    case OpKind::merge: return "merge";
    case OpKind::zip: return "zip";
    case OpKind::join: return "join";
    case OpKind::window: return "window";
    case OpKind::window_all: return "window_all";
    case OpKind::iteration_head: return "iteration_head";
    case OpKind::iteration_tail: return "iteration_tail";
    case OpKind::iteration_leader: return "iteration_leader";
    case OpKind::sink_for_each: return "for_each";
    case OpKind::sink_collect: return "collect";
    case OpKind::sink_channel: return "collect_channel";
  }
  return "?";
}

enum class Partitioning { preserves, by_key, round_robin, collapses };

inline const char* partitioning_name(Partitioning p) {
  switch (p) {
    case Partitioning::preserves: return "preserves";
    case Partitioning::by_key: return "repartitions-by-key";
    case Partitioning::round_robin: return "repartitions-round-robin";
    case Partitioning::collapses: return "collapses-to-one";
  }
  return "?";
}

/// Where an operator input port reads from.
struct PortSpec {
  std::size_t from = 0;
  std::size_t slot = 0;
  bool keyed = false;
  bool broadcast = false;
  bool feedback = false;

  bool operator==(const PortSpec&) const = default;
};

struct OperatorDescriptor {
  std::size_t id = 0;
  OpKind kind = OpKind::map;
  Partitioning effect = Partitioning::preserves;
  std::vector<PortSpec> inputs;
  std::size_t slots = 1;
  /// Maximum replica count; 0 means unbounded.
  std::size_t bound = 0;

  bool operator==(const OperatorDescriptor&) const = default;
};

struct LogicalPlan {
  std::vector<OperatorDescriptor> ops;

  /// Consumers of (op, slot) as (consumer op, port) pairs.
  std::vector<std::pair<std::size_t, std::size_t>> consumers(std::size_t op, std::optional<std::size_t> slot = {}) const {
    std::vector<std::pair<std::size_t, std::size_t>> out;
    for (const auto& d : ops)
      for (std::size_t p = 0; p < d.inputs.size(); ++p)
        if (d.inputs[p].from == op && (!slot || d.inputs[p].slot == *slot)) out.emplace_back(d.id, p);
    return out;
  }

  /// Every output slot is consumed exactly once; inputs point backwards unless feedback.
  void validate() const {
    for (std::size_t i = 0; i < ops.size(); ++i) {
      const auto& d = ops[i];
      if (d.id != i) throw InvariantError("operator ids must be dense");
      for (const auto& in : d.inputs) {
        if (in.from >= ops.size()) throw BuildError("operator " + std::to_string(d.id) + " reads from unknown operator");
        if (!in.feedback && in.from >= d.id)
          throw BuildError("operator " + std::to_string(d.id) + " has a forward non-feedback input");
        if (in.slot >= ops[in.from].slots) throw BuildError("operator " + std::to_string(d.id) + " reads a missing slot");
      }
    }
    std::vector<std::vector<int>> used(ops.size());
    for (const auto& d : ops) used[d.id].assign(d.slots, 0);
    for (const auto& d : ops)
      for (const auto& in : d.inputs) ++used[in.from][in.slot];
    for (const auto& d : ops) {
      for (std::size_t s = 0; s < d.slots; ++s) {
        if (used[d.id][s] == 0)
          throw BuildError("dangling stream: output " + std::to_string(s) + " of operator " + std::to_string(d.id) +
                           " (" + kind_name(d.kind) + ") is never consumed");
        if (used[d.id][s] > 1)
          throw BuildError("stream consumed twice: output " + std::to_string(s) + " of operator " +
                           std::to_string(d.id) + " (use split to duplicate a stream)");
      }
    }
  }
};

enum class EdgeKind { one_to_one, keyed, round_robin, broadcast };

inline const char* edge_kind_name(EdgeKind k) {
  switch (k) {
    case EdgeKind::one_to_one: return "one-to-one";
    case EdgeKind::keyed: return "keyed";
    case EdgeKind::round_robin: return "round-robin";
    case EdgeKind::broadcast: return "broadcast";
  }
  return "?";
}

struct StageEdge {
  std::size_t from_stage = 0;
  std::size_t to_stage = 0;
  std::size_t from_op = 0;
  std::size_t from_slot = 0;
  std::size_t to_op = 0;
  std::size_t to_port = 0;
  EdgeKind kind = EdgeKind::one_to_one;
  bool feedback = false;
  /// Batches on this edge carry iteration epochs (edge leaves a loop body).
  bool tagged = false;

  bool operator==(const StageEdge&) const = default;
};

struct Stage {
  std::size_t id = 0;
  std::vector<std::size_t> ops;
  std::size_t cap = 0;
  bool collapses = false;

  bool operator==(const Stage&) const = default;
};

struct StagedPlan {
  LogicalPlan logical;
  std::vector<Stage> stages;
  std::vector<std::size_t> stage_of;
  std::vector<StageEdge> edges;

  std::vector<const StageEdge*> inputs_of(std::size_t stage) const {
    std::vector<const StageEdge*> out;
    for (const auto& e : edges)
      if (e.to_stage == stage) out.push_back(&e);
    std::sort(out.begin(), out.end(), [](auto* a, auto* b) { return a->to_port < b->to_port; });
    return out;
  }
  std::vector<const StageEdge*> outputs_of(std::size_t stage) const {
    std::vector<const StageEdge*> out;
    for (const auto& e : edges)
      if (e.from_stage == stage) out.push_back(&e);
    return out;
  }
};

namespace detail {

/// Operators reachable from an iteration head's body slot, up to and including the tail.
inline std::vector<bool> loop_body_ops(const LogicalPlan& plan) {
  std::vector<bool> body(plan.ops.size(), false);
  for (const auto& head : plan.ops) {
    if (head.kind != OpKind::iteration_head) continue;
    std::vector<std::size_t> work;
    for (auto [c, p] : plan.consumers(head.id, 0)) work.push_back(c);
    while (!work.empty()) {
      auto n = work.back();
      work.pop_back();
      if (body[n]) continue;
      body[n] = true;
      if (plan.ops[n].kind == OpKind::iteration_tail) continue;
      if (plan.ops[n].kind == OpKind::iteration_head)
        throw BuildError("nested iterations are not supported (operator " + std::to_string(n) + ")");
      for (auto [c, p] : plan.consumers(n)) work.push_back(c);
    }
  }
  return body;
}

}  // namespace detail

/// Fuses maximal chains of partition-preserving operators into stages.
inline StagedPlan fuse_stages(const LogicalPlan& plan) {
  plan.validate();
  const auto n = plan.ops.size();
  std::vector<std::size_t> chain_of(n, 0);
  std::vector<std::vector<std::size_t>> chains;

  auto fusable = [&](const OperatorDescriptor& d) -> std::optional<std::size_t> {
    if (d.effect != Partitioning::preserves || d.inputs.size() != 1) return std::nullopt;
    const auto& in = d.inputs[0];
    if (in.keyed || in.broadcast || in.feedback) return std::nullopt;
    const auto& p = plan.ops[in.from];
    if (p.kind == OpKind::iteration_head || d.kind == OpKind::iteration_head) return std::nullopt;
    if (p.bound != d.bound) return std::nullopt;
    if (plan.consumers(p.id).size() != 1) return std::nullopt;
    return p.id;
  };

  for (const auto& d : plan.ops) {
    if (auto p = fusable(d)) {
      chain_of[d.id] = chain_of[*p];
      chains[chain_of[d.id]].push_back(d.id);
    } else {
      chain_of[d.id] = chains.size();
      chains.push_back({d.id});
    }
  }

  // Stage ids: topological order over non-feedback edges, ties to the smallest operator id.
  const auto m = chains.size();
  std::vector<std::set<std::size_t>> succ(m);
  std::vector<std::size_t> indeg(m, 0);
  for (const auto& d : plan.ops) {
    for (const auto& in : d.inputs) {
      if (in.feedback) continue;
      auto a = chain_of[in.from];
      auto b = chain_of[d.id];
      if (a != b && succ[a].insert(b).second) ++indeg[b];
    }
  }
  using Entry = std::pair<std::size_t, std::size_t>;  // (first op id, chain)
  std::priority_queue<Entry, std::vector<Entry>, std::greater<>> ready;
  for (std::size_t c = 0; c < m; ++c)
    if (indeg[c] == 0) ready.emplace(chains[c].front(), c);
  std::vector<std::size_t> stage_of_chain(m, 0);
  StagedPlan out;
  out.logical = plan;
  while (!ready.empty()) {
    auto [first, c] = ready.top();
    ready.pop();
    stage_of_chain[c] = out.stages.size();
    Stage st;
    st.id = out.stages.size();
    st.ops = chains[c];
    st.cap = plan.ops[chains[c].front()].bound;
    st.collapses = plan.ops[chains[c].front()].effect == Partitioning::collapses;
    out.stages.push_back(std::move(st));
    for (auto s : succ[c])
      if (--indeg[s] == 0) ready.emplace(chains[s].front(), s);
  }
  if (out.stages.size() != m) throw BuildError("operator graph has a cycle outside iteration feedback");

  out.stage_of.resize(n);
  for (std::size_t i = 0; i < n; ++i) out.stage_of[i] = stage_of_chain[chain_of[i]];

  auto body = detail::loop_body_ops(plan);
  for (const auto& d : plan.ops) {
    for (std::size_t p = 0; p < d.inputs.size(); ++p) {
      const auto& in = d.inputs[p];
      auto fs = out.stage_of[in.from];
      auto ts = out.stage_of[d.id];
      if (fs == ts) continue;
      StageEdge e;
      e.from_stage = fs;
      e.to_stage = ts;
      e.from_op = in.from;
      e.from_slot = in.slot;
      e.to_op = d.id;
      e.to_port = p;
      e.feedback = in.feedback;
      const auto& from = plan.ops[in.from];
      e.tagged = body[in.from] || (from.kind == OpKind::iteration_head && in.slot == 0);
      if (in.broadcast) {
        e.kind = EdgeKind::broadcast;
      } else if (in.keyed) {
        e.kind = EdgeKind::keyed;
      } else if (d.effect == Partitioning::collapses || d.effect == Partitioning::round_robin) {
        e.kind = EdgeKind::round_robin;
      } else if (out.stages[fs].cap == out.stages[ts].cap && !out.stages[fs].collapses && !out.stages[ts].collapses) {
        e.kind = EdgeKind::one_to_one;
      } else {
        e.kind = EdgeKind::round_robin;
      }
      out.edges.push_back(e);
    }
  }
  std::sort(out.edges.begin(), out.edges.end(), [](const StageEdge& a, const StageEdge& b) {
    return std::tie(a.to_stage, a.to_port, a.from_stage) < std::tie(b.to_stage, b.to_port, b.from_stage);
  });
  return out;
}

enum class Medium { in_memory, tcp };

struct ChannelSpec {
  Coord from;
  Coord to;
  std::size_t edge = 0;
  Medium medium = Medium::in_memory;

  bool operator==(const ChannelSpec&) const = default;
};

struct TcpLink {
  std::size_t src_host = 0;
  std::size_t dst_host = 0;
  std::size_t dst_stage = 0;

  auto operator<=>(const TcpLink&) const = default;
};

/// A sender replica feeding a task, and where its batches land in the task queue.
struct InputChannel {
  std::size_t edge = 0;
  std::size_t port = 0;
  std::size_t sender_replica = 0;
  bool feedback = false;
};

struct ExecutionPlan {
  StagedPlan staged;
  Topology topology;
  /// replica_host[stage][replica] = host index, host-major.
  std::vector<std::vector<std::size_t>> replica_host;
  /// Edge kinds after replica-count reconciliation, parallel to staged.edges.
  std::vector<EdgeKind> edge_kind;
  std::vector<ChannelSpec> channels;
  std::vector<TcpLink> links;

  std::size_t replicas(std::size_t stage) const { return replica_host[stage].size(); }

  std::vector<Coord> tasks() const {
    std::vector<Coord> out;
    for (std::size_t s = 0; s < replica_host.size(); ++s)
      for (std::size_t r = 0; r < replica_host[s].size(); ++r)
        out.push_back(coord(s, r));
    return out;
  }

  std::vector<Coord> tasks_on(std::size_t host) const {
    std::vector<Coord> out;
    for (const auto& c : tasks())
      if (c.host == host) out.push_back(c);
    return out;
  }

  Coord coord(std::size_t stage, std::size_t replica) const {
    return Coord{static_cast<std::uint16_t>(replica_host[stage][replica]), static_cast<std::uint16_t>(stage),
                 static_cast<std::uint16_t>(replica)};
  }

  /// Receivers of sender replica `r` over edge `e`.
  std::vector<std::size_t> receivers(std::size_t e, std::size_t r) const {
    const auto& edge = staged.edges[e];
    if (edge_kind[e] == EdgeKind::one_to_one) return {r};
    std::vector<std::size_t> out(replicas(edge.to_stage));
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = i;
    return out;
  }

  /// Input channels of task (stage, replica) in queue-index order.
  std::vector<InputChannel> input_channels(std::size_t stage, std::size_t replica) const {
    std::vector<InputChannel> out;
    for (std::size_t e = 0; e < staged.edges.size(); ++e) {
      const auto& edge = staged.edges[e];
      if (edge.to_stage != stage) continue;
      if (edge_kind[e] == EdgeKind::one_to_one) {
        out.push_back({e, edge.to_port, replica, edge.feedback});
      } else {
        for (std::size_t r = 0; r < replicas(edge.from_stage); ++r) out.push_back({e, edge.to_port, r, edge.feedback});
      }
    }
    return out;
  }

  /// Queue index at the receiver of the channel (edge e, sender replica r).
  std::size_t channel_index(std::size_t e, std::size_t sender_replica, std::size_t receiver_replica) const {
    const auto& edge = staged.edges[e];
    std::size_t idx = 0;
    for (std::size_t i = 0; i < e; ++i) {
      if (staged.edges[i].to_stage != edge.to_stage) continue;
      idx += edge_kind[i] == EdgeKind::one_to_one ? 1 : replicas(staged.edges[i].from_stage);
    }
    (void)receiver_replica;
    return idx + (edge_kind[e] == EdgeKind::one_to_one ? 0 : sender_replica);
  }

  /// Deterministic text rendering: one line per task, then one per channel.
  std::string dump() const {
    std::ostringstream os;
    for (const auto& c : tasks()) os << "host=" << c.host << " stage=" << c.stage << " replica=" << c.replica << '\n';
    for (const auto& ch : channels)
      os << ch.from.str() << " \xE2\x86\x92 " << ch.to.str() << ' '
         << (ch.medium == Medium::in_memory ? "in-memory" : "tcp") << '\n';
    return os.str();
  }
};

/// Replica count per host for a stage: min(slots, remaining cap) host-major.
inline std::vector<std::size_t> allocate_replicas(const Topology& topo, std::size_t cap, bool collapses,
                                                  std::optional<std::size_t> override_count = {}) {
  std::vector<std::size_t> per_host(topo.hosts.size(), 0);
  if (collapses) {
    per_host[0] = 1;
    return per_host;
  }
  if (override_count) {
    std::size_t remaining = *override_count;
    while (remaining > 0) {
      for (std::size_t h = 0; h < topo.hosts.size() && remaining > 0; ++h) {
        auto n = std::min(topo.hosts[h].slots, remaining);
        per_host[h] += n;
        remaining -= n;
      }
    }
    return per_host;
  }
  std::size_t remaining = cap == 0 ? topo.total_slots() : cap;
  for (std::size_t h = 0; h < topo.hosts.size(); ++h) {
    auto n = std::min(topo.hosts[h].slots, remaining);
    per_host[h] = n;
    remaining -= n;
  }
  return per_host;
}

inline ExecutionPlan build_execution_plan(const StagedPlan& staged, const Topology& topo) {
  topo.validate();
  ExecutionPlan plan;
  plan.staged = staged;
  plan.topology = topo;
  for (const auto& st : staged.stages) {
    std::optional<std::size_t> ov;
    if (auto it = topo.task_overrides.find(st.id); it != topo.task_overrides.end()) ov = it->second;
    auto per_host = allocate_replicas(topo, st.cap, st.collapses, ov);
    std::vector<std::size_t> hosts;
    for (std::size_t h = 0; h < per_host.size(); ++h) hosts.insert(hosts.end(), per_host[h], h);
    if (hosts.empty()) throw BuildError("stage " + std::to_string(st.id) + " has no replicas");
    if (hosts.size() > 0xffff) throw BuildError("too many replicas for stage " + std::to_string(st.id));
    plan.replica_host.push_back(std::move(hosts));
  }
  for (const auto& e : staged.edges) {
    auto k = e.kind;
    if (k == EdgeKind::one_to_one && plan.replicas(e.from_stage) != plan.replicas(e.to_stage)) k = EdgeKind::round_robin;
    plan.edge_kind.push_back(k);
  }
  std::set<TcpLink> links;
  for (std::size_t e = 0; e < staged.edges.size(); ++e) {
    const auto& edge = staged.edges[e];
    for (std::size_t r = 0; r < plan.replicas(edge.from_stage); ++r) {
      for (auto t : plan.receivers(e, r)) {
        ChannelSpec ch;
        ch.from = plan.coord(edge.from_stage, r);
        ch.to = plan.coord(edge.to_stage, t);
        ch.edge = e;
        ch.medium = ch.from.host == ch.to.host ? Medium::in_memory : Medium::tcp;
        if (ch.medium == Medium::tcp) links.insert(TcpLink{ch.from.host, ch.to.host, edge.to_stage});
        plan.channels.push_back(ch);
      }
    }
  }
  plan.links.assign(links.begin(), links.end());
  return plan;
}

}  // namespace flow
