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

#include <gtest/gtest.h>

#include <map>
#include <random>
#include <set>
#include <sstream>

#include "flow/bench/common.hpp"
#include "flow/flow.hpp"

using namespace flow;

namespace {

Topology hosts(const std::vector<std::size_t>& slots) {
  Topology t;
  for (std::size_t i = 0; i < slots.size(); ++i)
    t.hosts.push_back({"127.0.0.1", static_cast<std::uint16_t>(30000 + 100 * i), slots[i]});
  return t;
}

Environment env_on(const Topology& t, std::size_t host = 0) {
  Config c;
  c.topology = t;
  c.host_index = host;
  return Environment(c);
}

/// The word-count pipeline used throughout: lines, tokens, group, count.
void word_count(Environment& env) {
  env.source_parallel([](std::size_t, std::size_t) { return std::vector<std::string>{"a b", "b c"}; })
      .flat_map([](std::string l) { return bench::tokenize(l); })
      .group_by([](const std::string& w) { return w; })
      .map([](std::string) { return 1; })
      .reduce([](int a, int b) { return a + b; })
      .collect();
}

std::vector<OpKind> kinds(const LogicalPlan& p) {
  std::vector<OpKind> out;
  for (const auto& d : p.ops) out.push_back(d.kind);
  return out;
}

}  // namespace

TEST(LogicalPlan, WordCountOperators) {
  auto env = Environment::local(2);
  word_count(env);
  auto plan = env.staged_plan().logical;
  EXPECT_EQ(kinds(plan), (std::vector<OpKind>{OpKind::source, OpKind::flat_map, OpKind::key_by, OpKind::map,
                                              OpKind::keyed_reduce, OpKind::sink_collect}));
}

TEST(LogicalPlan, GroupByReduceIsThreeOperators) {
  auto env = Environment::local(2);
  env.source_iter(std::vector<int>{1, 2}).group_by_reduce([](int x) { return x % 2; }, [](int a, int b) { return a + b; }).for_each([](auto) {});
  auto plan = env.staged_plan().logical;
  ASSERT_EQ(plan.ops.size(), 5u);
  EXPECT_EQ(plan.ops.front().kind, OpKind::source);
  EXPECT_EQ(plan.ops.back().kind, OpKind::sink_for_each);
  EXPECT_EQ(plan.ops[1].kind, OpKind::local_reduce);
  EXPECT_EQ(plan.ops[3].kind, OpKind::keyed_reduce);
}

TEST(LogicalPlan, SourceToSinkIsTwoNodes) {
  auto env = Environment::local(1);
  env.source_iter(std::vector<int>{1}).for_each([](int) {});
  EXPECT_EQ(env.staged_plan().logical.ops.size(), 2u);
}

TEST(LogicalPlan, ConsumingTwiceIsBuildError) {
  auto env = Environment::local(1);
  auto s = env.source_iter(std::vector<int>{1});
  s.for_each([](int) {});
  s.for_each([](int) {});
  EXPECT_THROW(env.staged_plan(), BuildError);
}

TEST(FuseStages, WordCountHasThreeStages) {
  auto env = Environment::local(4);
  word_count(env);
  auto staged = env.staged_plan();
  EXPECT_EQ(staged.stages.size(), 3u);
  EXPECT_EQ(staged.stages[0].ops, (std::vector<std::size_t>{0, 1}));
  EXPECT_EQ(staged.stages[1].ops, (std::vector<std::size_t>{2, 3, 4}));
  EXPECT_TRUE(staged.stages[2].collapses);
}

TEST(FuseStages, ElementwiseChainIsOneStage) {
  auto env = Environment::local(4);
  env.source_iter(std::vector<int>{1})
      .map([](int x) { return x; })
      .filter([](int) { return true; })
      .map([](int x) { return x; })
      .for_each([](int) {});
  EXPECT_EQ(env.staged_plan().stages.size(), 1u);
}

TEST(FuseStages, BoundaryRuleOracle) {
  auto env = Environment::local(4);
  env.source_parallel([](std::size_t, std::size_t) { return std::vector<int>{1}; })
      .map([](int x) { return x; })
      .group_by([](int x) { return x; })
      .map([](int v) { return v; })
      .shuffle()
      .map([](std::pair<int, int> p) { return p.second; })
      .for_each([](int) {});
  auto staged = env.staged_plan();
  // Oracle over the linear descriptor list: a new stage starts at every
  // operator that repartitions, reads a keyed input or changes the bound.
  const auto& ops = staged.logical.ops;
  std::size_t expect = 1;
  for (std::size_t i = 1; i < ops.size(); ++i) {
    bool boundary = ops[i].effect != Partitioning::preserves || ops[i].inputs[0].keyed || ops[i].bound != ops[i - 1].bound;
    expect += boundary ? 1 : 0;
  }
  EXPECT_EQ(expect, 3u);
  EXPECT_EQ(staged.stages.size(), expect);
}

TEST(ExecutionPlan, TwoPlusOneLayout) {
  auto env = env_on(hosts({2, 1}));
  word_count(env);
  auto plan = env.execution_plan();
  for (std::size_t s = 0; s < plan.staged.stages.size(); ++s) {
    if (plan.staged.stages[s].collapses) {
      EXPECT_EQ(plan.replica_host[s], std::vector<std::size_t>{0});
    } else {
      EXPECT_EQ(plan.replica_host[s], (std::vector<std::size_t>{0, 0, 1})) << "stage " << s;
    }
  }
  // Stage 0 -> stage 1 channels: host-0 senders reach the host-1 replica over one shared link.
  std::set<TcpLink> links(plan.links.begin(), plan.links.end());
  EXPECT_TRUE(links.count(TcpLink{0, 1, 1}));
  for (const auto& ch : plan.channels) {
    if (ch.from.stage != 0) continue;
    bool remote = ch.from.host != ch.to.host;
    EXPECT_EQ(ch.medium == Medium::tcp, remote);
  }
  std::size_t tcp_into_t12 = 0;
  for (const auto& ch : plan.channels)
    if (ch.from.stage == 0 && ch.from.host == 0 && ch.to == Coord{1, 1, 2}) ++tcp_into_t12;
  EXPECT_EQ(tcp_into_t12, 2u);
}

TEST(ExecutionPlan, OneSlotGivesOneReplicaEverywhere) {
  auto env = Environment::local(1);
  word_count(env);
  auto plan = env.execution_plan();
  for (const auto& r : plan.replica_host) EXPECT_EQ(r.size(), 1u);
  EXPECT_TRUE(plan.links.empty());
}

TEST(ExecutionPlan, MaxParallelismCapsOnFirstHost) {
  auto env = env_on(hosts({4, 4}));
  env.source_iter(std::vector<int>{1}).shuffle().max_parallelism(2).map([](int x) { return x; }).for_each([](int) {});
  auto plan = env.execution_plan();
  auto capped = plan.staged.stage_of[plan.staged.logical.ops.size() - 1];
  EXPECT_EQ(plan.replica_host[capped], (std::vector<std::size_t>{0, 0}));
}

TEST(ExecutionPlan, SingleHostHasNoTcp) {
  auto env = Environment::local(8);
  word_count(env);
  auto plan = env.execution_plan();
  EXPECT_TRUE(plan.links.empty());
  for (const auto& ch : plan.channels) EXPECT_EQ(ch.medium, Medium::in_memory);
}

TEST(ExecutionPlan, OneConnectionPerDestinationStage) {
  auto env = env_on(hosts({2, 2}));
  env.source_parallel([](std::size_t, std::size_t) { return std::vector<int>{1}; })
      .group_by([](int x) { return x; })
      .unkey()
      .group_by([](const std::pair<int, int>& p) { return p.second; })
      .for_each([](auto) {});
  auto plan = env.execution_plan();
  // Oracle: distinct (src host, dst host, dst stage) over cross-host channels.
  std::set<std::tuple<std::size_t, std::size_t, std::size_t>> triples;
  for (const auto& ch : plan.channels)
    if (ch.from.host != ch.to.host) triples.emplace(ch.from.host, ch.to.host, ch.to.stage);
  EXPECT_EQ(plan.links.size(), triples.size());
  std::map<std::pair<std::size_t, std::size_t>, int> per_direction;
  for (auto [a, b, s] : triples) ++per_direction[{a, b}];
  EXPECT_EQ(per_direction.size(), 2u);
  for (const auto& [dir, n] : per_direction) EXPECT_EQ(n, 2) << dir.first << "->" << dir.second;
}

TEST(ExecutionPlan, RandomTopologiesConserveReplicas) {
  std::mt19937 rng(2024);
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<std::size_t> slots(1 + rng() % 5);
    for (auto& s : slots) s = 1 + rng() % 6;
    auto topo = hosts(slots);
    std::size_t total = 0;
    for (auto s : slots) total += s;
    std::size_t cap = rng() % 3 == 0 ? 0 : 1 + rng() % 12;
    bool collapses = rng() % 5 == 0;
    auto per_host = allocate_replicas(topo, cap, collapses);
    ASSERT_EQ(per_host.size(), slots.size());
    std::size_t sum = 0;
    for (auto n : per_host) sum += n;
    if (collapses) {
      EXPECT_EQ(per_host[0], 1u);
      EXPECT_EQ(sum, 1u);
      continue;
    }
    std::size_t want = cap == 0 ? total : std::min(cap, total);
    EXPECT_EQ(sum, want);
    // Host-major: a host is partially filled only if every later host is empty.
    for (std::size_t h = 0; h < slots.size(); ++h) {
      EXPECT_LE(per_host[h], slots[h]);
      if (per_host[h] < slots[h]) {
        for (std::size_t j = h + 1; j < slots.size(); ++j) EXPECT_EQ(per_host[j], 0u);
      }
    }
  }
}

TEST(ExecutionPlan, TaskOverrideSpreadsHostMajor) {
  auto topo = hosts({2, 1});
  auto per_host = allocate_replicas(topo, 0, false, 5);
  EXPECT_EQ(per_host, (std::vector<std::size_t>{4, 1}));
}

TEST(ExecutionPlan, DumpIsDeterministic) {
  std::string first;
  for (int i = 0; i < 10; ++i) {
    auto env = env_on(hosts({2, 1}));
    word_count(env);
    auto dump = env.dump_plan();
    if (i == 0) first = dump;
    EXPECT_EQ(dump, first);
  }
  EXPECT_NE(first.find("tcp"), std::string::npos);
}

TEST(Topology, ParseFile) {
  std::istringstream in("# two hosts\nhost 10.0.0.1 9000 4\nhost 10.0.0.2 9000 2  # second\ntasks 1 3\n");
  auto t = Topology::parse(in);
  ASSERT_EQ(t.hosts.size(), 2u);
  EXPECT_EQ(t.hosts[1].address, "10.0.0.2");
  EXPECT_EQ(t.hosts[0].slots, 4u);
  EXPECT_EQ(t.task_overrides.at(1), 3u);
}

TEST(Topology, ParseErrors) {
  for (const char* bad : {"host a 1\n", "host a 70000 1\n", "host a 1 0\n", "node a 1 1\n", "host a 1 1 extra\n",
                          "host a 1 1\nhost a 1 1\n", ""}) {
    std::istringstream in(bad);
    EXPECT_THROW(Topology::parse(in), BuildError) << bad;
  }
}

TEST(Topology, HostIndexOutOfRange) {
  EXPECT_THROW(env_on(hosts({1, 1}), 2), BuildError);
}
