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

#include <atomic>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <numeric>
#include <random>
#include <set>
#include <thread>

#include "flow/flow.hpp"
#include "support.hpp"

using namespace flow;
using testsupport::sorted;

namespace {

std::vector<int> iota_vec(int from, int to) {
  std::vector<int> v(static_cast<std::size_t>(to - from));
  std::iota(v.begin(), v.end(), from);
  return v;
}

std::string temp_file(const std::string& name, const std::vector<std::string>& lines) {
  auto path = std::filesystem::temp_directory_path() / ("flow-test-" + std::to_string(::getpid()) + "-" + name);
  std::ofstream out(path);
  for (const auto& l : lines) out << l << '\n';
  return path.string();
}

}  // namespace

// Sources.

TEST(Sources, RangeEmitsAllIntegers) {
  auto env = Environment::local(1);
  auto r = env.source_iter(iota_vec(0, 100)).collect();
  env.execute();
  EXPECT_EQ(*r.get(), iota_vec(0, 100));
}

TEST(Sources, EmptyIteratorOnlyTerminates) {
  auto env = Environment::local(2);
  auto r = env.source_iter(std::vector<int>{}).collect();
  env.execute();
  EXPECT_TRUE(r.get()->empty());
}

TEST(Sources, StringsKeepOrder) {
  auto env = Environment::local(1);
  std::vector<std::string> in{"x", "y", "z"};
  auto r = env.source_iter(in).collect();
  env.execute();
  EXPECT_EQ(*r.get(), in);
}

TEST(Sources, ParallelGeneratorRanges) {
  auto env = Environment::local(3);
  auto seen = std::make_shared<std::mutex>();
  auto calls = std::make_shared<std::map<std::size_t, std::size_t>>();
  auto r = env.source_parallel([seen, calls](std::size_t id, std::size_t n) {
                std::lock_guard lock(*seen);
                (*calls)[id] = n;
                return iota_vec(static_cast<int>(10 * id), static_cast<int>(10 * (id + 1)));
              })
               .collect();
  env.execute();
  EXPECT_EQ(sorted(*r.get()), iota_vec(0, 30));
  EXPECT_EQ(*calls, (std::map<std::size_t, std::size_t>{{0, 3}, {1, 3}, {2, 3}}));
}

TEST(Sources, ParallelWithOneReplicaMatchesIterator) {
  auto gen = [](std::size_t, std::size_t) { return iota_vec(5, 17); };
  auto env = Environment::local(1);
  auto r = env.source_parallel(gen).collect();
  env.execute();
  EXPECT_EQ(*r.get(), gen(0, 1));
}

TEST(Sources, ParallelDisjointRangesUnion) {
  auto env = Environment::local(4);
  auto r = env.source_parallel([](std::size_t id, std::size_t n) {
                return iota_vec(static_cast<int>(1000 * id / n), static_cast<int>(1000 * (id + 1) / n));
              })
               .collect();
  env.execute();
  EXPECT_EQ(sorted(*r.get()), iota_vec(0, 1000));
}

TEST(Sources, FileLinesInOrderOnOneReplica) {
  auto path = temp_file("two", {"first line", "second line"});
  auto env = Environment::local(1);
  auto r = env.source_file_lines(path).collect();
  env.execute();
  EXPECT_EQ(*r.get(), (std::vector<std::string>{"first line", "second line"}));
  std::filesystem::remove(path);
}

TEST(Sources, FileLinesSplitAcrossReplicas) {
  std::vector<std::string> lines;
  std::mt19937 rng(7);
  for (int i = 0; i < 10000; ++i) lines.push_back("line " + std::to_string(i) + std::string(rng() % 40, 'x'));
  auto path = temp_file("many", lines);
  auto env = Environment::local(4);
  auto r = env.source_file_lines(path).collect();
  env.execute();
  // Oracle: read the file directly.
  std::vector<std::string> expect;
  std::ifstream in(path);
  for (std::string l; std::getline(in, l);) expect.push_back(l);
  EXPECT_EQ(sorted(*r.get()), sorted(expect));
  std::filesystem::remove(path);
}

TEST(Sources, EmptyFile) {
  auto path = temp_file("empty", {});
  auto env = Environment::local(3);
  auto r = env.source_file_lines(path).collect();
  env.execute();
  EXPECT_TRUE(r.get()->empty());
  std::filesystem::remove(path);
}

TEST(Sources, MissingFileIsBuildError) {
  auto env = Environment::local(1);
  EXPECT_THROW(env.source_file_lines("/nonexistent/flow/input.txt"), BuildError);
}

// Element-wise operators.

TEST(Elementwise, MapDoubles) {
  auto env = Environment::local(2);
  auto r = env.source_iter(std::vector<int>{1, 2, 3}).map([](int x) { return x * 2; }).collect();
  env.execute();
  EXPECT_EQ(sorted(*r.get()), (std::vector<int>{2, 4, 6}));
}

TEST(Elementwise, FlatMapThreeOutputs) {
  auto env = Environment::local(1);
  auto r = env.source_iter(std::vector<int>{2})
               .flat_map([](int i) { return std::vector<int>{i, 2 * i, 3 * i}; })
               .collect();
  env.execute();
  EXPECT_EQ(*r.get(), (std::vector<int>{2, 4, 6}));
}

TEST(Elementwise, FilterEven) {
  auto env = Environment::local(3);
  auto r = env.source_iter(iota_vec(1, 7)).filter([](int x) { return x % 2 == 0; }).collect();
  env.execute();
  EXPECT_EQ(sorted(*r.get()), (std::vector<int>{2, 4, 6}));
}

TEST(Elementwise, RichMapPreviousDifference) {
  auto env = Environment::local(1);
  auto r = env.source_iter(std::vector<int>{3, 5, 9})
               .rich_map(0, [](int& prev, int x) { return x - std::exchange(prev, x); })
               .collect();
  env.execute();
  EXPECT_EQ(*r.get(), (std::vector<int>{3, 2, 4}));
}

TEST(Elementwise, RichMapRunningMax) {
  std::vector<int> in{1, 3, 2, 5};
  auto env = Environment::local(1);
  auto r = env.source_iter(in).rich_map(0, [](int& m, int x) { return m = std::max(m, x); }).collect();
  env.execute();
  std::vector<int> expect;
  int m = 0;
  for (int x : in) expect.push_back(m = std::max(m, x));
  EXPECT_EQ(*r.get(), expect);
}

TEST(Elementwise, RichMapWithUnusedStateIsMap) {
  auto env = Environment::local(2);
  auto r = env.source_iter(iota_vec(0, 20)).rich_map(0, [](int&, int x) { return x + 1; }).collect();
  env.execute();
  EXPECT_EQ(sorted(*r.get()), iota_vec(1, 21));
}

TEST(Elementwise, UserExceptionFailsJob) {
  auto env = Environment::local(2);
  env.source_iter(iota_vec(0, 100))
      .map([](int x) {
        if (x == 42) throw std::runtime_error("boom");
        return x;
      })
      .for_each([](int) {});
  try {
    env.execute();
    FAIL() << "expected failure";
  } catch (const JobError& e) {
    EXPECT_NE(std::string(e.what()).find("boom"), std::string::npos);
  }
}

// Folds.

TEST(Folds, FoldSum) {
  auto env = Environment::local(4);
  auto r = env.source_iter(iota_vec(0, 100)).fold(0, [](int& acc, int x) { acc += x; }).collect();
  env.execute();
  EXPECT_EQ(*r.get(), std::vector<int>{100 * 99 / 2});
}

TEST(Folds, ReduceAssocOverPermutation) {
  auto in = iota_vec(1, 11);
  std::shuffle(in.begin(), in.end(), std::mt19937(3));
  auto env = Environment::local(4);
  auto r = env.source_parallel([in](std::size_t id, std::size_t n) {
                std::vector<int> mine;
                for (std::size_t i = id; i < in.size(); i += n) mine.push_back(in[i]);
                return mine;
              })
               .reduce_assoc([](int a, int b) { return a + b; })
               .collect();
  env.execute();
  EXPECT_EQ(*r.get(), std::vector<int>{55});
}

TEST(Folds, StringConcatInPartitionOrder) {
  auto env = Environment::local(3);
  std::vector<std::string> in{"a", "b", "c", "d", "e"};
  auto r = env.source_iter(in).fold(std::string{}, [](std::string& acc, std::string s) { acc += s; }).collect();
  env.execute();
  std::string expect;
  for (const auto& s : in) expect += s;
  EXPECT_EQ(*r.get(), std::vector<std::string>{expect});
}

TEST(Folds, FoldAssocMatchesFold) {
  auto env = Environment::local(4);
  auto parts = env.source_parallel([](std::size_t id, std::size_t n) {
                    return iota_vec(static_cast<int>(500 * id / n), static_cast<int>(500 * (id + 1) / n));
                  })
                   .split(2);
  auto a = parts[0].fold_assoc(0L, [](long& acc, int x) { acc += x; }, [](long& acc, long p) { acc += p; }).collect();
  auto b = parts[1].fold(0L, [](long& acc, int x) { acc += x; }).collect();
  env.execute();
  EXPECT_EQ(*a.get(), *b.get());
  EXPECT_EQ((*a.get())[0], 499L * 500 / 2);
}

TEST(Folds, ReduceOfEmptyStreamEmitsNothing) {
  auto env = Environment::local(2);
  auto r = env.source_iter(std::vector<int>{}).reduce([](int a, int b) { return a + b; }).collect();
  env.execute();
  EXPECT_TRUE(r.get()->empty());
}

// Partitioning.

TEST(GroupBy, ParityPartitions) {
  auto env = Environment::local(2);
  auto r = env.source_iter(iota_vec(1, 7)).group_by([](int x) { return x % 2; }).collect();
  env.execute();
  std::map<int, std::vector<int>> parts;
  for (auto [k, v] : *r.get()) parts[k].push_back(v);
  EXPECT_EQ(sorted(parts[0]), (std::vector<int>{2, 4, 6}));
  EXPECT_EQ(sorted(parts[1]), (std::vector<int>{1, 3, 5}));
}

TEST(GroupBy, KeysAreColocated) {
  std::mt19937_64 rng(11);
  std::vector<std::uint64_t> in;
  for (int i = 0; i < 1000; ++i) in.push_back(rng() % 97);
  auto env = Environment::local(4);
  // A per-key fold emits once per replica holding the key, so one output per
  // key means every key lived on a single replica.
  auto r = env.source_parallel([in](std::size_t id, std::size_t n) {
                std::vector<std::uint64_t> mine;
                for (std::size_t i = id; i < in.size(); i += n) mine.push_back(in[i]);
                return mine;
              })
               .group_by([](std::uint64_t x) { return x; })
               .fold(std::uint64_t{0}, [](std::uint64_t& c, std::uint64_t) { ++c; })
               .collect();
  env.execute();
  std::map<std::uint64_t, std::uint64_t> expect;
  for (auto x : in) ++expect[x];
  std::map<std::uint64_t, std::uint64_t> got;
  for (auto [k, c] : *r.get()) EXPECT_TRUE(got.emplace(k, c).second) << "key " << k << " split across replicas";
  EXPECT_EQ(got, expect);
}

TEST(GroupBy, ConstantKeyUsesOneReplica) {
  auto env = Environment::local(4);
  auto r = env.source_parallel([](std::size_t id, std::size_t) { return iota_vec(static_cast<int>(id) * 10, static_cast<int>(id) * 10 + 10); })
               .group_by([](int) { return 0; })
               .fold(0, [](int& c, int) { ++c; })
               .collect();
  env.execute();
  EXPECT_EQ(*r.get(), (std::vector<std::pair<int, int>>{{0, 40}}));
}

TEST(GroupByReduce, ParitySums) {
  auto env = Environment::local(3);
  auto r = env.source_iter(iota_vec(1, 7)).group_by_reduce([](int x) { return x % 2; }, [](int a, int b) { return a + b; }).collect();
  env.execute();
  EXPECT_EQ(sorted(*r.get()), (std::vector<std::pair<int, int>>{{0, 12}, {1, 9}}));
}

TEST(GroupByReduce, OneItemPerKeyIsIdentity) {
  auto env = Environment::local(2);
  auto r = env.source_iter(iota_vec(0, 50)).group_by_reduce([](int x) { return x; }, [](int a, int b) { return a + b; }).collect();
  env.execute();
  std::vector<std::pair<int, int>> expect;
  for (int i = 0; i < 50; ++i) expect.emplace_back(i, i);
  EXPECT_EQ(sorted(*r.get()), expect);
}

TEST(GroupByReduce, WordCount) {
  auto env = Environment::local(4);
  auto r = env.source_iter(std::vector<std::string>{"a b a"})
               .flat_map([](std::string line) {
                 std::vector<std::pair<std::string, int>> out;
                 std::istringstream in(line);
                 for (std::string w; in >> w;) out.emplace_back(w, 1);
                 return out;
               })
               .group_by_reduce([](const std::pair<std::string, int>& p) { return p.first; },
                                [](auto a, auto b) { return std::pair<std::string, int>(a.first, a.second + b.second); })
               .map([](std::pair<std::string, int> p) { return p.second; })
               .collect();
  env.execute();
  EXPECT_EQ(sorted(*r.get()), (std::vector<std::pair<std::string, int>>{{"a", 2}, {"b", 1}}));
}

TEST(Shuffle, EvenSpreadWithUnitBatches) {
  auto env = Environment::local(4);
  env.set_batching(BatchingPolicy::fixed(1));
  auto counts = std::make_shared<std::map<std::thread::id, int>>();
  auto mu = std::make_shared<std::mutex>();
  env.source_iter(iota_vec(0, 1000)).shuffle().for_each([counts, mu](int) {
    std::lock_guard lock(*mu);
    ++(*counts)[std::this_thread::get_id()];
  });
  env.execute();
  ASSERT_EQ(counts->size(), 4u);
  for (auto& [t, c] : *counts) EXPECT_EQ(c, 250);
}

TEST(Shuffle, MaxParallelismOneThenFold) {
  auto env = Environment::local(4);
  auto parts = env.source_iter(iota_vec(0, 200)).split(2);
  auto capped = parts[0].max_parallelism(1).rich_map(0, [](int& acc, int x) { return acc += x; }).fold(0, [](int& a, int x) { a = std::max(a, x); }).collect();
  auto folded = parts[1].fold(0, [](int& a, int x) { a += x; }).collect();
  env.execute();
  EXPECT_EQ(*capped.get(), *folded.get());
}

TEST(Shuffle, KeyedShuffleDropsKeying) {
  auto env = Environment::local(2);
  auto keyed = env.source_iter(iota_vec(0, 10)).group_by([](int x) { return x % 3; });
  auto s = keyed.shuffle();
  static_assert(std::is_same_v<decltype(s), Stream<std::pair<int, int>>>);
  auto r = s.collect();
  env.execute();
  EXPECT_EQ(r.get()->size(), 10u);
}

// Multiple streams.

TEST(MultiStream, SplitDuplicates) {
  auto env = Environment::local(2);
  auto parts = env.source_iter(std::vector<int>{1, 2, 3}).split(2);
  auto a = parts[0].collect();
  auto b = parts[1].collect();
  env.execute();
  EXPECT_EQ(sorted(*a.get()), (std::vector<int>{1, 2, 3}));
  EXPECT_EQ(sorted(*b.get()), (std::vector<int>{1, 2, 3}));
}

TEST(MultiStream, MergeIsMultisetUnion) {
  auto env = Environment::local(2);
  auto r = env.source_iter(std::vector<int>{1, 2, 3}).merge(env.source_iter(std::vector<int>{4, 5, 6})).collect();
  env.execute();
  EXPECT_EQ(sorted(*r.get()), iota_vec(1, 7));
}

TEST(MultiStream, ZipPairsInOrder) {
  auto env = Environment::local(1);
  auto r = env.source_iter(std::vector<int>{1, 2, 3, 4}).zip(env.source_iter(std::vector<std::string>{"a", "b", "c"})).collect();
  env.execute();
  // Sequential pairing oracle.
  std::vector<int> a{1, 2, 3, 4};
  std::vector<std::string> b{"a", "b", "c"};
  std::vector<std::pair<int, std::string>> expect;
  for (std::size_t i = 0; i < std::min(a.size(), b.size()); ++i) expect.emplace_back(a[i], b[i]);
  EXPECT_EQ(*r.get(), expect);
}

TEST(MultiStream, DanglingStreamIsBuildError) {
  auto env = Environment::local(1);
  auto s = env.source_iter(std::vector<int>{1});
  (void)s.map([](int x) { return x; });
  EXPECT_THROW(env.execute(), BuildError);
}

TEST(Join, UsersAndPurchases) {
  using User = std::pair<int, std::string>;
  std::vector<User> users{{1, "u1"}, {2, "u2"}};
  std::vector<User> purchases{{1, "p1"}, {1, "p2"}};
  auto env = Environment::local(3);
  auto r = env.source_iter(users)
               .join(env.source_iter(purchases), [](const User& u) { return u.first; }, [](const User& p) { return p.first; })
               .unkey()
               .map([](auto x) { return std::tuple<int, std::string, std::string>(x.first, x.second.first.second, x.second.second.second); })
               .collect();
  env.execute();
  // Nested-loop oracle.
  std::vector<std::tuple<int, std::string, std::string>> expect;
  for (const auto& u : users)
    for (const auto& p : purchases)
      if (u.first == p.first) expect.emplace_back(u.first, u.second, p.second);
  EXPECT_EQ(sorted(*r.get()), sorted(expect));
}

TEST(Join, DisjointKeysInnerIsEmpty) {
  auto env = Environment::local(2);
  auto r = env.source_iter(std::vector<int>{1, 2}).join(env.source_iter(std::vector<int>{3, 4}), [](int x) { return x; }, [](int x) { return x; }).collect();
  env.execute();
  EXPECT_TRUE(r.get()->empty());
}

TEST(Join, LeftJoinKeepsUnmatched) {
  auto env = Environment::local(2);
  auto r = env.source_iter(std::vector<int>{1, 2})
               .left_join(env.source_iter(std::vector<int>{3, 4}), [](int x) { return x; }, [](int x) { return x; })
               .collect();
  env.execute();
  auto got = sorted(*r.get());
  ASSERT_EQ(got.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(got[i].first, static_cast<int>(i) + 1);
    EXPECT_EQ(got[i].second.first, static_cast<int>(i) + 1);
    EXPECT_FALSE(got[i].second.second.has_value());
  }
}

TEST(Join, OuterJoinCoversBothSides) {
  auto env = Environment::local(2);
  auto r = env.source_iter(std::vector<int>{1, 2})
               .outer_join(env.source_iter(std::vector<int>{2, 3}), [](int x) { return x; }, [](int x) { return x; })
               .collect();
  env.execute();
  std::map<int, std::pair<std::optional<int>, std::optional<int>>> got;
  for (auto& [k, v] : *r.get()) got[k] = v;
  EXPECT_EQ(got.size(), 3u);
  EXPECT_EQ(got[1].first, 1);
  EXPECT_FALSE(got[1].second);
  EXPECT_EQ(got[2].first, 2);
  EXPECT_EQ(got[2].second, 2);
  EXPECT_FALSE(got[3].first);
  EXPECT_EQ(got[3].second, 3);
}

// Windows through the API.

TEST(Windows, CountSlidingSum) {
  auto env = Environment::local(1);
  auto r = env.source_iter(iota_vec(1, 10)).window_all(CountWindow::sliding(5, 2)).sum().collect();
  env.execute();
  // Brute force: windows start every 2 items and hold 5; partial tails are dropped.
  auto in = iota_vec(1, 10);
  std::vector<int> expect;
  for (std::size_t s = 0; s + 5 <= in.size(); s += 2) expect.push_back(std::accumulate(in.begin() + s, in.begin() + s + 5, 0));
  EXPECT_EQ(*r.get(), expect);
  EXPECT_EQ(expect, (std::vector<int>{15, 25, 35}));
}

TEST(Windows, TransactionCommitsAfterLargeItem) {
  auto env = Environment::local(1);
  auto r = env.source_iter(std::vector<int>{1, 2, 150, 3, 200})
               .group_by([](int) { return 0; })
               .window(TransactionWindow{[](const int& v) { return v > 100; }})
               .process([](const std::vector<int>& items) { return items; })
               .unkey()
               .map([](std::pair<int, std::vector<int>> p) { return p.second; })
               .collect();
  env.execute();
  EXPECT_EQ(*r.get(), (std::vector<std::vector<int>>{{1, 2, 150}, {3, 200}}));
}

TEST(Windows, EventTimeTumblingMax) {
  using P = std::pair<Timestamp, int>;
  auto env = Environment::local(1);
  auto r = env.source_iter(std::vector<P>{{1, 4}, {11, 9}})
               .add_timestamps([](const P& p) { return p.first; },
                               [](const P& p, Timestamp) -> std::optional<Timestamp> { return p.first == 11 ? std::optional<Timestamp>(20) : std::nullopt; })
               .map([](P p) { return p.second; })
               .window_all(EventTimeWindow::tumbling(10))
               .max()
               .with_timestamp()
               .collect();
  env.execute();
  EXPECT_EQ(*r.get(), (std::vector<std::pair<Timestamp, int>>{{9, 4}, {19, 9}}));
}

TEST(Windows, EventTimeOnUntimestampedStreamIsBuildError) {
  auto env = Environment::local(1);
  auto s = env.source_iter(std::vector<int>{1});
  EXPECT_THROW(s.window_all(EventTimeWindow::tumbling(10)).sum(), BuildError);
}

// Sinks.

TEST(Sinks, CollectDoubled) {
  auto env = Environment::local(2);
  auto r = env.source_iter(std::vector<int>{1, 2, 3}).map([](int x) { return 2 * x; }).collect();
  env.execute();
  EXPECT_EQ(sorted(*r.get()), (std::vector<int>{2, 4, 6}));
}

TEST(Sinks, ForEachCounts) {
  auto env = Environment::local(3);
  auto counter = std::make_shared<std::atomic<int>>(0);
  env.source_iter(iota_vec(0, 777)).shuffle().for_each([counter](int) { ++*counter; });
  env.execute();
  EXPECT_EQ(counter->load(), 777);
}

TEST(Sinks, CollectChannelOverInfiniteSource) {
  auto env = Environment::local(2);
  auto next = std::make_shared<std::atomic<std::uint64_t>>(0);
  auto ch = env.source_fn([next]() -> std::optional<std::uint64_t> {
                 auto v = next->fetch_add(1);
                 if (v % 1000 == 999) std::this_thread::sleep_for(std::chrono::milliseconds(1));
                 return v;
               })
                .map([](std::uint64_t x) { return x * 3; })
                .collect_channel();
  auto job = env.execute_async();
  // The source is a single replica and the map is one-to-one, so the prefix arrives in order.
  std::vector<std::uint64_t> prefix;
  while (prefix.size() < 5000) {
    auto x = ch->recv();
    ASSERT_TRUE(x.has_value());
    prefix.push_back(*x);
  }
  job.stop();
  EXPECT_NO_THROW(job.join());
  while (ch->recv()) {
  }
  std::vector<std::uint64_t> expect;
  for (std::uint64_t i = 0; i < 5000; ++i) expect.push_back(3 * i);
  EXPECT_EQ(prefix, expect);
}

TEST(Environment, ExecuteTwiceIsBuildError) {
  auto env = Environment::local(1);
  env.source_iter(std::vector<int>{1}).for_each([](int) {});
  env.execute();
  EXPECT_THROW(env.execute(), BuildError);
}
