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

#include <algorithm>
#include <map>
#include <numeric>
#include <random>
#include <tuple>
#include <vector>

#include "flow/flow.hpp"
#include "support.hpp"

using namespace flow;

namespace {

// Window indices k with k*slide <= ts < k*slide + size, by enumeration.
std::vector<std::int64_t> brute_windows(std::int64_t ts, std::int64_t size, std::int64_t slide) {
  std::vector<std::int64_t> out;
  for (std::int64_t k = -2000; k <= 2000; ++k)
    if (k * slide <= ts && ts < k * slide + size) out.push_back(k);
  return out;
}

using Row = std::tuple<int, std::int64_t, MaybeTime>;  // key, value, ts

template <class Agg = SumAgg<std::int64_t>>
struct Harness {
  explicit Harness(WindowSpec<std::int64_t> spec, Agg agg = {}) : core(std::move(spec), agg, &stats) {}

  auto sink() {
    return [this](const int& k, typename Agg::Out&& v, MaybeTime ts) { out.emplace_back(k, static_cast<std::int64_t>(v), ts); };
  }
  void item(int key, std::int64_t v, MaybeTime ts = std::nullopt) {
    core.item(std::move(key), std::move(v), ts, Clock::now(), sink());
  }
  void advance(Timestamp t) { core.advance(t, sink()); }
  void drain() { core.drain(sink()); }

  JobStats stats;
  WindowCore<int, std::int64_t, Agg> core;
  std::vector<Row> out;
};

WindowSpec<std::int64_t> spec(WindowDescriptor d) { return {d, {}}; }

// Tumbling event-time sums per (key, window end - 1) computed directly.
std::map<std::pair<int, Timestamp>, std::int64_t> tumbling_oracle(const std::vector<std::tuple<int, std::int64_t, Timestamp>>& items,
                                                                  std::int64_t size) {
  std::map<std::pair<int, Timestamp>, std::int64_t> out;
  for (auto [k, v, ts] : items) {
    std::int64_t start = ts >= 0 ? ts / size * size : -((-ts + size - 1) / size) * size;
    out[{k, start + size - 1}] += v;
  }
  return out;
}

}  // namespace

TEST(Frontier, MinimumOfChannelMaxima) {
  WatermarkFrontier f(3);
  f.observe(0, 5);
  f.observe(1, 3);
  EXPECT_EQ(f.observe(2, 7), std::optional<Timestamp>(3));
  EXPECT_EQ(f.observe(1, 6), std::optional<Timestamp>(5));
  EXPECT_EQ(f.frontier(), 5);
}

TEST(Frontier, TwoReplicas) {
  WatermarkFrontier f(2);
  EXPECT_FALSE(f.observe(0, 5));
  EXPECT_EQ(f.observe(1, 3), std::optional<Timestamp>(3));
  EXPECT_FALSE(f.observe(0, 10));
  EXPECT_EQ(f.frontier(), 3);
  EXPECT_EQ(f.observe(1, 12), std::optional<Timestamp>(10));
}

TEST(Frontier, RegressionIsRejected) {
  WatermarkFrontier f(1);
  f.observe(0, 10);
  EXPECT_THROW(f.observe(0, 9), InvariantError);
  EXPECT_NO_THROW(f.observe(0, 10));
}

TEST(Frontier, ClosedChannelsStopHoldingBack) {
  WatermarkFrontier f(2);
  f.observe(0, 50);
  f.observe(1, 10);
  EXPECT_EQ(f.close(1), std::optional<Timestamp>(50));
  EXPECT_FALSE(f.close(0));
}

TEST(Frontier, RandomPropertyMatchesMinOfMaxima) {
  std::mt19937 rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    std::size_t n = 1 + rng() % 6;
    WatermarkFrontier f(n);
    std::vector<Timestamp> latest(n, kMinTime);
    for (int step = 0; step < 100; ++step) {
      auto ch = rng() % n;
      latest[ch] = (latest[ch] == kMinTime ? 0 : latest[ch]) + static_cast<Timestamp>(rng() % 20);
      f.observe(ch, latest[ch]);
      ASSERT_EQ(f.frontier(), *std::min_element(latest.begin(), latest.end()));
    }
  }
}

TEST(TimeWindows, Examples) {
  EXPECT_EQ(time_windows_of(11, 10, 10), (std::pair<std::int64_t, std::int64_t>{1, 1}));
  EXPECT_EQ(time_windows_of(95, 100, 20), (std::pair<std::int64_t, std::int64_t>{0, 4}));
  EXPECT_EQ(time_windows_of(-1, 10, 10), (std::pair<std::int64_t, std::int64_t>{-1, -1}));
  auto gap = time_windows_of(7, 5, 10);
  EXPECT_GT(gap.first, gap.second);
}

TEST(TimeWindows, MatchesEnumeration) {
  std::mt19937 rng(5);
  for (int i = 0; i < 3000; ++i) {
    std::int64_t size = 1 + rng() % 40, slide = 1 + rng() % 40;
    std::int64_t ts = static_cast<std::int64_t>(rng() % 4000) - 2000;
    auto [first, last] = time_windows_of(ts, size, slide);
    std::vector<std::int64_t> got;
    for (auto k = first; k <= last; ++k) got.push_back(k);
    ASSERT_EQ(got, brute_windows(ts, size, slide)) << ts << " " << size << " " << slide;
  }
}

TEST(CountWindows, SlidingClosesAtExpectedItems) {
  Harness<> h(spec(CountWindow::sliding(5, 2)));
  std::vector<int> closed_at;
  for (int i = 1; i <= 10; ++i) {
    auto before = h.out.size();
    h.item(0, i);
    if (h.out.size() > before) closed_at.push_back(i);
  }
  EXPECT_EQ(closed_at, (std::vector<int>{5, 7, 9}));
  h.drain();
  EXPECT_EQ(h.out.size(), 3u);
  EXPECT_EQ(std::get<1>(h.out[0]), 1 + 2 + 3 + 4 + 5);
}

TEST(CountWindows, TumblingFlushesPartialTail) {
  Harness<> h(spec(CountWindow::tumbling(4)));
  for (int i = 1; i <= 10; ++i) h.item(i % 2, i);
  h.drain();
  std::map<int, std::vector<std::int64_t>> per_key;
  for (auto& [k, v, ts] : h.out) per_key[k].push_back(v);
  EXPECT_EQ(per_key[1], (std::vector<std::int64_t>{1 + 3 + 5 + 7, 9}));
  EXPECT_EQ(per_key[0], (std::vector<std::int64_t>{2 + 4 + 6 + 8, 10}));
}

TEST(EventTimeWindows, TumblingDrainEmitsEverything) {
  Harness<> h(spec(EventTimeWindow::tumbling(10)));
  h.item(0, 1, 3);
  h.item(0, 2, 14);
  h.item(1, 5, 14);
  EXPECT_TRUE(h.out.empty());
  h.advance(10);
  ASSERT_EQ(h.out.size(), 1u);
  EXPECT_EQ(h.out[0], Row(0, 1, 9));
  h.drain();
  EXPECT_EQ(h.out.size(), 3u);
}

TEST(EventTimeWindows, LateItemsAreCountedAndDropped) {
  Harness<> h(spec(EventTimeWindow::tumbling(10)));
  h.advance(100);
  h.item(0, 1, 50);
  h.item(0, 1, 100);
  h.drain();
  EXPECT_EQ(h.stats.late_items.load(), 1u);
  ASSERT_EQ(h.out.size(), 1u);
  EXPECT_EQ(std::get<2>(h.out[0]), MaybeTime(109));
}

TEST(EventTimeWindows, PermutationInvariance) {
  std::mt19937 rng(9);
  std::vector<std::tuple<int, std::int64_t, Timestamp>> items;
  for (int i = 0; i < 1000; ++i)
    items.emplace_back(static_cast<int>(rng() % 7), static_cast<std::int64_t>(rng() % 100), static_cast<Timestamp>(rng() % 5000));
  auto oracle = tumbling_oracle(items, 100);

  for (int trial = 0; trial < 20; ++trial) {
    std::shuffle(items.begin(), items.end(), rng);
    // Watermark after each item: just below the smallest timestamp still to come.
    std::vector<Timestamp> suffix_min(items.size() + 1, kMaxTime);
    for (std::size_t i = items.size(); i-- > 0;) suffix_min[i] = std::min(suffix_min[i + 1], std::get<2>(items[i]));
    Harness<> h(spec(EventTimeWindow::tumbling(100)));
    for (std::size_t i = 0; i < items.size(); ++i) {
      auto [k, v, ts] = items[i];
      h.item(k, v, ts);
      if (suffix_min[i + 1] != kMaxTime) h.advance(suffix_min[i + 1]);
    }
    h.drain();
    EXPECT_EQ(h.stats.late_items.load(), 0u);
    std::map<std::pair<int, Timestamp>, std::int64_t> got;
    for (auto& [k, v, ts] : h.out) {
      ASSERT_TRUE(ts);
      auto [it, fresh] = got.emplace(std::make_pair(k, *ts), v);
      EXPECT_TRUE(fresh) << "window emitted twice";
      (void)it;
    }
    EXPECT_EQ(got, oracle);
  }
}

TEST(EventTimeWindows, SumIsConserved) {
  std::mt19937 rng(13);
  for (int trial = 0; trial < 50; ++trial) {
    std::int64_t slide = 1 + rng() % 30, factor = 1 + rng() % 4;
    Harness<> tumbling(spec(EventTimeWindow::tumbling(slide)));
    Harness<> sliding(spec(EventTimeWindow::sliding(slide * factor, slide)));
    std::int64_t total = 0;
    for (int i = 0; i < 500; ++i) {
      std::int64_t v = rng() % 1000;
      Timestamp ts = rng() % 10000;
      total += v;
      tumbling.item(static_cast<int>(rng() % 3), v, ts);
      sliding.item(0, v, ts);
    }
    tumbling.drain();
    sliding.drain();
    auto sum = [](const std::vector<Row>& out) {
      std::int64_t s = 0;
      for (auto& e : out) s += std::get<1>(e);
      return s;
    };
    EXPECT_EQ(sum(tumbling.out), total);
    EXPECT_EQ(sum(sliding.out), factor * total);
  }
}

TEST(TransactionWindows, NothingCommitsUntilEnd) {
  WindowSpec<std::int64_t> s{WindowDescriptor{WindowKind::transaction, 0, 0}, [](const std::int64_t&) { return false; }};
  Harness<> h(s);
  for (int i = 1; i <= 5; ++i) h.item(0, i);
  EXPECT_TRUE(h.out.empty());
  h.drain();
  ASSERT_EQ(h.out.size(), 1u);
  EXPECT_EQ(std::get<1>(h.out[0]), 15);
}

TEST(TransactionWindows, EveryItemCommits) {
  WindowSpec<std::int64_t> s{WindowDescriptor{WindowKind::transaction, 0, 0}, [](const std::int64_t&) { return true; }};
  Harness<> h(s);
  for (int i = 1; i <= 5; ++i) h.item(i % 2, i);
  EXPECT_EQ(h.out.size(), 5u);
  h.drain();
  EXPECT_EQ(h.out.size(), 5u);
}

TEST(WindowDescriptor, Validation) {
  EXPECT_THROW(CountWindow::sliding(0, 1).validate(), BuildError);
  EXPECT_THROW(EventTimeWindow::sliding(10, 0).validate(), BuildError);
  auto env = Environment::local(1);
  EXPECT_THROW(env.source_iter(std::vector<int>{1}).group_by([](int x) { return x; }).window(CountWindow::tumbling(0)), BuildError);
}

TEST(WindowJobs, KeyedEventTimeAcrossReplicas) {
  std::vector<std::tuple<int, std::int64_t, Timestamp>> items;
  std::mt19937 rng(21);
  for (int i = 0; i < 3000; ++i)
    items.emplace_back(static_cast<int>(rng() % 11), static_cast<std::int64_t>(rng() % 50), static_cast<Timestamp>(i + rng() % 40));
  auto oracle = tumbling_oracle(items, 250);

  for (std::size_t slots : {1u, 3u}) {
    auto env = Environment::local(slots);
    auto r = env.source_parallel([items](std::size_t r, std::size_t n) {
                  std::vector<std::tuple<int, std::int64_t, Timestamp>> mine;
                  for (std::size_t i = r; i < items.size(); i += n) mine.push_back(items[i]);
                  return mine;
                })
                 .add_timestamps([](const std::tuple<int, std::int64_t, Timestamp>& t) { return std::get<2>(t); },
                                 [](const auto&, Timestamp ts) -> std::optional<Timestamp> { return ts - 40; })
                 .group_by([](const std::tuple<int, std::int64_t, Timestamp>& t) { return std::get<0>(t); })
                 .map([](std::tuple<int, std::int64_t, Timestamp> t) { return std::get<1>(t); })
                 .window(EventTimeWindow::tumbling(250))
                 .sum()
                 .unkey()
                 .with_timestamp()
                 .collect();
    env.execute();
    std::map<std::pair<int, Timestamp>, std::int64_t> got;
    for (const auto& [ts, kv] : *r.get()) got[{kv.first, ts}] += kv.second;
    EXPECT_EQ(got, oracle) << "slots " << slots;
    EXPECT_EQ(env.stats().late_items, 0u);
  }
}

TEST(WindowJobs, ProcessingTimeCountsEveryItem) {
  auto env = Environment::local(2);
  auto r = env.source_parallel([](std::size_t, std::size_t) { return std::vector<int>(500, 1); })
               .group_by([](int) { return 0; })
               .window(ProcessingTimeWindow::tumbling(std::chrono::milliseconds(5)))
               .count()
               .unkey()
               .collect();
  env.execute();
  std::uint64_t total = 0;
  for (const auto& [k, n] : *r.get()) total += n;
  EXPECT_EQ(total, 1000u);
}
