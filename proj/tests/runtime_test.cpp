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
#include <map>
#include <mutex>
#include <random>
#include <set>
#include <sstream>
#include <thread>

#include "flow/flow.hpp"
#include "support.hpp"

using namespace flow;
using namespace std::chrono_literals;

namespace {

// Reference FNV-1a 64 over a byte string.
std::uint64_t ref_fnv(const std::string& bytes) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

// A string key as it goes on the wire: u32 little-endian length, then the bytes.
std::string wire_string(const std::string& s) {
  std::string out;
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((s.size() >> (8 * i)) & 0xff));
  return out + s;
}

std::vector<std::string> corpus(std::size_t lines, unsigned seed) {
  static const char* words[] = {"alpha", "beta", "gamma", "delta", "eps", "zeta", "eta", "theta", "iota", "kappa"};
  std::mt19937 rng(seed);
  std::vector<std::string> out;
  for (std::size_t i = 0; i < lines; ++i) {
    std::string l;
    for (int w = 0, n = 1 + rng() % 12; w < n; ++w) l += std::string(words[rng() % 10]) + (rng() % 3 ? " " : "  ");
    out.push_back(l);
  }
  return out;
}

std::map<std::string, std::uint64_t> count_words(const std::vector<std::string>& lines) {
  std::map<std::string, std::uint64_t> out;
  for (const auto& l : lines) {
    std::istringstream in(l);
    std::string w;
    while (in >> w) ++out[w];
  }
  return out;
}

CollectResult<std::pair<std::string, std::uint64_t>> word_count(Environment& env, std::vector<std::string> lines) {
  return env
      .source_parallel([lines](std::size_t r, std::size_t n) {
        std::vector<std::string> mine;
        for (std::size_t i = r; i < lines.size(); i += n) mine.push_back(lines[i]);
        return mine;
      })
      .flat_map([](std::string l) {
        std::vector<std::string> ws;
        std::istringstream in(l);
        std::string w;
        while (in >> w) ws.push_back(w);
        return ws;
      })
      .group_by([](const std::string& w) { return w; })
      .map([](std::string) { return std::uint64_t{1}; })
      .reduce([](std::uint64_t a, std::uint64_t b) { return a + b; })
      .unkey()
      .collect();
}

}  // namespace

TEST(Routing, FnvMatchesReference) {
  EXPECT_EQ(fnv1a64({}), 14695981039346656037ull);
  const std::string a = "a";
  EXPECT_EQ(fnv1a64(std::span(reinterpret_cast<const std::uint8_t*>(a.data()), a.size())), 0xaf63dc4c8601ec8cull);
  for (const std::string& k : {std::string("a"), std::string("hello"), std::string(""), std::string(300, 'x')}) {
    EXPECT_EQ(key_hash(k), ref_fnv(wire_string(k))) << k;
    EXPECT_EQ(replica_for_hash(key_hash(k), 4), ref_fnv(wire_string(k)) % 4);
  }
  // An integer key hashes its 4 little-endian bytes.
  EXPECT_EQ(key_hash(std::int32_t{258}), ref_fnv(std::string("\x02\x01\x00\x00", 4)));
}

TEST(Routing, KeysStayOnOneHost) {
  auto topo = testsupport::localhost({2, 2});
  std::mutex mu;
  std::map<int, std::set<std::size_t>> hosts_of_key;
  testsupport::run_hosts(topo, [&](Environment& env) {
    auto host = env.config().host_index;
    env.source_parallel([](std::size_t r, std::size_t) {
         std::vector<int> v;
         for (int i = 0; i < 2000; ++i) v.push_back((i * 7 + static_cast<int>(r)) % 97);
         return v;
       })
        .group_by([](int x) { return x; })
        .for_each([&, host](std::pair<int, int> kv) {
          std::lock_guard lock(mu);
          hosts_of_key[kv.first].insert(host);
        });
    return 0;
  });
  EXPECT_EQ(hosts_of_key.size(), 97u);
  std::set<std::size_t> used;
  for (const auto& [k, hs] : hosts_of_key) {
    EXPECT_EQ(hs.size(), 1u) << "key " << k;
    used.insert(hs.begin(), hs.end());
  }
  EXPECT_EQ(used.size(), 2u);
}

TEST(Runtime, EmptySourceFinishes) {
  auto env = Environment::local(4);
  auto r = env.source_iter(std::vector<int>{}).shuffle().map([](int x) { return x; }).collect();
  env.execute();
  ASSERT_TRUE(r.get());
  EXPECT_TRUE(r.get()->empty());
}

TEST(Runtime, WordCountTwoHostsEqualsLocal) {
  auto lines = corpus(3000, 1);
  auto want = count_words(lines);

  auto env = Environment::local(3);
  auto local = word_count(env, lines);
  env.execute();
  std::map<std::string, std::uint64_t> got_local(local.get()->begin(), local.get()->end());
  EXPECT_EQ(got_local, want);

  auto topo = testsupport::localhost({2, 1});
  auto results = testsupport::run_hosts(topo, [&](Environment& e) { return word_count(e, lines); });
  ASSERT_TRUE(results[0].get());
  std::map<std::string, std::uint64_t> got_dist(results[0].get()->begin(), results[0].get()->end());
  EXPECT_EQ(got_dist, want);
  EXPECT_EQ(results[0].get()->size(), want.size()) << "one row per word";
}

TEST(Runtime, LoneWorkerReportsUnreachablePeer) {
  auto topo = testsupport::localhost({1, 1});
  Config c;
  c.topology = topo;
  c.connect_retry = {3, 10ms};
  Environment env(c);
  env.source_parallel([](std::size_t, std::size_t) { return std::vector<int>{1, 2, 3}; }).shuffle().for_each([](int) {});
  try {
    env.execute();
    FAIL() << "expected failure";
  } catch (const JobError& e) {
    EXPECT_NE(std::string(e.what()).find("unreachable"), std::string::npos) << e.what();
  }
}

TEST(Runtime, UserFailureOnOneHostFailsBoth) {
  auto topo = testsupport::localhost({1, 1});
  std::vector<Environment> envs;
  for (std::size_t h = 0; h < 2; ++h) envs.push_back(testsupport::host_env(topo, h));
  for (auto& env : envs) {
    env.source_parallel([](std::size_t r, std::size_t) { return std::vector<int>(1000, static_cast<int>(r)); })
        .shuffle()
        .map([](int x) {
          if (x == 1) throw std::runtime_error("replica one fails");
          return x;
        })
        .for_each([](int) {});
  }
  std::exception_ptr err1;
  std::thread t([&] {
    try {
      envs[1].execute();
    } catch (...) {
      err1 = std::current_exception();
    }
  });
  EXPECT_THROW(envs[0].execute(), JobError);
  t.join();
  EXPECT_TRUE(err1);
}

TEST(Runtime, StopEndsInfiniteSource) {
  auto env = Environment::local(2);
  std::atomic<std::uint64_t> seen{0};
  std::uint64_t n = 0;
  env.source_fn([n]() mutable -> std::optional<std::uint64_t> { return n++; }).shuffle().for_each([&](std::uint64_t) { ++seen; });
  auto job = env.execute_async();
  while (seen.load() < 10000) std::this_thread::sleep_for(1ms);
  job.stop();
  job.join();
  EXPECT_GE(seen.load(), 10000u);
}

TEST(Runtime, NoLeakedThreadsOrSockets) {
  // Warm up once so lazily created process-wide resources do not count.
  {
    auto env = Environment::local(2);
    env.source_iter(std::vector<int>{1}).for_each([](int) {});
    env.execute();
  }
  auto threads = net::count_threads();
  auto sockets = net::count_sockets();
  for (int round = 0; round < 3; ++round) {
    auto topo = testsupport::localhost({2, 1});
    auto lines = corpus(500, static_cast<unsigned>(round));
    testsupport::run_hosts(topo, [&](Environment& e) { return word_count(e, lines); });

    Config c;
    c.topology = testsupport::localhost({1, 1});
    c.connect_retry = {2, 5ms};
    Environment lone(c);
    lone.source_parallel([](std::size_t, std::size_t) { return std::vector<int>{1}; }).shuffle().for_each([](int) {});
    EXPECT_THROW(lone.execute(), JobError);
  }
  EXPECT_EQ(net::count_threads(), threads);
  EXPECT_EQ(net::count_sockets(), sockets);
}

TEST(Runtime, RepeatedRunsAreDeterministic) {
  auto lines = corpus(500, 9);
  std::vector<std::pair<std::string, std::uint64_t>> first;
  for (int i = 0; i < 5; ++i) {
    auto env = Environment::local(4);
    auto r = word_count(env, lines);
    env.execute();
    auto got = testsupport::sorted(*r.get());
    if (i == 0) first = got;
    EXPECT_EQ(got, first);
  }
}
