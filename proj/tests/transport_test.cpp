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
#include <atomic>
#include <chrono>
#include <map>
#include <mutex>
#include <random>
#include <string>
#include <thread>

#include "flow/flow.hpp"
#include "support.hpp"

using namespace flow;
using namespace std::chrono_literals;

namespace {

StreamMessage<std::string> random_message(std::mt19937& rng) {
  switch (rng() % 6) {
    case 0:
      return Item<std::string>{std::string(rng() % 40, static_cast<char>('a' + rng() % 26))};
    case 1:
      return TimestampedItem<std::string>{std::to_string(rng()), static_cast<Timestamp>(rng()) - (1ll << 31)};
    case 2:
      return Watermark{static_cast<Timestamp>(rng() % 100000)};
    case 3:
      return FlushBatch{};
    case 4:
      return Terminate{};
    default:
      return IterationEnd{static_cast<std::uint32_t>(rng() % 50)};
  }
}

// Little-endian bytes of an unsigned value, written independently of the codec.
void put_le(std::vector<std::uint8_t>& out, std::uint64_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

}  // namespace

TEST(BatchCodec, RandomBatchesRoundTrip) {
  std::mt19937 rng(7);
  for (int i = 0; i < 10000; ++i) {
    Batch<std::string> b;
    b.seq = static_cast<std::uint32_t>(rng());
    b.epoch = static_cast<std::uint32_t>(rng() % 10);
    auto n = rng() % 12;
    for (std::size_t j = 0; j < n; ++j) b.messages.push_back(random_message(rng));
    auto bytes = encode_batch(b);
    ASSERT_EQ(decode_batch<std::string>(bytes), b) << "batch " << i;
  }
}

TEST(BatchCodec, EmptyAndControlBatches) {
  Batch<int> empty;
  EXPECT_EQ(decode_batch<int>(encode_batch(empty)), empty);

  Batch<int> b;
  b.messages = {Item<int>{7}, Watermark{5}, Terminate{}};
  auto back = decode_batch<int>(encode_batch(b));
  EXPECT_EQ(back, b);
  EXPECT_EQ(back.data_count(), 1u);
}

TEST(BatchCodec, TruncatedInputFails) {
  Batch<int> b;
  b.messages = {Item<int>{1}, Item<int>{2}};
  auto bytes = encode_batch(b);
  bytes.pop_back();
  EXPECT_ANY_THROW(decode_batch<int>(bytes));
}

TEST(Wire, HelloLayout) {
  auto bytes = wire::encode_hello(wire::Hello{wire::kMagic, wire::kVersion, 3});
  std::vector<std::uint8_t> want;
  put_le(want, 0x464C4F57, 4);
  put_le(want, 1, 2);
  put_le(want, 3, 2);
  EXPECT_EQ(std::vector<std::uint8_t>(bytes.begin(), bytes.end()), want);
  auto h = wire::decode_hello(bytes);
  EXPECT_NO_THROW(wire::validate_hello(h, 3));
}

TEST(Wire, HelloValidation) {
  EXPECT_THROW(wire::validate_hello({0xDEADBEEF, wire::kVersion, 0}, 0), NetError);
  EXPECT_THROW(wire::validate_hello({wire::kMagic, 2, 0}, 0), NetError);
  EXPECT_THROW(wire::validate_hello({wire::kMagic, wire::kVersion, 1}, 0), NetError);
}

TEST(Wire, FrameHeaderLayout) {
  std::vector<std::uint8_t> payload{9, 8, 7};
  auto frame = wire::encode_frame(Coord{1, 2, 3}, 4, payload);
  std::vector<std::uint8_t> want;
  put_le(want, 1, 2);
  put_le(want, 2, 2);
  put_le(want, 3, 2);
  put_le(want, 4, 2);
  put_le(want, 3, 4);
  want.insert(want.end(), payload.begin(), payload.end());
  EXPECT_EQ(frame, want);
}

TEST(Wire, DecoderSurvivesOneByteReads) {
  std::mt19937 rng(11);
  std::vector<wire::Frame> sent;
  std::vector<std::uint8_t> stream;
  for (int i = 0; i < 300; ++i) {
    wire::Frame f;
    f.header.sender = Coord{static_cast<std::uint16_t>(rng() % 4), static_cast<std::uint16_t>(rng() % 8),
                            static_cast<std::uint16_t>(rng() % 16)};
    f.header.receiver_replica = static_cast<std::uint16_t>(rng() % 16);
    f.payload.resize(rng() % 200);
    for (auto& b : f.payload) b = static_cast<std::uint8_t>(rng());
    f.header.payload_len = static_cast<std::uint32_t>(f.payload.size());
    auto bytes = wire::encode_frame(f.header.sender, f.header.receiver_replica, f.payload);
    stream.insert(stream.end(), bytes.begin(), bytes.end());
    sent.push_back(std::move(f));
  }

  wire::FrameDecoder dec;
  std::vector<wire::Frame> got;
  for (auto byte : stream) {
    dec.feed(std::span<const std::uint8_t>(&byte, 1));
    while (auto f = dec.next()) got.push_back(std::move(*f));
  }
  EXPECT_EQ(got, sent);
  EXPECT_EQ(dec.pending_bytes(), 0u);

  // Random chunking gives the same frames.
  wire::FrameDecoder dec2;
  got.clear();
  for (std::size_t pos = 0; pos < stream.size();) {
    auto n = std::min<std::size_t>(1 + rng() % 97, stream.size() - pos);
    dec2.feed(std::span<const std::uint8_t>(stream.data() + pos, n));
    pos += n;
    while (auto f = dec2.next()) got.push_back(std::move(*f));
  }
  EXPECT_EQ(got, sent);
}

TEST(Wire, OversizedFrameRejected) {
  std::vector<std::uint8_t> header;
  put_le(header, 0, 8);
  put_le(header, (64u << 20) + 1, 4);
  wire::FrameDecoder dec;
  EXPECT_THROW(dec.feed(header), NetError);
}

TEST(Batcher, FixedEmitsFullBatches) {
  Batcher<char> b(BatchingPolicy::fixed(3));
  EXPECT_FALSE(b.push(Item<char>{'a'}));
  EXPECT_FALSE(b.push(Item<char>{'b'}));
  auto out = b.push(Item<char>{'c'});
  ASSERT_TRUE(out);
  EXPECT_EQ(out->reason, FlushReason::size);
  EXPECT_EQ(out->batch.messages,
            (std::vector<StreamMessage<char>>{Item<char>{'a'}, Item<char>{'b'}, Item<char>{'c'}}));
  EXPECT_EQ(out->batch.seq, 0u);
  EXPECT_TRUE(b.empty());
}

TEST(Batcher, TerminateFlushesImmediately) {
  Batcher<int> b(BatchingPolicy::fixed(100));
  b.push(Item<int>{1});
  auto out = b.push(Terminate{});
  ASSERT_TRUE(out);
  EXPECT_EQ(out->reason, FlushReason::terminate);
  EXPECT_EQ(out->batch.messages.size(), 2u);
}

TEST(Batcher, ControlMessagesFlush) {
  Batcher<int> b(BatchingPolicy::fixed(100));
  b.push(Item<int>{1});
  auto out = b.push(Watermark{4});
  ASSERT_TRUE(out);
  EXPECT_EQ(out->reason, FlushReason::control);
  auto next = b.push(IterationEnd{1});
  ASSERT_TRUE(next);
  EXPECT_EQ(next->batch.seq, out->batch.seq + 1);
}

TEST(Batcher, SequenceNumbersAreConsecutive) {
  Batcher<int> b(BatchingPolicy::fixed(2));
  std::uint32_t expect = 0;
  for (int i = 0; i < 100; ++i) {
    if (auto out = b.push(Item<int>{i})) {
      EXPECT_EQ(out->batch.seq, expect++);
    }
  }
  EXPECT_EQ(expect, 50u);
}

TEST(Batcher, AdaptiveTimeoutWithInjectedClock) {
  auto t0 = Clock::now();
  Batcher<int> b(BatchingPolicy::adaptive(1024, 10ms), t0);
  EXPECT_FALSE(b.push(Item<int>{1}, t0 + 1ms));
  EXPECT_EQ(*b.deadline(), t0 + 10ms);
  EXPECT_FALSE(b.poll(t0 + 9ms));
  auto out = b.poll(t0 + 10ms);
  ASSERT_TRUE(out);
  EXPECT_EQ(out->reason, FlushReason::timeout);
  EXPECT_EQ(out->batch.messages.size(), 1u);
  EXPECT_FALSE(b.deadline());
}

TEST(Batcher, AdaptiveFlushesOnSize) {
  auto t0 = Clock::now();
  Batcher<int> b(BatchingPolicy::adaptive(4, 1000ms), t0);
  for (int i = 0; i < 3; ++i) EXPECT_FALSE(b.push(Item<int>{i}, t0));
  auto out = b.push(Item<int>{3}, t0);
  ASSERT_TRUE(out);
  EXPECT_EQ(out->reason, FlushReason::size);
}

TEST(Batcher, UnbatchedSendsEachItem) {
  Batcher<int> b(BatchingPolicy::unbatched());
  for (int i = 0; i < 5; ++i) {
    auto out = b.push(Item<int>{i});
    ASSERT_TRUE(out);
    EXPECT_EQ(out->batch.messages.size(), 1u);
  }
}

TEST(BatchingPolicy, Parse) {
  EXPECT_EQ(BatchingPolicy::parse("fixed:64").size, 64u);
  auto a = BatchingPolicy::parse("adaptive:256:5ms");
  EXPECT_EQ(a.mode, BatchingPolicy::Mode::adaptive);
  EXPECT_EQ(a.size, 256u);
  EXPECT_EQ(a.timeout, std::chrono::microseconds(5000));
  EXPECT_EQ(BatchingPolicy::parse("unbatched").mode, BatchingPolicy::Mode::unbatched);
  for (const char* bad : {"fixed:0", "fixed:", "fixed:x", "adaptive:1", "adaptive:1:5", "adaptive:1:0ms", "other"})
    EXPECT_THROW(BatchingPolicy::parse(bad), BuildError) << bad;
}

TEST(Batching, FixedPolicyHasNoPartialBatchesInAJob) {
  for (std::size_t n : {1u, 7u, 64u}) {
    auto env = Environment::local(3);
    env.set_batching(BatchingPolicy::fixed(n));
    std::atomic<std::size_t> seen{0};
    env.source_parallel([](std::size_t, std::size_t) {
         std::vector<int> v(1000);
         for (int i = 0; i < 1000; ++i) v[i] = i;
         return v;
       })
        .shuffle()
        .for_each([&](int) { ++seen; });
    env.execute();
    auto s = env.stats();
    EXPECT_EQ(seen.load(), 3000u);
    EXPECT_EQ(s.partial_nonfinal_batches, 0u) << "fixed:" << n;
    EXPECT_GT(s.flush_size, 0u);
  }
}

TEST(Batching, AdaptiveLoneItemLatency) {
  auto env = Environment::local(2);
  env.set_batching(BatchingPolicy::adaptive(1024, 10ms));
  auto in = std::make_shared<ItemChannel<std::int64_t>>();
  auto out = env.source_channel(in).shuffle().map([](std::int64_t x) { return x; }).collect_channel();
  auto job = env.execute_async();
  std::vector<double> ms;
  for (int i = 0; i < 100; ++i) {
    auto t0 = Clock::now();
    in->send(i);
    auto x = out->recv();
    ASSERT_TRUE(x);
    ms.push_back(std::chrono::duration<double, std::milli>(Clock::now() - t0).count());
    std::this_thread::sleep_for(std::chrono::milliseconds(1 + i % 7));
  }
  in->close();
  job.join();
  std::sort(ms.begin(), ms.end());
  EXPECT_LT(ms[98], 50.0) << "p99 ms";
}

TEST(TaskQueue, PerChannelFifoWithTwoSenders) {
  TaskQueue q(2, {}, 4);
  constexpr int kPer = 2000;
  auto sender = [&](std::size_t ch) {
    for (int i = 0; i < kPer; ++i) {
      Batch<int> b;
      b.seq = static_cast<std::uint32_t>(i);
      b.messages.push_back(Item<int>{i});
      q.push(Envelope{ch, std::make_unique<TypedBatch<int>>(std::move(b))});
    }
  };
  std::thread a(sender, 0), b(sender, 1);
  std::vector<std::uint32_t> next(2, 0);
  for (int i = 0; i < 2 * kPer; ++i) {
    auto env = q.pop_until(std::nullopt);
    ASSERT_TRUE(env);
    auto& typed = static_cast<TypedBatch<int>&>(*env->batch);
    EXPECT_EQ(typed.batch.seq, next[env->channel]++);
  }
  a.join();
  b.join();
  EXPECT_LE(q.max_depth(), 4u);
  EXPECT_EQ(next, (std::vector<std::uint32_t>{kPer, kPer}));
}

TEST(TaskQueue, PerBatchCostDoesNotGrowWithVolume) {
  auto per_batch_ns = [](int n) {
    TaskQueue q(1, {}, 64);
    auto t0 = Clock::now();
    std::thread producer([&] {
      for (int i = 0; i < n; ++i) {
        Batch<int> b;
        b.messages.push_back(Item<int>{i});
        q.push(Envelope{0, std::make_unique<TypedBatch<int>>(std::move(b))});
      }
    });
    for (int i = 0; i < n; ++i) q.pop_until(std::nullopt);
    producer.join();
    return std::chrono::duration<double, std::nano>(Clock::now() - t0).count() / n;
  };
  per_batch_ns(1000);  // warm up
  double small = 1e18, large = 1e18;
  for (int r = 0; r < 3; ++r) {
    small = std::min(small, per_batch_ns(10000));
    large = std::min(large, per_batch_ns(100000));
  }
  EXPECT_LT(large / small, 3.0) << small << " ns vs " << large << " ns";
}

TEST(BlockingQueue, BoundedCapacityHolds) {
  BlockingQueue<int> q(4);
  std::thread producer([&] {
    for (int i = 0; i < 1000; ++i) q.push(i);
    q.close();
  });
  int expect = 0;
  while (auto v = q.pop()) EXPECT_EQ(*v, expect++);
  producer.join();
  EXPECT_EQ(expect, 1000);
  EXPECT_LE(q.max_len(), 4u);
}

TEST(BlockingQueue, CloseUnblocksProducer) {
  BlockingQueue<int> q(1);
  q.push(1);
  std::thread producer([&] { EXPECT_THROW(q.push(2), JobAborted); });
  std::this_thread::sleep_for(20ms);
  q.close();
  producer.join();
}

TEST(TwoHosts, LosslessAndFifoPerSenderReceiverPair) {
  constexpr std::uint32_t kPerSender = 25000;
  auto topo = testsupport::localhost({2, 2});
  std::mutex mu;
  std::map<std::pair<std::thread::id, std::uint32_t>, std::uint32_t> last;  // (receiver thread, sender) -> seq
  std::atomic<std::uint64_t> received{0}, out_of_order{0};
  auto builds = testsupport::run_hosts(topo, [&](Environment& env) {
    env.set_batching(BatchingPolicy::fixed(97));
    env.source_parallel([](std::size_t r, std::size_t) {
         std::vector<std::pair<std::uint32_t, std::uint32_t>> v;
         for (std::uint32_t i = 1; i <= kPerSender; ++i) v.emplace_back(static_cast<std::uint32_t>(r), i);
         return v;
       })
        .shuffle()
        .for_each([&](std::pair<std::uint32_t, std::uint32_t> p) {
          ++received;
          std::lock_guard lock(mu);
          auto& prev = last[{std::this_thread::get_id(), p.first}];
          if (p.second <= prev) ++out_of_order;
          prev = p.second;
        });
    return 0;
  });
  (void)builds;
  EXPECT_EQ(received.load(), 4ull * kPerSender);
  EXPECT_EQ(out_of_order.load(), 0u);
}

TEST(TwoHosts, MuxQueueStaysBounded) {
  auto topo = testsupport::localhost({1, 1});
  std::atomic<std::uint64_t> n{0};
  std::vector<Environment> keep;
  for (std::size_t h = 0; h < 2; ++h) keep.push_back(testsupport::host_env(topo, h));
  for (auto& env : keep) {
    env.set_batching(BatchingPolicy::fixed(1));
    env.source_parallel([](std::size_t, std::size_t) { return std::vector<int>(20000, 1); })
        .shuffle()
        .for_each([&](int) { ++n; });
  }
  std::thread t1([&] { keep[1].execute(); });
  keep[0].execute();
  t1.join();
  EXPECT_EQ(n.load(), 40000u);
  for (auto& env : keep) {
    auto s = env.stats();
    EXPECT_GT(s.tcp_frames_sent, 0u);
    EXPECT_LE(s.max_mux_queue, 64u);
  }
}

TEST(TwoHosts, NoDataStillTerminates) {
  auto topo = testsupport::localhost({2, 1});
  std::atomic<int> n{0};
  testsupport::run_hosts(topo, [&](Environment& env) {
    auto r = env.source_parallel([](std::size_t, std::size_t) { return std::vector<int>{}; })
                 .group_by([](int x) { return x; })
                 .reduce([](int a, int b) { return a + b; })
                 .unkey()
                 .collect();
    env.source_parallel([](std::size_t, std::size_t) { return std::vector<int>{}; }).shuffle().for_each([&](int) { ++n; });
    return r;
  });
  EXPECT_EQ(n.load(), 0);
}
