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
#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <tuple>
#include <vector>

#include "flow/stream.hpp"

namespace flow::bench {

// Auction-site event stream: persons, auctions and bids in a 1:3:46 mix.

enum class EventKind : std::uint8_t { person = 0, auction = 1, bid = 2 };

struct Event {
  std::uint8_t kind = 0;
  std::uint64_t id = 0;        // person or auction id; bidder for bids
  std::uint64_t ref = 0;       // seller for auctions, auction for bids
  std::uint64_t category = 0;  // auctions only
  std::uint64_t price = 0;     // bids only, in cents
  std::int64_t ts = 0;         // event time in ms
  std::string name;
  std::string city;
  std::string state;

  EventKind event_kind() const { return static_cast<EventKind>(kind); }
  bool operator==(const Event&) const = default;

  FLOW_FIELDS(kind, id, ref, category, price, ts, name, city, state)
};

struct NexmarkConfig {
  std::uint64_t events = 100000;
  std::uint64_t seed = 1;
  /// Events are at most this many ms older than their position implies.
  std::int64_t disorder_ms = 500;
  std::int64_t window_size_ms = 10000;
  std::int64_t window_slide_ms = 2000;
};

namespace detail {

inline std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

inline const std::vector<std::string>& us_states() {
  static const std::vector<std::string> s{"AZ", "CA", "ID", "OR", "WA", "WY", "NY", "TX"};
  return s;
}

inline const std::vector<std::string>& cities() {
  static const std::vector<std::string> c{"Phoenix", "Los Angeles", "San Francisco", "Boise", "Bend",
                                          "Portland", "Seattle",     "Redmond",       "Kent",  "Cheyenne"};
  return c;
}

}  // namespace detail

/// Event number `i`; a pure function of (i, seed) so replicas can generate slices independently.
inline Event nexmark_event(std::uint64_t i, const NexmarkConfig& cfg) {
  std::uint64_t r = detail::splitmix(cfg.seed * 0x2545F4914F6CDD1Dull + i);
  auto next = [&r] { return r = detail::splitmix(r); };
  Event e;
  const std::uint64_t epoch = i / 50;
  const std::uint64_t slot = i % 50;
  auto jitter = cfg.disorder_ms > 0 ? static_cast<std::int64_t>(next() % static_cast<std::uint64_t>(cfg.disorder_ms)) : 0;
  e.ts = static_cast<std::int64_t>(i) - jitter;
  if (slot == 0) {
    e.kind = static_cast<std::uint8_t>(EventKind::person);
    e.id = epoch;
    e.name = "person" + std::to_string(epoch);
    e.state = detail::us_states()[next() % detail::us_states().size()];
    e.city = detail::cities()[next() % detail::cities().size()];
  } else if (slot <= 3) {
    e.kind = static_cast<std::uint8_t>(EventKind::auction);
    e.id = epoch * 3 + (slot - 1);
    e.ref = next() % (epoch + 1);
    e.category = next() % 20;
  } else {
    e.kind = static_cast<std::uint8_t>(EventKind::bid);
    e.id = next() % (epoch + 1);
    const std::uint64_t auctions = epoch * 3 + 1;
    // Most bids go to the newest auctions, which makes some of them hot.
    if (next() % 4 != 0) {
      const std::uint64_t recent = std::min<std::uint64_t>(auctions, 30);
      e.ref = auctions - 1 - next() % recent;
    } else {
      e.ref = next() % auctions;
    }
    e.price = 100 + next() % 100000;
  }
  return e;
}

inline std::vector<Event> nexmark_events(const NexmarkConfig& cfg) {
  std::vector<Event> out;
  out.reserve(cfg.events);
  for (std::uint64_t i = 0; i < cfg.events; ++i) out.push_back(nexmark_event(i, cfg));
  return out;
}

/// Bid with the price converted from dollars to euros.
using Q1Row = std::tuple<std::uint64_t, std::uint64_t, std::uint64_t, std::int64_t>;  // auction, bidder, price, ts
/// Seller name, city, state and auction id.
using Q3Row = std::tuple<std::string, std::string, std::string, std::uint64_t>;
/// Window end timestamp -> (hottest auction, bid count).
using Q5Result = std::map<std::int64_t, std::pair<std::uint64_t, std::uint64_t>>;

inline std::uint64_t to_euro(std::uint64_t price) { return price * 89 / 100; }

inline bool q3_person(const Event& e) { return e.state == "OR" || e.state == "ID" || e.state == "CA"; }

inline std::vector<Q1Row> q1_oracle(const std::vector<Event>& events) {
  std::vector<Q1Row> out;
  for (const auto& e : events)
    if (e.event_kind() == EventKind::bid) out.emplace_back(e.ref, e.id, to_euro(e.price), e.ts);
  std::sort(out.begin(), out.end());
  return out;
}

inline std::vector<Q3Row> q3_oracle(const std::vector<Event>& events) {
  std::map<std::uint64_t, const Event*> persons;
  for (const auto& e : events)
    if (e.event_kind() == EventKind::person && q3_person(e)) persons[e.id] = &e;
  std::vector<Q3Row> out;
  for (const auto& e : events) {
    if (e.event_kind() != EventKind::auction || e.category != 10) continue;
    auto it = persons.find(e.ref);
    if (it != persons.end()) out.emplace_back(it->second->name, it->second->city, it->second->state, e.id);
  }
  std::sort(out.begin(), out.end());
  return out;
}

/// Counts every bid into all sliding windows containing it, then picks the
/// most bid auction per window (ties to the smaller id).
inline Q5Result q5_oracle(const std::vector<Event>& events, const NexmarkConfig& cfg) {
  std::map<std::int64_t, std::map<std::uint64_t, std::uint64_t>> counts;  // window start -> auction -> count
  const auto size = cfg.window_size_ms, slide = cfg.window_slide_ms;
  for (const auto& e : events) {
    if (e.event_kind() != EventKind::bid) continue;
    // Largest start <= ts, walking back while the window still covers ts.
    std::int64_t start = e.ts >= 0 ? e.ts / slide * slide : -((-e.ts + slide - 1) / slide) * slide;
    for (; start > e.ts - size; start -= slide) ++counts[start][e.ref];
  }
  Q5Result out;
  for (const auto& [start, per_auction] : counts) {
    std::pair<std::uint64_t, std::uint64_t> best{0, 0};
    for (const auto& [a, c] : per_auction)
      if (c > best.second) best = {a, c};
    out[start + size - 1] = best;
  }
  return out;
}

inline Stream<Event> nexmark_source(Environment& env, const NexmarkConfig& cfg) {
  return env.source_parallel([cfg](std::size_t r, std::size_t n) {
    std::vector<Event> mine;
    for (std::uint64_t i = r; i < cfg.events; i += n) mine.push_back(nexmark_event(i, cfg));
    return mine;
  });
}

inline CollectResult<Q1Row> q1_job(Environment& env, const NexmarkConfig& cfg) {
  return nexmark_source(env, cfg)
      .filter([](const Event& e) { return e.event_kind() == EventKind::bid; })
      .map([](Event e) { return Q1Row(e.ref, e.id, to_euro(e.price), e.ts); })
      .collect();
}

inline CollectResult<Q3Row> q3_job(Environment& env, const NexmarkConfig& cfg) {
  auto parts = nexmark_source(env, cfg).split(2);
  auto persons = parts[0].filter([](const Event& e) { return e.event_kind() == EventKind::person && q3_person(e); });
  auto auctions = parts[1].filter([](const Event& e) { return e.event_kind() == EventKind::auction && e.category == 10; });
  return persons.join(auctions, [](const Event& p) { return p.id; }, [](const Event& a) { return a.ref; })
      .unkey()
      .map([](std::pair<std::uint64_t, std::pair<Event, Event>> p) {
        auto& [person, auction] = p.second;
        return Q3Row(person.name, person.city, person.state, auction.id);
      })
      .collect();
}

/// Sliding event-time bid counts per auction, then the maximum per window.
inline CollectResult<std::pair<std::int64_t, std::pair<std::int64_t, std::pair<std::uint64_t, std::uint64_t>>>> q5_job(
    Environment& env, const NexmarkConfig& cfg) {
  using Hot = std::pair<std::int64_t, std::pair<std::uint64_t, std::uint64_t>>;
  const auto lag = cfg.disorder_ms;
  return nexmark_source(env, cfg)
      .filter([](const Event& e) { return e.event_kind() == EventKind::bid; })
      .add_timestamps([](const Event& e) { return e.ts; },
                      [lag](const Event&, Timestamp ts) -> std::optional<Timestamp> { return ts - lag; })
      .group_by([](const Event& e) { return e.ref; })
      .window(EventTimeWindow::sliding(cfg.window_size_ms, cfg.window_slide_ms))
      .count()
      .unkey()
      .with_timestamp()
      .group_by_reduce([](const Hot& h) { return h.first; },
                       [](Hot a, Hot b) {
                         if (a.second.second != b.second.second) return a.second.second > b.second.second ? a : b;
                         return a.second.first <= b.second.first ? a : b;
                       })
      .collect();
}

inline Q5Result q5_result(const std::vector<std::pair<std::int64_t, std::pair<std::int64_t, std::pair<std::uint64_t, std::uint64_t>>>>& rows) {
  Q5Result out;
  for (const auto& [ts, hot] : rows) out[ts] = hot.second;
  return out;
}

}  // namespace flow::bench
