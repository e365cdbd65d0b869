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

#include <cstdint>
#include <limits>
#include <memory>
#include <optional>
#include <span>
#include <variant>
#include <vector>

#include "flow/codec.hpp"
#include "flow/util.hpp"

namespace flow {

/// Event time, in caller-defined units.
using Timestamp = std::int64_t;
using MaybeTime = std::optional<Timestamp>;

inline constexpr Timestamp kMinTime = std::numeric_limits<Timestamp>::min();
inline constexpr Timestamp kMaxTime = std::numeric_limits<Timestamp>::max();

template <class T>
struct Item {
  T value;
  bool operator==(const Item&) const = default;
};

template <class T>
struct TimestampedItem {
  T value;
  Timestamp ts;
  bool operator==(const TimestampedItem&) const = default;
};

struct Watermark {
  Timestamp ts;
  bool operator==(const Watermark&) const = default;
};

struct FlushBatch {
  bool operator==(const FlushBatch&) const = default;
};

struct Terminate {
  bool operator==(const Terminate&) const = default;
};

/// Closes one iteration of a loop body; stateful operators flush and reset.
struct IterationEnd {
  std::uint32_t epoch;
  bool operator==(const IterationEnd&) const = default;
};

template <class T>
using StreamMessage = std::variant<Item<T>, TimestampedItem<T>, Watermark, FlushBatch, Terminate, IterationEnd>;

enum class MessageTag : std::uint8_t {
  item = 0,
  timestamped_item = 1,
  watermark = 2,
  flush_batch = 3,
  terminate = 4,
  iteration_end = 5,
};

template <class T>
bool is_data(const StreamMessage<T>& m) {
  return m.index() <= 1;
}

/// Messages bound for one destination task. `seq` counts batches per
/// (sender, receiver) channel; `epoch` is the sender's iteration epoch.
template <class T>
struct Batch {
  std::uint32_t seq = 0;
  std::uint32_t epoch = 0;
  std::vector<StreamMessage<T>> messages;

  bool operator==(const Batch&) const = default;

  std::size_t data_count() const {
    std::size_t n = 0;
    for (const auto& m : messages) n += is_data(m) ? 1 : 0;
    return n;
  }
};

template <class T>
struct Codec<StreamMessage<T>> {
  static void encode(Writer& w, const StreamMessage<T>& m) {
    std::visit(Overloaded{
                   [&](const Item<T>& x) {
                     w.integral(static_cast<std::uint8_t>(MessageTag::item));
                     Codec<T>::encode(w, x.value);
                   },
                   [&](const TimestampedItem<T>& x) {
                     w.integral(static_cast<std::uint8_t>(MessageTag::timestamped_item));
                     w.integral(x.ts);
                     Codec<T>::encode(w, x.value);
                   },
                   [&](const Watermark& x) {
                     w.integral(static_cast<std::uint8_t>(MessageTag::watermark));
                     w.integral(x.ts);
                   },
                   [&](const FlushBatch&) { w.integral(static_cast<std::uint8_t>(MessageTag::flush_batch)); },
                   [&](const Terminate&) { w.integral(static_cast<std::uint8_t>(MessageTag::terminate)); },
                   [&](const IterationEnd& x) {
                     w.integral(static_cast<std::uint8_t>(MessageTag::iteration_end));
                     w.integral(x.epoch);
                   },
               },
               m);
  }

  static StreamMessage<T> decode(Reader& r) {
    auto tag = static_cast<MessageTag>(r.integral<std::uint8_t>());
    switch (tag) {
      case MessageTag::item:
        return Item<T>{Codec<T>::decode(r)};
      case MessageTag::timestamped_item: {
        auto ts = r.integral<Timestamp>();
        return TimestampedItem<T>{Codec<T>::decode(r), ts};
      }
      case MessageTag::watermark:
        return Watermark{r.integral<Timestamp>()};
      case MessageTag::flush_batch:
        return FlushBatch{};
      case MessageTag::terminate:
        return Terminate{};
      case MessageTag::iteration_end:
        return IterationEnd{r.integral<std::uint32_t>()};
    }
    r.fail("unknown message tag " + std::to_string(static_cast<int>(tag)));
  }
};

template <class T>
struct Codec<Batch<T>> {
  static void encode(Writer& w, const Batch<T>& b) {
    w.integral(b.seq);
    w.integral(b.epoch);
    w.length(b.messages.size());
    for (const auto& m : b.messages) Codec<StreamMessage<T>>::encode(w, m);
  }
  static Batch<T> decode(Reader& r) {
    Batch<T> b;
    b.seq = r.integral<std::uint32_t>();
    b.epoch = r.integral<std::uint32_t>();
    auto n = r.length();
    if (n > r.remaining()) r.fail("message count exceeds input");
    b.messages.reserve(n);
    for (std::size_t i = 0; i < n; ++i) b.messages.push_back(Codec<StreamMessage<T>>::decode(r));
    return b;
  }
};

template <class T>
std::vector<std::uint8_t> encode_batch(const Batch<T>& batch) {
  return encode_to_bytes(batch);
}

template <class T>
Batch<T> decode_batch(std::span<const std::uint8_t> bytes) {
  return decode_from_bytes<Batch<T>>(bytes);
}

/// Type-erased batch, the unit handed across task and network boundaries.
class AnyBatch {
 public:
  virtual ~AnyBatch() = default;
  virtual void encode(Writer& w) const = 0;
  virtual std::size_t data_count() const = 0;
  virtual bool ends_with_terminate() const = 0;
  virtual std::uint32_t epoch() const = 0;
};

template <class T>
class TypedBatch final : public AnyBatch {
 public:
  explicit TypedBatch(Batch<T> b) : batch(std::move(b)) {}

  void encode(Writer& w) const override { Codec<Batch<T>>::encode(w, batch); }
  std::size_t data_count() const override { return batch.data_count(); }
  bool ends_with_terminate() const override {
    return !batch.messages.empty() && std::holds_alternative<Terminate>(batch.messages.back());
  }
  std::uint32_t epoch() const override { return batch.epoch; }

  Batch<T> batch;
};

}  // namespace flow
