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

// TCP wire format.
//
//   hello   : u32 magic "FLOW" | u16 version | u16 dest_stage          (8 bytes)
//   frame   : u16 host | u16 stage | u16 replica | u16 receiver_replica
//             | u32 payload_len | payload                              (12 + n bytes)
//   payload : u8 dest_port | encoded Batch
//
// All integers little-endian.

#include <algorithm>
#include <array>
#include <cstdint>
#include <deque>
#include <optional>
#include <span>
#include <vector>

#include "flow/codec.hpp"
#include "flow/error.hpp"
#include "flow/topology.hpp"

namespace flow::wire {

inline constexpr std::uint32_t kMagic = 0x464C4F57;
inline constexpr std::uint16_t kVersion = 1;
inline constexpr std::size_t kHelloSize = 8;
inline constexpr std::size_t kFrameHeaderSize = 12;
inline constexpr std::uint32_t kMaxPayload = 64u << 20;

struct Hello {
  std::uint32_t magic = kMagic;
  std::uint16_t version = kVersion;
  std::uint16_t dest_stage = 0;

  bool operator==(const Hello&) const = default;
};

inline std::array<std::uint8_t, kHelloSize> encode_hello(const Hello& h) {
  std::vector<std::uint8_t> out;
  Writer w(out);
  w.integral(h.magic);
  w.integral(h.version);
  w.integral(h.dest_stage);
  std::array<std::uint8_t, kHelloSize> a{};
  std::copy(out.begin(), out.end(), a.begin());
  return a;
}

inline Hello decode_hello(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  Hello h;
  h.magic = r.integral<std::uint32_t>();
  h.version = r.integral<std::uint16_t>();
  h.dest_stage = r.integral<std::uint16_t>();
  return h;
}

/// Checks magic and version; throws NetError on mismatch.
inline void validate_hello(const Hello& h, std::uint16_t expected_stage) {
  if (h.magic != kMagic) throw NetError("bad hello magic");
  if (h.version != kVersion) throw NetError("unsupported protocol version " + std::to_string(h.version));
  if (h.dest_stage != expected_stage)
    throw NetError("hello for stage " + std::to_string(h.dest_stage) + " on listener of stage " +
                   std::to_string(expected_stage));
}

struct FrameHeader {
  Coord sender;
  std::uint16_t receiver_replica = 0;
  std::uint32_t payload_len = 0;

  bool operator==(const FrameHeader&) const = default;
};

struct Frame {
  FrameHeader header;
  std::vector<std::uint8_t> payload;

  bool operator==(const Frame&) const = default;
};

inline void write_header(Writer& w, const FrameHeader& h) {
  w.integral(h.sender.host);
  w.integral(h.sender.stage);
  w.integral(h.sender.replica);
  w.integral(h.receiver_replica);
  w.integral(h.payload_len);
}

inline FrameHeader read_header(Reader& r) {
  FrameHeader h;
  h.sender.host = r.integral<std::uint16_t>();
  h.sender.stage = r.integral<std::uint16_t>();
  h.sender.replica = r.integral<std::uint16_t>();
  h.receiver_replica = r.integral<std::uint16_t>();
  h.payload_len = r.integral<std::uint32_t>();
  return h;
}

inline std::vector<std::uint8_t> encode_frame(const Coord& sender, std::uint16_t receiver,
                                              std::span<const std::uint8_t> payload) {
  if (payload.size() > kMaxPayload) throw NetError("frame payload exceeds 64 MiB");
  std::vector<std::uint8_t> out;
  out.reserve(kFrameHeaderSize + payload.size());
  Writer w(out);
  write_header(w, FrameHeader{sender, receiver, static_cast<std::uint32_t>(payload.size())});
  w.raw(payload.data(), payload.size());
  return out;
}

/// Incremental frame parser: accepts arbitrary byte chunks, yields whole frames.
class FrameDecoder {
 public:
  void feed(std::span<const std::uint8_t> bytes) {
    buf_.insert(buf_.end(), bytes.begin(), bytes.end());
    parse();
  }

  std::optional<Frame> next() {
    if (ready_.empty()) return std::nullopt;
    Frame f = std::move(ready_.front());
    ready_.pop_front();
    return f;
  }

  /// Bytes of an incomplete frame still buffered.
  std::size_t pending_bytes() const { return buf_.size() - pos_; }

 private:
  void parse() {
    while (true) {
      std::size_t avail = buf_.size() - pos_;
      if (avail < kFrameHeaderSize) break;
      Reader r(std::span<const std::uint8_t>(buf_.data() + pos_, kFrameHeaderSize));
      FrameHeader h = read_header(r);
      if (h.payload_len > kMaxPayload) throw NetError("frame payload length " + std::to_string(h.payload_len) + " exceeds 64 MiB");
      if (avail < kFrameHeaderSize + h.payload_len) break;
      const auto* start = buf_.data() + pos_ + kFrameHeaderSize;
      ready_.push_back(Frame{h, std::vector<std::uint8_t>(start, start + h.payload_len)});
      pos_ += kFrameHeaderSize + h.payload_len;
    }
    if (pos_ > 0 && (pos_ == buf_.size() || pos_ > (1u << 20))) {
      buf_.erase(buf_.begin(), buf_.begin() + static_cast<std::ptrdiff_t>(pos_));
      pos_ = 0;
    }
  }

  std::vector<std::uint8_t> buf_;
  std::size_t pos_ = 0;
  std::deque<Frame> ready_;
};

}  // namespace flow::wire
