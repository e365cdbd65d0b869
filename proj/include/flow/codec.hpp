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

// Binary item codec. Integers are little-endian fixed width, floats are their
// IEEE-754 bit pattern, variant tags are one byte, sequences carry a u32
// length prefix. Encoding is a pure function of the value.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <tuple>
#include <type_traits>
#include <unordered_map>
#include <utility>
#include <variant>
#include <vector>

#include "flow/error.hpp"

namespace flow {

class Writer {
 public:
  explicit Writer(std::vector<std::uint8_t>& out) : out_(out) {}

  void raw(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    out_.insert(out_.end(), p, p + n);
  }

  template <class I>
    requires std::is_integral_v<I>
  void integral(I value) {
    using U = std::make_unsigned_t<I>;
    auto u = static_cast<U>(value);
    if constexpr (std::endian::native == std::endian::little) {
      raw(&u, sizeof(U));
    } else {
      for (std::size_t i = 0; i < sizeof(U); ++i) out_.push_back(static_cast<std::uint8_t>(u >> (8 * i)));
    }
  }

  void length(std::size_t n) {
    if (n > std::numeric_limits<std::uint32_t>::max()) throw std::length_error("sequence too long to encode");
    integral(static_cast<std::uint32_t>(n));
  }

  std::vector<std::uint8_t>& buffer() { return out_; }

 private:
  std::vector<std::uint8_t>& out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}

  void raw(void* dst, std::size_t n) {
    need(n);
    std::memcpy(dst, in_.data() + pos_, n);
    pos_ += n;
  }

  template <class I>
    requires std::is_integral_v<I>
  I integral() {
    using U = std::make_unsigned_t<I>;
    need(sizeof(U));
    U u = 0;
    if constexpr (std::endian::native == std::endian::little) {
      std::memcpy(&u, in_.data() + pos_, sizeof(U));
    } else {
      for (std::size_t i = 0; i < sizeof(U); ++i) u |= static_cast<U>(in_[pos_ + i]) << (8 * i);
    }
    pos_ += sizeof(U);
    return static_cast<I>(u);
  }

  std::size_t length() { return integral<std::uint32_t>(); }

  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return in_.size() - pos_; }
  bool done() const { return pos_ == in_.size(); }

  [[noreturn]] void fail(const std::string& what) const { throw DecodeError(pos_, what); }

 private:
  void need(std::size_t n) const {
    if (in_.size() - pos_ < n) fail("truncated input, need " + std::to_string(n) + " more bytes");
  }

  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

template <class T>
struct Codec;

template <class T>
concept Encodable = requires(Writer& w, Reader& r, const T& v) {
  Codec<T>::encode(w, v);
  { Codec<T>::decode(r) } -> std::same_as<T>;
};

template <class T>
void encode(Writer& w, const T& value) {
  Codec<T>::encode(w, value);
}

template <class T>
T decode(Reader& r) {
  return Codec<T>::decode(r);
}

template <class T>
std::vector<std::uint8_t> encode_to_bytes(const T& value) {
  std::vector<std::uint8_t> out;
  Writer w(out);
  encode(w, value);
  return out;
}

template <class T>
T decode_from_bytes(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  T value = decode<T>(r);
  if (!r.done()) r.fail("trailing bytes after value");
  return value;
}

/// Declares the members a struct serializes, in order.
#define FLOW_FIELDS(...)                                           \
  auto flow_fields() { return std::tie(__VA_ARGS__); }             \
  auto flow_fields() const { return std::tie(__VA_ARGS__); }

template <class T>
concept HasFlowFields = requires(T& t, const T& ct) {
  t.flow_fields();
  ct.flow_fields();
};

template <class T>
  requires std::is_integral_v<T> && (!std::is_same_v<T, bool>)
struct Codec<T> {
  static void encode(Writer& w, T v) { w.integral(v); }
  static T decode(Reader& r) { return r.integral<T>(); }
};

template <>
struct Codec<bool> {
  static void encode(Writer& w, bool v) { w.integral<std::uint8_t>(v ? 1 : 0); }
  static bool decode(Reader& r) {
    auto b = r.integral<std::uint8_t>();
    if (b > 1) r.fail("invalid bool byte");
    return b == 1;
  }
};

template <class T>
  requires std::is_floating_point_v<T>
struct Codec<T> {
  using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  static_assert(sizeof(T) == sizeof(Bits));
  static void encode(Writer& w, T v) { w.integral(std::bit_cast<Bits>(v)); }
  static T decode(Reader& r) { return std::bit_cast<T>(r.integral<Bits>()); }
};

template <class T>
  requires std::is_enum_v<T>
struct Codec<T> {
  using U = std::underlying_type_t<T>;
  static void encode(Writer& w, T v) { w.integral(static_cast<U>(v)); }
  static T decode(Reader& r) { return static_cast<T>(r.integral<U>()); }
};

template <>
struct Codec<std::string> {
  static void encode(Writer& w, const std::string& s) {
    w.length(s.size());
    w.raw(s.data(), s.size());
  }
  static std::string decode(Reader& r) {
    auto n = r.length();
    if (n > r.remaining()) r.fail("string length exceeds input");
    std::string s(n, '\0');
    r.raw(s.data(), n);
    return s;
  }
};

template <>
struct Codec<std::monostate> {
  static void encode(Writer&, std::monostate) {}
  static std::monostate decode(Reader&) { return {}; }
};

template <class T>
struct Codec<std::vector<T>> {
  static void encode(Writer& w, const std::vector<T>& v) {
    w.length(v.size());
    if constexpr (std::is_arithmetic_v<T> && !std::is_same_v<T, bool> &&
                  std::endian::native == std::endian::little) {
      w.raw(v.data(), v.size() * sizeof(T));
    } else {
      for (const auto& x : v) Codec<T>::encode(w, x);
    }
  }
  static std::vector<T> decode(Reader& r) {
    auto n = r.length();
    if (n > r.remaining() && !std::is_empty_v<T>) r.fail("sequence length exceeds input");
    std::vector<T> v;
    if constexpr (std::is_arithmetic_v<T> && !std::is_same_v<T, bool> &&
                  std::endian::native == std::endian::little) {
      v.resize(n);
      r.raw(v.data(), n * sizeof(T));
    } else {
      v.reserve(n);
      for (std::size_t i = 0; i < n; ++i) v.push_back(Codec<T>::decode(r));
    }
    return v;
  }
};

template <class T, std::size_t N>
struct Codec<std::array<T, N>> {
  static void encode(Writer& w, const std::array<T, N>& a) {
    for (const auto& x : a) Codec<T>::encode(w, x);
  }
  static std::array<T, N> decode(Reader& r) {
    std::array<T, N> a{};
    for (auto& x : a) x = Codec<T>::decode(r);
    return a;
  }
};

template <class A, class B>
struct Codec<std::pair<A, B>> {
  static void encode(Writer& w, const std::pair<A, B>& p) {
    Codec<A>::encode(w, p.first);
    Codec<B>::encode(w, p.second);
  }
  static std::pair<A, B> decode(Reader& r) {
    A a = Codec<A>::decode(r);
    B b = Codec<B>::decode(r);
    return {std::move(a), std::move(b)};
  }
};

template <class... Ts>
struct Codec<std::tuple<Ts...>> {
  static void encode(Writer& w, const std::tuple<Ts...>& t) {
    std::apply([&](const auto&... xs) { (Codec<std::remove_cvref_t<decltype(xs)>>::encode(w, xs), ...); }, t);
  }
  static std::tuple<Ts...> decode(Reader& r) {
    // Braced init guarantees left-to-right evaluation.
    return std::tuple<Ts...>{Codec<Ts>::decode(r)...};
  }
};

template <class T>
struct Codec<std::optional<T>> {
  static void encode(Writer& w, const std::optional<T>& o) {
    w.integral<std::uint8_t>(o ? 1 : 0);
    if (o) Codec<T>::encode(w, *o);
  }
  static std::optional<T> decode(Reader& r) {
    auto tag = r.integral<std::uint8_t>();
    if (tag == 0) return std::nullopt;
    if (tag != 1) r.fail("invalid optional tag");
    return Codec<T>::decode(r);
  }
};

template <class K, class V, class C>
struct Codec<std::map<K, V, C>> {
  static void encode(Writer& w, const std::map<K, V, C>& m) {
    w.length(m.size());
    for (const auto& [k, v] : m) {
      Codec<K>::encode(w, k);
      Codec<V>::encode(w, v);
    }
  }
  static std::map<K, V, C> decode(Reader& r) {
    auto n = r.length();
    std::map<K, V, C> m;
    for (std::size_t i = 0; i < n; ++i) {
      K k = Codec<K>::decode(r);
      V v = Codec<V>::decode(r);
      m.emplace_hint(m.end(), std::move(k), std::move(v));
    }
    return m;
  }
};

template <class K, class V, class H, class E>
struct Codec<std::unordered_map<K, V, H, E>> {
  static void encode(Writer& w, const std::unordered_map<K, V, H, E>& m) {
    w.length(m.size());
    for (const auto& [k, v] : m) {
      Codec<K>::encode(w, k);
      Codec<V>::encode(w, v);
    }
  }
  static std::unordered_map<K, V, H, E> decode(Reader& r) {
    auto n = r.length();
    std::unordered_map<K, V, H, E> m;
    m.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
      K k = Codec<K>::decode(r);
      V v = Codec<V>::decode(r);
      m.emplace(std::move(k), std::move(v));
    }
    return m;
  }
};

template <class K, class C>
struct Codec<std::set<K, C>> {
  static void encode(Writer& w, const std::set<K, C>& s) {
    w.length(s.size());
    for (const auto& k : s) Codec<K>::encode(w, k);
  }
  static std::set<K, C> decode(Reader& r) {
    auto n = r.length();
    std::set<K, C> s;
    for (std::size_t i = 0; i < n; ++i) s.emplace_hint(s.end(), Codec<K>::decode(r));
    return s;
  }
};

template <class T>
  requires HasFlowFields<T>
struct Codec<T> {
  static void encode(Writer& w, const T& v) {
    std::apply([&](const auto&... xs) { (Codec<std::remove_cvref_t<decltype(xs)>>::encode(w, xs), ...); },
               v.flow_fields());
  }
  static T decode(Reader& r) {
    T v{};
    std::apply([&](auto&... xs) { ((xs = Codec<std::remove_cvref_t<decltype(xs)>>::decode(r)), ...); },
               v.flow_fields());
    return v;
  }
};

}  // namespace flow
