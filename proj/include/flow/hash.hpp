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

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "flow/codec.hpp"

namespace flow {

inline constexpr std::uint64_t kFnvOffsetBasis = 0xcbf29ce484222325ULL;
inline constexpr std::uint64_t kFnvPrime = 0x100000001b3ULL;

constexpr std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes, std::uint64_t h = kFnvOffsetBasis) {
  for (auto b : bytes) {
    h ^= b;
    h *= kFnvPrime;
  }
  return h;
}

/// Routing hash of a key: FNV-1a 64 over the key's codec encoding. Identical
/// in every process, unlike std::hash.
template <class K>
std::uint64_t key_hash(const K& key) {
  thread_local std::vector<std::uint8_t> buf;
  buf.clear();
  Writer w(buf);
  encode(w, key);
  return fnv1a64(buf);
}

inline std::size_t replica_for_hash(std::uint64_t hash, std::size_t replicas) {
  return static_cast<std::size_t>(hash % replicas);
}

/// In-process hash table hasher: std::hash where it exists, the routing hash otherwise.
template <class K>
struct KeyHasher {
  std::size_t operator()(const K& k) const {
    if constexpr (requires { std::hash<K>{}(k); }) {
      return std::hash<K>{}(k);
    } else {
      return static_cast<std::size_t>(key_hash(k));
    }
  }
};

}  // namespace flow
