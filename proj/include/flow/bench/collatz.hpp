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
#include <stdexcept>
#include <utility>
#include <vector>

#include "flow/stream.hpp"

namespace flow::bench {

/// Steps for n to reach 1. Throws if 3n+1 would overflow.
inline std::uint64_t collatz_steps(std::uint64_t n) {
  std::uint64_t steps = 0;
  while (n != 1) {
    if (n % 2 == 0) {
      n /= 2;
    } else {
      if (n > (std::numeric_limits<std::uint64_t>::max() - 1) / 3) throw std::overflow_error("collatz overflow");
      n = 3 * n + 1;
    }
    ++steps;
  }
  return steps;
}

/// (n, steps): the longest chain for n in [1, limit], ties to the smaller n.
using CollatzBest = std::pair<std::uint64_t, std::uint64_t>;

inline CollatzBest collatz_better(CollatzBest a, CollatzBest b) {
  if (a.second != b.second) return a.second > b.second ? a : b;
  return a.first <= b.first ? a : b;
}

inline CollatzBest collatz_oracle(std::uint64_t limit) {
  if (limit == 0) throw std::invalid_argument("collatz limit must be positive");
  CollatzBest best{1, 0};
  for (std::uint64_t n = 2; n <= limit; ++n) {
    auto s = collatz_steps(n);
    if (s > best.second) best = {n, s};
  }
  return best;
}

/// Replicas take strided slices of the range, each chunk reduced locally.
inline CollectResult<CollatzBest> collatz_job(Environment& env, std::uint64_t limit) {
  if (limit == 0) throw BuildError("collatz limit must be positive");
  constexpr std::uint64_t chunk = 4096;
  return env
      .source_parallel([limit](std::size_t r, std::size_t n) {
        std::vector<std::uint64_t> starts;
        for (std::uint64_t s = 1 + r * chunk; s <= limit; s += n * chunk) starts.push_back(s);
        return starts;
      })
      .map([limit](std::uint64_t start) {
        CollatzBest best{start, collatz_steps(start)};
        for (std::uint64_t n = start + 1; n < start + chunk && n <= limit; ++n)
          best = collatz_better(best, {n, collatz_steps(n)});
        return best;
      })
      .reduce_assoc(collatz_better)
      .collect();
}

}  // namespace flow::bench
