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
#include <memory>
#include <set>
#include <tuple>
#include <vector>

#include "flow/bench/iterative.hpp"
#include "flow/stream.hpp"

namespace flow::bench {

// Triangle counting over an undirected graph given as edges with a < b.

/// Brute force over all node triples.
inline std::uint64_t triangles_oracle(std::uint32_t nodes, const std::vector<Edge>& edges) {
  std::vector<std::vector<bool>> m(nodes, std::vector<bool>(nodes, false));
  for (auto [a, b] : edges) m[a][b] = m[b][a] = true;
  std::uint64_t n = 0;
  for (std::uint32_t a = 0; a < nodes; ++a)
    for (std::uint32_t b = a + 1; b < nodes; ++b)
      if (m[a][b])
        for (std::uint32_t c = b + 1; c < nodes; ++c)
          if (m[b][c] && m[a][c]) ++n;
  return n;
}

inline Edge canonical(Edge e) { return e.first < e.second ? e : Edge{e.second, e.first}; }

/// Two-paths a-b-c with a < b < c joined with the closing edge a-c.
inline CollectResult<std::uint64_t> triangles_job(Environment& env, std::shared_ptr<const std::vector<Edge>> edges) {
  auto parts = env.source_parallel([edges](std::size_t r, std::size_t n) {
                    std::vector<Edge> mine;
                    for (std::size_t i = r; i < edges->size(); i += n) {
                      auto e = canonical((*edges)[i]);
                      if (e.first != e.second) mine.push_back(e);
                    }
                    return mine;
                  })
                   .split(3);
  auto two_paths = parts[0]
                       .join(parts[1], [](const Edge& ab) { return ab.second; }, [](const Edge& bc) { return bc.first; })
                       .unkey()
                       .map([](std::pair<std::uint32_t, std::pair<Edge, Edge>> p) {
                         return std::tuple<std::uint32_t, std::uint32_t, std::uint32_t>(p.second.first.first, p.first,
                                                                                        p.second.second.second);
                       });
  using Path = std::tuple<std::uint32_t, std::uint32_t, std::uint32_t>;
  return two_paths
      .join(parts[2], [](const Path& p) { return Edge{std::get<0>(p), std::get<2>(p)}; }, [](const Edge& e) { return e; })
      .unkey()
      .map([](auto) { return std::uint64_t{1}; })
      .fold_assoc(
          std::uint64_t{0}, [](std::uint64_t& acc, std::uint64_t x) { acc += x; },
          [](std::uint64_t& acc, std::uint64_t part) { acc += part; })
      .collect();
}

}  // namespace flow::bench
