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
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <set>
#include <vector>

#include "flow/bench/common.hpp"
#include "flow/stream.hpp"

namespace flow::bench {

// k-means.

using Point = std::vector<double>;

/// Gaussian blobs around `k_true` random centres in the unit hypercube.
inline std::vector<Point> gen_points(std::size_t n, std::size_t dims, std::size_t k_true, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 0.05);
  std::vector<Point> centres(std::max<std::size_t>(k_true, 1), Point(dims));
  for (auto& c : centres)
    for (auto& x : c) x = unit(rng);
  std::uniform_int_distribution<std::size_t> pick(0, centres.size() - 1);
  std::vector<Point> pts(n, Point(dims));
  for (auto& p : pts) {
    const auto& c = centres[pick(rng)];
    for (std::size_t d = 0; d < dims; ++d) p[d] = c[d] + noise(rng);
  }
  return pts;
}

/// Index of the nearest centroid; ties go to the lowest index.
inline std::size_t nearest(const Point& p, const std::vector<Point>& cs) {
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < cs.size(); ++i) {
    double d = 0;
    for (std::size_t j = 0; j < p.size(); ++j) {
      double t = p[j] - cs[i][j];
      d += t * t;
    }
    if (d < best_d) {
      best_d = d;
      best = i;
    }
  }
  return best;
}

/// Per-centroid coordinate sums and counts.
struct ClusterSums {
  std::vector<double> sums;
  std::vector<std::uint64_t> counts;

  FLOW_FIELDS(sums, counts)
};

struct KMeansState {
  std::vector<Point> centroids;
  ClusterSums acc;
  std::uint32_t iterations = 0;
  bool moved = true;

  FLOW_FIELDS(centroids, acc, iterations, moved)
};

inline constexpr double kKMeansEpsilon = 1e-9;

/// Averages the folded sums into new centroids (empty clusters keep theirs).
/// Returns true if some centroid moved by more than epsilon.
inline bool kmeans_update(KMeansState& s) {
  const auto k = s.centroids.size();
  const auto dims = k ? s.centroids[0].size() : 0;
  bool moved = false;
  for (std::size_t c = 0; c < k; ++c) {
    if (s.acc.counts.empty() || s.acc.counts[c] == 0) continue;
    Point next(dims);
    double shift = 0;
    for (std::size_t d = 0; d < dims; ++d) {
      next[d] = s.acc.sums[c * dims + d] / static_cast<double>(s.acc.counts[c]);
      shift = std::max(shift, std::abs(next[d] - s.centroids[c][d]));
    }
    if (shift > kKMeansEpsilon) moved = true;
    s.centroids[c] = std::move(next);
  }
  s.acc = ClusterSums{};
  ++s.iterations;
  s.moved = moved;
  return moved;
}

/// Sequential Lloyd. `observe` sees the centroids after every iteration.
inline std::vector<Point> kmeans_oracle(const std::vector<Point>& pts, std::size_t k, std::uint32_t max_iters,
                                        const std::function<void(const std::vector<Point>&)>& observe = {}) {
  KMeansState s;
  s.centroids.assign(pts.begin(), pts.begin() + static_cast<std::ptrdiff_t>(k));
  const auto dims = pts.empty() ? 0 : pts[0].size();
  for (std::uint32_t it = 1; it <= max_iters; ++it) {
    s.acc.sums.assign(k * dims, 0.0);
    s.acc.counts.assign(k, 0);
    for (const auto& p : pts) {
      auto c = nearest(p, s.centroids);
      for (std::size_t d = 0; d < dims; ++d) s.acc.sums[c * dims + d] += p[d];
      ++s.acc.counts[c];
    }
    bool moved = kmeans_update(s);
    if (observe) observe(s.centroids);
    if (!moved) break;
  }
  return s.centroids;
}

/// Replays the points each iteration; new centroids reach every process as loop state.
inline CollectResult<KMeansState> kmeans_job(Environment& env, std::shared_ptr<const std::vector<Point>> pts,
                                             std::size_t k, std::uint32_t max_iters,
                                             std::function<void(const std::vector<Point>&)> observe = {}) {
  if (k == 0 || k > pts->size()) throw BuildError("kmeans needs 1 <= k <= points");
  KMeansState init;
  init.centroids.assign(pts->begin(), pts->begin() + static_cast<std::ptrdiff_t>(k));
  const auto dims = (*pts)[0].size();
  auto source = env.source_parallel([pts](std::size_t r, std::size_t n) {
    std::vector<Point> mine;
    for (std::size_t i = pts->size() * r / n; i < pts->size() * (r + 1) / n; ++i) mine.push_back((*pts)[i]);
    return mine;
  });
  return source
      .replay(
          max_iters, init,
          [k, dims](Stream<Point> s, StateRef<KMeansState> state) {
            return s.map([state, k, dims](Point p) {
              (void)k;
              (void)dims;
              auto c = nearest(p, state->centroids);
              p.push_back(static_cast<double>(c));
              return p;
            });
          },
          [k, dims](ClusterSums& acc, const Point& p) {
            if (acc.counts.empty()) {
              acc.sums.assign(k * dims, 0.0);
              acc.counts.assign(k, 0);
            }
            auto c = static_cast<std::size_t>(p[dims]);
            for (std::size_t d = 0; d < dims; ++d) acc.sums[c * dims + d] += p[d];
            ++acc.counts[c];
          },
          [k, dims](KMeansState& s, ClusterSums part) {
            if (part.counts.empty()) return;
            if (s.acc.counts.empty()) {
              s.acc.sums.assign(k * dims, 0.0);
              s.acc.counts.assign(k, 0);
            }
            for (std::size_t i = 0; i < part.sums.size(); ++i) s.acc.sums[i] += part.sums[i];
            for (std::size_t i = 0; i < part.counts.size(); ++i) s.acc.counts[i] += part.counts[i];
          },
          [observe](KMeansState& s) {
            bool moved = kmeans_update(s);
            if (observe) observe(s.centroids);
            return moved;
          })
      .collect();
}

// Graphs.

using Edge = std::pair<std::uint32_t, std::uint32_t>;

/// G(n, m) style: `m` distinct directed edges without self loops.
inline std::vector<Edge> gen_edges(std::uint32_t nodes, std::size_t m, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_int_distribution<std::uint32_t> pick(0, nodes - 1);
  std::set<Edge> seen;
  std::vector<Edge> out;
  std::size_t limit = static_cast<std::size_t>(nodes) * (nodes - 1);
  m = std::min(m, limit);
  while (out.size() < m) {
    Edge e{pick(rng), pick(rng)};
    if (e.first == e.second || !seen.insert(e).second) continue;
    out.push_back(e);
  }
  return out;
}

/// Each pair with probability p (Erdos-Renyi); undirected edges listed once with a < b.
inline std::vector<Edge> gen_gnp(std::uint32_t nodes, double p, std::uint64_t seed) {
  Rng rng(seed);
  std::bernoulli_distribution coin(p);
  std::vector<Edge> out;
  for (std::uint32_t a = 0; a < nodes; ++a)
    for (std::uint32_t b = a + 1; b < nodes; ++b)
      if (coin(rng)) out.push_back({a, b});
  return out;
}

/// Random DAG: edges only from lower to higher node ids.
inline std::vector<Edge> gen_dag(std::uint32_t nodes, double p, std::uint64_t seed) { return gen_gnp(nodes, p, seed); }

using Adjacency = std::vector<std::vector<std::uint32_t>>;

inline Adjacency adjacency(std::uint32_t nodes, const std::vector<Edge>& edges, bool undirected) {
  Adjacency adj(nodes);
  for (auto [a, b] : edges) {
    adj[a].push_back(b);
    if (undirected) adj[b].push_back(a);
  }
  for (auto& l : adj) std::sort(l.begin(), l.end());
  return adj;
}

inline std::uint32_t node_count(const std::vector<Edge>& edges) {
  std::uint32_t n = 0;
  for (auto [a, b] : edges) n = std::max({n, a + 1, b + 1});
  return n;
}

// PageRank.

inline constexpr double kDamping = 0.85;

struct RankState {
  std::vector<double> ranks;
  std::vector<double> incoming;

  FLOW_FIELDS(ranks, incoming)
};

/// New ranks from the mass received along edges; dangling nodes spread theirs evenly.
inline void pagerank_update(RankState& s, const std::vector<bool>& dangling) {
  const auto n = s.ranks.size();
  double dangling_mass = 0;
  for (std::size_t i = 0; i < n; ++i)
    if (dangling[i]) dangling_mass += s.ranks[i];
  if (s.incoming.empty()) s.incoming.assign(n, 0.0);
  const double base = (1.0 - kDamping) / static_cast<double>(n) + kDamping * dangling_mass / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) s.ranks[i] = base + kDamping * s.incoming[i];
  s.incoming.clear();
}

inline std::vector<double> pagerank_oracle(std::uint32_t nodes, const std::vector<Edge>& edges, std::uint32_t iters) {
  if (nodes == 0) throw std::invalid_argument("pagerank of an empty graph");
  auto adj = adjacency(nodes, edges, false);
  std::vector<bool> dangling(nodes);
  for (std::uint32_t i = 0; i < nodes; ++i) dangling[i] = adj[i].empty();
  RankState s;
  s.ranks.assign(nodes, 1.0 / nodes);
  for (std::uint32_t it = 0; it < iters; ++it) {
    s.incoming.assign(nodes, 0.0);
    for (std::uint32_t u = 0; u < nodes; ++u)
      for (auto v : adj[u]) s.incoming[v] += s.ranks[u] / static_cast<double>(adj[u].size());
    pagerank_update(s, dangling);
  }
  return s.ranks;
}

using AdjItem = std::pair<std::uint32_t, std::vector<std::uint32_t>>;

/// Replays the adjacency lists; the current ranks are the loop state.
inline CollectResult<RankState> pagerank_job(Environment& env, std::uint32_t nodes, std::shared_ptr<const std::vector<Edge>> edges,
                                             std::uint32_t iters) {
  if (nodes == 0) throw BuildError("pagerank of an empty graph");
  if (iters == 0) throw BuildError("pagerank needs at least one iteration");
  auto adj = std::make_shared<Adjacency>(adjacency(nodes, *edges, false));
  auto dangling = std::make_shared<std::vector<bool>>(nodes);
  for (std::uint32_t i = 0; i < nodes; ++i) (*dangling)[i] = (*adj)[i].empty();
  RankState init;
  init.ranks.assign(nodes, 1.0 / nodes);
  using Contribution = std::pair<std::uint32_t, double>;
  return env
      .source_parallel([adj](std::size_t r, std::size_t n) {
        std::vector<AdjItem> mine;
        for (std::size_t u = r; u < adj->size(); u += n)
          if (!(*adj)[u].empty()) mine.emplace_back(static_cast<std::uint32_t>(u), (*adj)[u]);
        return mine;
      })
      .replay(
          iters, init,
          [](Stream<AdjItem> s, StateRef<RankState> state) {
            return s.flat_map([state](AdjItem a) {
              std::vector<Contribution> out;
              double share = state->ranks[a.first] / static_cast<double>(a.second.size());
              for (auto v : a.second) out.emplace_back(v, share);
              return out;
            });
          },
          [nodes](std::vector<double>& acc, const Contribution& c) {
            if (acc.empty()) acc.assign(nodes, 0.0);
            acc[c.first] += c.second;
          },
          [nodes](RankState& s, std::vector<double> part) {
            if (part.empty()) return;
            if (s.incoming.empty()) s.incoming.assign(nodes, 0.0);
            for (std::size_t i = 0; i < part.size(); ++i) s.incoming[i] += part[i];
          },
          [dangling](RankState& s) {
            pagerank_update(s, *dangling);
            return true;
          })
      .collect();
}

// Connected components.

inline std::vector<std::uint32_t> components_oracle(std::uint32_t nodes, const std::vector<Edge>& edges) {
  std::vector<std::uint32_t> parent(nodes);
  std::iota(parent.begin(), parent.end(), 0u);
  std::function<std::uint32_t(std::uint32_t)> find = [&](std::uint32_t x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  };
  for (auto [a, b] : edges) {
    auto ra = find(a), rb = find(b);
    if (ra != rb) parent[std::max(ra, rb)] = std::min(ra, rb);
  }
  std::vector<std::uint32_t> label(nodes);
  // Label = smallest node of the component.
  std::vector<std::uint32_t> smallest(nodes, UINT32_MAX);
  for (std::uint32_t i = 0; i < nodes; ++i) smallest[find(i)] = std::min(smallest[find(i)], i);
  for (std::uint32_t i = 0; i < nodes; ++i) label[i] = smallest[find(i)];
  return label;
}

struct LabelState {
  std::vector<std::uint32_t> labels;
  std::uint64_t changed = 0;

  FLOW_FIELDS(labels, changed)
};

using Label = std::pair<std::uint32_t, std::uint32_t>;  // (node, label)

/// Label propagation forwarding only labels that improved in the last iteration.
inline CollectResult<LabelState> components_job(Environment& env, std::uint32_t nodes,
                                                std::shared_ptr<const std::vector<Edge>> edges) {
  auto adj = std::make_shared<const Adjacency>(adjacency(nodes, *edges, true));
  LabelState init;
  init.labels.resize(nodes);
  std::iota(init.labels.begin(), init.labels.end(), 0u);
  auto [state, rest] =
      env.source_parallel([nodes](std::size_t r, std::size_t n) {
           std::vector<Label> mine;
           for (std::uint32_t u = static_cast<std::uint32_t>(r); u < nodes; u += static_cast<std::uint32_t>(n))
             mine.emplace_back(u, u);
           return mine;
         })
          .iterate(
              std::max<std::uint32_t>(nodes, 1) + 1, init,
              [adj](Stream<Label> s, StateRef<LabelState> state) {
                return s
                    .flat_map([adj](Label l) {
                      std::vector<Label> out;
                      for (auto v : (*adj)[l.first]) out.emplace_back(v, l.second);
                      return out;
                    })
                    .group_by_reduce([](const Label& l) { return l.first; },
                                     [](Label a, Label b) { return a.second <= b.second ? a : b; })
                    .unkey()
                    .filter([state](const std::pair<std::uint32_t, Label>& p) {
                      return p.second.second < state->labels[p.first];
                    })
                    .map([](std::pair<std::uint32_t, Label> p) { return p.second; });
              },
              [](std::vector<Label>& acc, const Label& l) { acc.push_back(l); },
              [](LabelState& s, std::vector<Label> part) {
                for (auto [v, l] : part) {
                  if (l < s.labels[v]) {
                    s.labels[v] = l;
                    ++s.changed;
                  }
                }
              },
              [](LabelState& s) { return std::exchange(s.changed, 0) > 0; });
  rest.for_each([](Label) {});
  return state.collect();
}

// Transitive closure.

using EdgeSet = std::set<Edge>;

inline EdgeSet closure_oracle(std::uint32_t nodes, const std::vector<Edge>& edges) {
  std::vector<std::vector<bool>> reach(nodes, std::vector<bool>(nodes, false));
  for (auto [a, b] : edges) reach[a][b] = true;
  for (std::uint32_t k = 0; k < nodes; ++k)
    for (std::uint32_t i = 0; i < nodes; ++i)
      if (reach[i][k])
        for (std::uint32_t j = 0; j < nodes; ++j)
          if (reach[k][j]) reach[i][j] = true;
  EdgeSet out;
  for (std::uint32_t i = 0; i < nodes; ++i)
    for (std::uint32_t j = 0; j < nodes; ++j)
      if (reach[i][j]) out.insert({i, j});
  return out;
}

struct ClosureState {
  EdgeSet edges;
  std::uint64_t added = 0;

  FLOW_FIELDS(edges, added)
};

/// Frontier edges (a, b) extend along base edges b -> c; new pairs join the
/// closure and form the next frontier, until no pair is new.
inline CollectResult<ClosureState> closure_job(Environment& env, std::uint32_t nodes,
                                               std::shared_ptr<const std::vector<Edge>> edges) {
  auto adj = std::make_shared<const Adjacency>(adjacency(nodes, *edges, false));
  ClosureState init;
  init.edges.insert(edges->begin(), edges->end());
  auto [state, rest] =
      env.source_parallel([edges](std::size_t r, std::size_t n) {
           std::vector<Edge> mine;
           for (std::size_t i = r; i < edges->size(); i += n) mine.push_back((*edges)[i]);
           return mine;
         })
          .iterate(
              std::max<std::uint32_t>(nodes, 1) + 1, init,
              [adj](Stream<Edge> s, StateRef<ClosureState> state) {
                return s
                    .flat_map([adj](Edge e) {
                      std::vector<Edge> out;
                      for (auto c : (*adj)[e.second]) out.emplace_back(e.first, c);
                      return out;
                    })
                    .filter([state](const Edge& e) { return !state->edges.count(e); })
                    .group_by_reduce([](const Edge& e) { return e; }, [](Edge a, Edge) { return a; })
                    .unkey()
                    .map([](std::pair<Edge, Edge> p) { return p.second; });
              },
              [](std::vector<Edge>& acc, const Edge& e) { acc.push_back(e); },
              [](ClosureState& s, std::vector<Edge> part) {
                for (auto& e : part) s.added += s.edges.insert(e).second ? 1 : 0;
              },
              [](ClosureState& s) { return std::exchange(s.added, 0) > 0; });
  rest.for_each([](Edge) {});
  return state.collect();
}

}  // namespace flow::bench
