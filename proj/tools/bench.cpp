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

// Benchmark driver: builds one job, runs it on the given topology and prints
// a JSON report line. Exit 2 on usage errors, 1 on verification failure.

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <string>

#include "flow/bench/collatz.hpp"
#include "flow/bench/graph.hpp"
#include "flow/bench/iterative.hpp"
#include "flow/bench/nexmark.hpp"
#include "flow/bench/text.hpp"
#include "flow/flow.hpp"

using namespace flow;
using namespace flow::bench;
using json = nlohmann::json;

namespace {

struct Options {
  std::string name;
  std::optional<std::size_t> local;
  std::string hosts;
  std::optional<std::size_t> host_index;
  std::string batch;
  bool verify = false;
  bool dump_plan = false;
  std::uint64_t seed = 1;

  std::string size = "10MB";
  std::uint64_t rows = 200000;
  std::uint64_t points = 100000;
  std::size_t dims = 2;
  std::size_t k = 30;
  std::uint32_t iters = 0;
  std::uint32_t nodes = 0;
  std::uint64_t edges = 0;
  double p = 0;
  std::uint64_t limit = 1000000;
  std::uint64_t events = 100000;
};

/// Per-benchmark outcome. `check` runs after the job on the host holding the results.
struct Prepared {
  std::uint64_t items = 0;
  std::function<bool(json&)> check;
};

using Builder = std::function<Prepared(Environment&, const Options&)>;

bool close(double a, double b, double eps) { return std::abs(a - b) <= eps; }

Prepared run_wc(Environment& env, const Options& o, bool assoc) {
  auto path = corpus_file(parse_size(o.size), o.seed);
  Prepared p;
  p.items = std::filesystem::file_size(path);
  if (assoc) {
    auto r = std::make_shared<CollectResult<std::unordered_map<std::string, std::uint64_t>>>(wc_assoc_job(env, path));
    p.check = [r, path, &o](json& rep) {
      auto got = r->get();
      if (!got) return false;
      WordCounts m;
      for (auto& part : *got)
        for (auto& [w, c] : part) m[w] += c;
      rep["distinct_words"] = m.size();
      return !o.verify || m == wc_oracle(path);
    };
  } else {
    auto r = std::make_shared<CollectResult<std::pair<std::string, std::uint64_t>>>(wc_job(env, path));
    p.check = [r, path, &o](json& rep) {
      auto got = r->get();
      if (!got) return false;
      WordCounts m;
      bool dup = false;
      for (auto& [w, c] : *got) dup |= !m.emplace(w, c).second;
      rep["distinct_words"] = m.size();
      return !o.verify || (!dup && m == wc_oracle(path));
    };
  }
  return p;
}

Prepared run_coll(Environment& env, const Options& o) {
  auto path = collisions_file(o.rows, o.seed);
  auto job = std::make_shared<CollJob>(coll_job(env, path));
  Prepared p;
  p.items = o.rows;
  p.check = [job, path, &o](json& rep) {
    auto got = job->result();
    if (!got) return false;
    rep["weeks"] = got->lethal_per_week.size();
    return !o.verify || got->approx_equal(coll_oracle(path));
  };
  return p;
}

Prepared run_kmeans(Environment& env, const Options& o) {
  auto pts = std::make_shared<const std::vector<Point>>(gen_points(o.points, o.dims, o.k, o.seed));
  const std::uint32_t max_iters = o.iters ? o.iters : 30;
  auto seen = std::make_shared<std::vector<std::vector<Point>>>();
  auto r = std::make_shared<CollectResult<KMeansState>>(
      kmeans_job(env, pts, o.k, max_iters, [seen](const std::vector<Point>& c) { seen->push_back(c); }));
  Prepared p;
  p.items = o.points;
  p.check = [r, pts, seen, max_iters, &o](json& rep) {
    auto got = r->get();
    if (!got || got->size() != 1) return false;
    rep["iterations"] = (*got)[0].iterations;
    rep["centroids"] = (*got)[0].centroids;
    if (!o.verify) return true;
    // Every iteration boundary must agree with sequential Lloyd.
    std::vector<std::vector<Point>> expect;
    kmeans_oracle(*pts, o.k, max_iters, [&](const std::vector<Point>& c) { expect.push_back(c); });
    if (expect.size() != seen->size()) return false;
    double worst = 0;
    for (std::size_t it = 0; it < expect.size(); ++it)
      for (std::size_t c = 0; c < o.k; ++c)
        for (std::size_t d = 0; d < o.dims; ++d) worst = std::max(worst, std::abs(expect[it][c][d] - (*seen)[it][c][d]));
    rep["max_error"] = worst;
    return worst <= 1e-9;
  };
  return p;
}

Prepared run_pagerank(Environment& env, const Options& o) {
  const std::uint32_t nodes = o.nodes ? o.nodes : 10000;
  const std::uint64_t m = o.edges ? o.edges : 50000;
  const std::uint32_t iters = o.iters ? o.iters : 20;
  auto edges = std::make_shared<const std::vector<Edge>>(gen_edges(nodes, m, o.seed));
  auto r = std::make_shared<CollectResult<RankState>>(pagerank_job(env, nodes, edges, iters));
  Prepared p;
  p.items = edges->size();
  p.check = [r, edges, nodes, iters, &o](json& rep) {
    auto got = r->get();
    if (!got || got->size() != 1) return false;
    const auto& ranks = (*got)[0].ranks;
    double sum = std::accumulate(ranks.begin(), ranks.end(), 0.0);
    rep["rank_sum"] = sum;
    if (!o.verify) return true;
    auto expect = pagerank_oracle(nodes, *edges, iters);
    double worst = 0;
    for (std::size_t i = 0; i < nodes; ++i) worst = std::max(worst, std::abs(expect[i] - ranks[i]));
    rep["max_error"] = worst;
    return worst <= 1e-6 && close(sum, 1.0, 1e-6);
  };
  return p;
}

Prepared run_conn(Environment& env, const Options& o) {
  const std::uint32_t nodes = o.nodes ? o.nodes : 20000;
  const std::uint64_t m = o.edges ? o.edges : 15000;
  auto edges = std::make_shared<const std::vector<Edge>>(gen_edges(nodes, m, o.seed));
  auto r = std::make_shared<CollectResult<LabelState>>(components_job(env, nodes, edges));
  Prepared p;
  p.items = edges->size();
  p.check = [r, edges, nodes, &o](json& rep) {
    auto got = r->get();
    if (!got || got->size() != 1) return false;
    const auto& labels = (*got)[0].labels;
    std::set<std::uint32_t> distinct(labels.begin(), labels.end());
    rep["components"] = distinct.size();
    return !o.verify || labels == components_oracle(nodes, *edges);
  };
  return p;
}

Prepared run_trclos(Environment& env, const Options& o) {
  const std::uint32_t nodes = o.nodes ? o.nodes : 300;
  const double prob = o.p > 0 ? o.p : 0.01;
  auto edges = std::make_shared<const std::vector<Edge>>(gen_dag(nodes, prob, o.seed));
  auto r = std::make_shared<CollectResult<ClosureState>>(closure_job(env, nodes, edges));
  Prepared p;
  p.items = edges->size();
  p.check = [r, edges, nodes, &o](json& rep) {
    auto got = r->get();
    if (!got || got->size() != 1) return false;
    rep["closure_edges"] = (*got)[0].edges.size();
    return !o.verify || (*got)[0].edges == closure_oracle(nodes, *edges);
  };
  return p;
}

Prepared run_tri(Environment& env, const Options& o) {
  const std::uint32_t nodes = o.nodes ? o.nodes : 1000;
  const double prob = o.p > 0 ? o.p : 0.05;
  auto edges = std::make_shared<const std::vector<Edge>>(gen_gnp(nodes, prob, o.seed));
  auto r = std::make_shared<CollectResult<std::uint64_t>>(triangles_job(env, edges));
  Prepared p;
  p.items = edges->size();
  p.check = [r, edges, nodes, &o](json& rep) {
    auto got = r->get();
    if (!got || got->size() != 1) return false;
    rep["triangles"] = (*got)[0];
    return !o.verify || (*got)[0] == triangles_oracle(nodes, *edges);
  };
  return p;
}

Prepared run_collatz(Environment& env, const Options& o) {
  auto r = std::make_shared<CollectResult<CollatzBest>>(collatz_job(env, o.limit));
  Prepared p;
  p.items = o.limit;
  p.check = [r, &o](json& rep) {
    auto got = r->get();
    if (!got || got->size() != 1) return false;
    rep["argmax"] = (*got)[0].first;
    rep["steps"] = (*got)[0].second;
    return !o.verify || (*got)[0] == collatz_oracle(o.limit);
  };
  return p;
}

NexmarkConfig nexmark_config(const Options& o) {
  NexmarkConfig c;
  c.events = o.events;
  c.seed = o.seed;
  return c;
}

Prepared run_q1(Environment& env, const Options& o) {
  auto cfg = nexmark_config(o);
  auto r = std::make_shared<CollectResult<Q1Row>>(q1_job(env, cfg));
  Prepared p;
  p.items = cfg.events;
  p.check = [r, cfg, &o](json& rep) {
    auto got = r->get();
    if (!got) return false;
    std::sort(got->begin(), got->end());
    rep["rows"] = got->size();
    return !o.verify || *got == q1_oracle(nexmark_events(cfg));
  };
  return p;
}

Prepared run_q3(Environment& env, const Options& o) {
  auto cfg = nexmark_config(o);
  auto r = std::make_shared<CollectResult<Q3Row>>(q3_job(env, cfg));
  Prepared p;
  p.items = cfg.events;
  p.check = [r, cfg, &o](json& rep) {
    auto got = r->get();
    if (!got) return false;
    std::sort(got->begin(), got->end());
    rep["rows"] = got->size();
    return !o.verify || *got == q3_oracle(nexmark_events(cfg));
  };
  return p;
}

Prepared run_q5(Environment& env, const Options& o) {
  auto cfg = nexmark_config(o);
  auto r = std::make_shared<decltype(q5_job(env, cfg))>(q5_job(env, cfg));
  Prepared p;
  p.items = cfg.events;
  p.check = [r, cfg, &o](json& rep) {
    auto got = r->get();
    if (!got) return false;
    auto windows = q5_result(*got);
    rep["windows"] = windows.size();
    return !o.verify || windows == q5_oracle(nexmark_events(cfg), cfg);
  };
  return p;
}

const std::map<std::string, Builder>& benchmarks() {
  static const std::map<std::string, Builder> b{
      {"wc", [](Environment& e, const Options& o) { return run_wc(e, o, false); }},
      {"wc_assoc", [](Environment& e, const Options& o) { return run_wc(e, o, true); }},
      {"coll", run_coll},
      {"kmeans", run_kmeans},
      {"pagerank", run_pagerank},
      {"conn", run_conn},
      {"trclos", run_trclos},
      {"tri", run_tri},
      {"collatz", run_collatz},
      {"nexmark_q1", run_q1},
      {"nexmark_q3", run_q3},
      {"nexmark_q5", run_q5},
  };
  return b;
}

Environment make_env(const Options& o) {
  if (o.local && !o.hosts.empty()) throw BuildError("--local and --hosts are exclusive");
  if (o.local) {
    if (*o.local == 0) throw BuildError("--local needs at least one slot");
    return Environment::local(*o.local);
  }
  if (!o.hosts.empty()) {
    Config c;
    c.topology = Topology::parse_file(o.hosts);
    c.host_index = o.host_index.value_or(0);
    return Environment(c);
  }
  return Environment::from_env();
}

}  // namespace

int main(int argc, char** argv) {
  Options o;
  CLI::App app{"flow benchmark driver"};
  std::string names;
  for (const auto& [n, _] : benchmarks()) names += (names.empty() ? "" : ", ") + n;
  app.add_option("benchmark", o.name, "One of: " + names)->required();
  app.add_option("--local", o.local, "Single process with N slots");
  app.add_option("--hosts", o.hosts, "Topology file");
  app.add_option("--host-index", o.host_index, "This process's host index in the topology");
  app.add_option("--batch", o.batch, "fixed:N | adaptive:N:MSms | unbatched");
  app.add_flag("--verify", o.verify, "Compare the result with a sequential oracle");
  app.add_flag("--dump-plan", o.dump_plan, "Print the execution plan and exit");
  app.add_option("--seed", o.seed, "Dataset seed");
  app.add_option("--size", o.size, "wc corpus size, e.g. 10MB");
  app.add_option("--rows", o.rows, "coll rows");
  app.add_option("--points", o.points, "kmeans points");
  app.add_option("--dims", o.dims, "kmeans dimensions");
  app.add_option("--k", o.k, "kmeans clusters");
  app.add_option("--iters", o.iters, "Iteration limit (kmeans) or count (pagerank)");
  app.add_option("--nodes", o.nodes, "Graph nodes");
  app.add_option("--edges", o.edges, "Graph edges (pagerank, conn)");
  app.add_option("--p", o.p, "Edge probability (trclos, tri)");
  app.add_option("--limit", o.limit, "collatz upper bound");
  app.add_option("--events", o.events, "nexmark events");
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }
  auto it = benchmarks().find(o.name);
  if (it == benchmarks().end()) {
    std::cerr << "unknown benchmark `" << o.name << "`; expected one of: " << names << "\n";
    return 2;
  }

  std::optional<Environment> env;
  try {
    env.emplace(make_env(o));
    if (!o.batch.empty()) env->set_batching(BatchingPolicy::parse(o.batch));
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }

  try {
    auto prepared = it->second(*env, o);
    if (o.dump_plan) {
      std::cout << env->dump_plan();
      return 0;
    }
    const auto& cfg = env->config();
    json rep;
    rep["bench"] = o.name;
    rep["hosts"] = cfg.topology.hosts.size();
    rep["host_index"] = cfg.host_index;
    std::vector<std::size_t> slots;
    for (const auto& h : cfg.topology.hosts) slots.push_back(h.slots);
    rep["slots"] = slots;
    rep["batch"] = cfg.batching.str();
    rep["seed"] = o.seed;
    rep["items"] = prepared.items;

    auto start = std::chrono::steady_clock::now();
    env->execute();
    rep["wall_ms"] = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();

    int code = 0;
    if (cfg.host_index != 0) {
      // Results are collected on host 0.
      rep["verified"] = "skipped";
    } else {
      bool ok = prepared.check(rep);
      rep["verified"] = o.verify ? (ok ? "pass" : "fail") : "skipped";
      if (o.verify && !ok) code = 1;
    }
    std::cout << rep.dump() << std::endl;
    return code;
  } catch (const BuildError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
