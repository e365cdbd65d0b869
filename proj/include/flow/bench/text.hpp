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

#include <chrono>
#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <tuple>
#include <unordered_map>
#include <vector>

#include "flow/bench/common.hpp"
#include "flow/stream.hpp"

namespace flow::bench {

// Word count.

using WordCounts = std::map<std::string, std::uint64_t>;

/// Zipf-distributed words over a seeded vocabulary, ~12 words per line.
inline void write_corpus(std::ostream& out, std::uint64_t bytes, std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t vocab_size = 20000;
  std::vector<std::string> vocab;
  vocab.reserve(vocab_size);
  std::uniform_int_distribution<int> len(2, 10);
  std::uniform_int_distribution<int> letter(0, 25);
  for (std::size_t i = 0; i < vocab_size; ++i) {
    std::string w;
    int n = len(rng);
    for (int j = 0; j < n; ++j) w.push_back(static_cast<char>('a' + letter(rng)));
    // Some capitals and punctuation exercise the tokenizer.
    if (i % 7 == 0) w[0] = static_cast<char>(w[0] - 'a' + 'A');
    vocab.push_back(std::move(w));
  }
  Zipf zipf(vocab_size, 1.1);
  std::uniform_int_distribution<int> words_per_line(4, 20);
  std::uint64_t written = 0;
  std::string line;
  while (written < bytes) {
    line.clear();
    int n = words_per_line(rng);
    for (int j = 0; j < n; ++j) {
      if (j) line += (j % 9 == 0) ? ", " : " ";
      line += vocab[zipf(rng)];
    }
    line += ".\n";
    out << line;
    written += line.size();
  }
}

inline std::string corpus_file(std::uint64_t bytes, std::uint64_t seed) {
  auto path = data_dir() + "/corpus-" + std::to_string(bytes) + "-" + std::to_string(seed) + ".txt";
  return materialize(path, [&](std::ostream& out) { write_corpus(out, bytes, seed); });
}

inline WordCounts wc_oracle(const std::string& path) {
  std::unordered_map<std::string, std::uint64_t> counts;
  std::ifstream in(path);
  std::string line;
  while (std::getline(in, line))
    for (auto& w : tokenize(line)) ++counts[w];
  return WordCounts(counts.begin(), counts.end());
}

/// source -> flat_map(tokenize) -> group_by(word) -> map(1) -> reduce(+) -> collect.
inline CollectResult<std::pair<std::string, std::uint64_t>> wc_job(Environment& env, const std::string& path) {
  return env.source_file_lines(path)
      .flat_map([](std::string line) { return tokenize(line); })
      .group_by([](const std::string& w) { return w; })
      .map([](std::string) { return std::uint64_t{1}; })
      .reduce([](std::uint64_t a, std::uint64_t b) { return a + b; })
      .collect();
}

/// Per-replica hash map fold, merged on one replica.
inline CollectResult<std::unordered_map<std::string, std::uint64_t>> wc_assoc_job(Environment& env,
                                                                                  const std::string& path) {
  using Map = std::unordered_map<std::string, std::uint64_t>;
  return env.source_file_lines(path)
      .fold_assoc(
          Map{},
          [](Map& m, std::string line) {
            for (auto& w : tokenize(line)) ++m[w];
          },
          [](Map& m, Map part) {
            for (auto& [w, c] : part) m[w] += c;
          })
      .collect();
}

// Vehicle collisions: three queries over one CSV.

struct Collision {
  int year = 0;
  unsigned month = 0;
  unsigned day = 0;
  std::string borough;
  std::string factor;
  int killed = 0;

  FLOW_FIELDS(year, month, day, borough, factor, killed)
};

inline const std::vector<std::string>& boroughs() {
  static const std::vector<std::string> b{"BRONX", "BROOKLYN", "MANHATTAN", "QUEENS", "STATEN ISLAND", ""};
  return b;
}

inline const std::vector<std::string>& factors() {
  static const std::vector<std::string> f{"Driver Inattention", "Failure to Yield", "Following Too Closely",
                                          "Unsafe Speed",       "Backing Unsafely", "Unspecified",
                                          "Alcohol Involvement", "Passing Too Closely"};
  return f;
}

/// CSV header then rows `MM/DD/YYYY,BOROUGH,FACTOR,KILLED`.
inline void write_collisions(std::ostream& out, std::uint64_t rows, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_int_distribution<int> day_of(0, 3 * 365);
  std::uniform_int_distribution<std::size_t> bi(0, boroughs().size() - 1);
  std::uniform_int_distribution<std::size_t> fi(0, factors().size() - 1);
  std::uniform_int_distribution<int> kill(0, 99);
  out << "DATE,BOROUGH,FACTOR,KILLED\n";
  const std::chrono::sys_days base{std::chrono::year{2018} / 1 / 1};
  for (std::uint64_t i = 0; i < rows; ++i) {
    std::chrono::year_month_day d{base + std::chrono::days{day_of(rng)}};
    int k = kill(rng);
    int killed = k < 95 ? 0 : (k < 99 ? 1 : 2);
    char date[16];
    std::snprintf(date, sizeof date, "%02u/%02u/%04d", static_cast<unsigned>(d.month()), static_cast<unsigned>(d.day()),
                  static_cast<int>(d.year()));
    out << date << ',' << boroughs()[bi(rng)] << ',' << factors()[fi(rng)] << ',' << killed << '\n';
  }
}

inline std::string collisions_file(std::uint64_t rows, std::uint64_t seed) {
  auto path = data_dir() + "/collisions-" + std::to_string(rows) + "-" + std::to_string(seed) + ".csv";
  return materialize(path, [&](std::ostream& out) { write_collisions(out, rows, seed); });
}

inline std::optional<Collision> parse_collision(const std::string& line) {
  std::vector<std::string> f;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      f.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  f.push_back(cur);
  if (f.size() != 4 || f[0].size() != 10 || f[0] == "DATE") return std::nullopt;
  Collision c;
  c.month = static_cast<unsigned>(std::stoi(f[0].substr(0, 2)));
  c.day = static_cast<unsigned>(std::stoi(f[0].substr(3, 2)));
  c.year = std::stoi(f[0].substr(6, 4));
  c.borough = f[1];
  c.factor = f[2];
  c.killed = std::stoi(f[3]);
  return c;
}

/// ISO-8601 (week-based year, week number).
inline std::pair<int, int> iso_week(int y, unsigned m, unsigned d) {
  using namespace std::chrono;
  sys_days day{year{y} / month{m} / std::chrono::day{d}};
  // The ISO week belongs to the year containing its Thursday.
  weekday wd{day};
  int iso_wd = wd.iso_encoding();
  sys_days thursday = day + days{4 - iso_wd};
  year_month_day ty{thursday};
  sys_days jan1{ty.year() / January / 1};
  int week = static_cast<int>((thursday - jan1).count() / 7) + 1;
  return {static_cast<int>(ty.year()), week};
}

using Week = std::pair<int, int>;

struct CollResult {
  /// Query 1: lethal accidents per week.
  std::map<Week, std::uint64_t> lethal_per_week;
  /// Query 2: factor -> (accidents, percent lethal).
  std::map<std::string, std::pair<std::uint64_t, double>> per_factor;
  /// Query 3: (borough, week) -> (accidents, average killed per accident).
  std::map<std::pair<std::string, Week>, std::pair<std::uint64_t, double>> per_borough_week;

  bool approx_equal(const CollResult& o, double eps = 1e-9) const {
    if (lethal_per_week != o.lethal_per_week) return false;
    if (per_factor.size() != o.per_factor.size() || per_borough_week.size() != o.per_borough_week.size()) return false;
    for (const auto& [k, v] : per_factor) {
      auto it = o.per_factor.find(k);
      if (it == o.per_factor.end() || it->second.first != v.first || std::abs(it->second.second - v.second) > eps)
        return false;
    }
    for (const auto& [k, v] : per_borough_week) {
      auto it = o.per_borough_week.find(k);
      if (it == o.per_borough_week.end() || it->second.first != v.first || std::abs(it->second.second - v.second) > eps)
        return false;
    }
    return true;
  }
};

inline CollResult coll_oracle(const std::string& path) {
  CollResult r;
  std::map<std::string, std::pair<std::uint64_t, std::uint64_t>> fac;
  std::map<std::pair<std::string, Week>, std::pair<std::uint64_t, std::uint64_t>> bw;
  std::ifstream in(path);
  std::string line;
  while (std::getline(in, line)) {
    auto c = parse_collision(line);
    if (!c) continue;
    auto w = iso_week(c->year, c->month, c->day);
    if (c->killed > 0) ++r.lethal_per_week[w];
    auto& f = fac[c->factor];
    ++f.first;
    f.second += c->killed > 0 ? 1 : 0;
    if (!c->borough.empty()) {
      auto& b = bw[{c->borough, w}];
      ++b.first;
      b.second += static_cast<std::uint64_t>(c->killed);
    }
  }
  for (auto& [k, v] : fac) r.per_factor[k] = {v.first, 100.0 * static_cast<double>(v.second) / static_cast<double>(v.first)};
  for (auto& [k, v] : bw) r.per_borough_week[k] = {v.first, static_cast<double>(v.second) / static_cast<double>(v.first)};
  return r;
}

struct CollJob {
  CollectResult<std::pair<Week, std::uint64_t>> q1;
  CollectResult<std::pair<std::string, std::pair<std::uint64_t, std::uint64_t>>> q2;
  CollectResult<std::pair<std::pair<std::string, Week>, std::pair<std::uint64_t, std::uint64_t>>> q3;

  std::optional<CollResult> result() const {
    const auto& a = q1.get();
    const auto& b = q2.get();
    const auto& c = q3.get();
    if (!a || !b || !c) return std::nullopt;
    CollResult r;
    for (auto& [w, n] : *a) r.lethal_per_week[w] = n;
    for (auto& [f, v] : *b)
      r.per_factor[f] = {v.first, 100.0 * static_cast<double>(v.second) / static_cast<double>(v.first)};
    for (auto& [k, v] : *c)
      r.per_borough_week[k] = {v.first, static_cast<double>(v.second) / static_cast<double>(v.first)};
    return r;
  }
};

/// Each query parses the file on its own, as three independent pipelines.
inline CollJob coll_job(Environment& env, const std::string& path) {
  using Counts = std::pair<std::uint64_t, std::uint64_t>;
  auto add = [](Counts a, Counts b) { return Counts{a.first + b.first, a.second + b.second}; };
  auto parsed = [&] {
    return env.source_file_lines(path)
        .flat_map([](std::string line) {
          std::vector<Collision> out;
          if (auto c = parse_collision(line)) out.push_back(std::move(*c));
          return out;
        });
  };
  CollJob job{
      parsed()
          .filter([](const Collision& c) { return c.killed > 0; })
          .map([](Collision c) { return std::pair<Week, std::uint64_t>(iso_week(c.year, c.month, c.day), 1); })
          .group_by([](const std::pair<Week, std::uint64_t>& p) { return p.first; })
          .map([](std::pair<Week, std::uint64_t> p) { return p.second; })
          .reduce([](std::uint64_t a, std::uint64_t b) { return a + b; })
          .collect(),
      parsed()
          .map([](Collision c) { return std::pair<std::string, Counts>(c.factor, Counts{1, c.killed > 0 ? 1u : 0u}); })
          .group_by([](const std::pair<std::string, Counts>& p) { return p.first; })
          .map([](std::pair<std::string, Counts> p) { return p.second; })
          .reduce(add)
          .collect(),
      parsed()
          .filter([](const Collision& c) { return !c.borough.empty(); })
          .map([](Collision c) {
            return std::pair<std::pair<std::string, Week>, Counts>({c.borough, iso_week(c.year, c.month, c.day)},
                                                                   Counts{1, static_cast<std::uint64_t>(c.killed)});
          })
          .group_by([](const auto& p) { return p.first; })
          .map([](auto p) { return p.second; })
          .reduce(add)
          .collect()};
  return job;
}

}  // namespace flow::bench
