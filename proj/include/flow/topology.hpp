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
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "flow/error.hpp"

namespace flow {

/// Global task address: host index, stage id, replica index (global across hosts).
struct Coord {
  std::uint16_t host = 0;
  std::uint16_t stage = 0;
  std::uint16_t replica = 0;

  auto operator<=>(const Coord&) const = default;

  std::string str() const {
    return "(" + std::to_string(host) + "," + std::to_string(stage) + "," + std::to_string(replica) + ")";
  }
};

struct HostSpec {
  std::string address;
  std::uint16_t base_port = 0;
  std::size_t slots = 1;

  bool operator==(const HostSpec&) const = default;
};

/// Ordered host list; the position of a host is its index. `task_overrides`
/// pins the replica count of individual stages.
struct Topology {
  std::vector<HostSpec> hosts;
  std::map<std::size_t, std::size_t> task_overrides;

  bool operator==(const Topology&) const = default;

  std::size_t total_slots() const {
    std::size_t n = 0;
    for (const auto& h : hosts) n += h.slots;
    return n;
  }

  static Topology local(std::size_t slots) {
    if (slots == 0) throw BuildError("local topology needs at least one slot");
    return Topology{{HostSpec{"127.0.0.1", 0, slots}}, {}};
  }

  void validate() const {
    if (hosts.empty()) throw BuildError("topology has no hosts");
    if (hosts.size() > 0xffff) throw BuildError("too many hosts");
    for (std::size_t i = 0; i < hosts.size(); ++i) {
      if (hosts[i].slots == 0) throw BuildError("host " + std::to_string(i) + " has zero slots");
      for (std::size_t j = 0; j < i; ++j) {
        if (hosts[j].address == hosts[i].address && hosts[j].base_port == hosts[i].base_port)
          throw BuildError("duplicate host " + hosts[i].address + ":" + std::to_string(hosts[i].base_port));
      }
    }
    for (const auto& [stage, n] : task_overrides) {
      if (n == 0) throw BuildError("task override for stage " + std::to_string(stage) + " is zero");
    }
  }

  /// Parses the line format `host <address> <base_port> <slots>` plus
  /// optional `tasks <stage> <count>` lines. `#` starts a comment.
  static Topology parse(std::istream& in) {
    Topology t;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
      std::istringstream ls(line);
      std::string kw;
      if (!(ls >> kw)) continue;
      auto bad = [&](const std::string& why) {
        return BuildError("topology line " + std::to_string(lineno) + ": " + why);
      };
      if (kw == "host") {
        HostSpec h;
        long long port = -1;
        long long slots = -1;
        if (!(ls >> h.address >> port >> slots)) throw bad("expected `host <address> <base_port> <slots>`");
        if (port < 0 || port > 0xffff) throw bad("base port out of range");
        if (slots <= 0) throw bad("slots must be positive");
        h.base_port = static_cast<std::uint16_t>(port);
        h.slots = static_cast<std::size_t>(slots);
        t.hosts.push_back(std::move(h));
      } else if (kw == "tasks") {
        long long stage = -1;
        long long n = -1;
        if (!(ls >> stage >> n) || stage < 0 || n <= 0) throw bad("expected `tasks <stage> <count>`");
        t.task_overrides[static_cast<std::size_t>(stage)] = static_cast<std::size_t>(n);
      } else {
        throw bad("unknown keyword `" + kw + "`");
      }
      std::string extra;
      if (ls >> extra) throw bad("trailing token `" + extra + "`");
    }
    t.validate();
    return t;
  }

  static Topology parse_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw BuildError("cannot open topology file " + path);
    return parse(in);
  }

  std::string str() const {
    std::ostringstream os;
    for (const auto& h : hosts) os << "host " << h.address << ' ' << h.base_port << ' ' << h.slots << '\n';
    for (const auto& [s, n] : task_overrides) os << "tasks " << s << ' ' << n << '\n';
    return os.str();
  }
};

}  // namespace flow
