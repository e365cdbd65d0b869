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

#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <thread>
#include <vector>

#include "flow/flow.hpp"

namespace testsupport {

inline bool port_free(std::uint16_t port) {
  int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  if (fd < 0) return false;
  int one = 1;
  ::setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  sockaddr_in sa{};
  sa.sin_family = AF_INET;
  sa.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  sa.sin_port = htons(port);
  bool ok = ::bind(fd, reinterpret_cast<sockaddr*>(&sa), sizeof sa) == 0;
  ::close(fd);
  return ok;
}

/// A base port whose next `span` ports are currently bindable.
inline std::uint16_t free_base_port(std::size_t span = 64) {
  static std::mt19937 rng(std::random_device{}());
  std::uniform_int_distribution<int> pick(20000, 60000 - static_cast<int>(span));
  for (int attempt = 0; attempt < 200; ++attempt) {
    auto base = static_cast<std::uint16_t>(pick(rng));
    bool ok = true;
    for (std::size_t i = 0; i < span && ok; ++i) ok = port_free(static_cast<std::uint16_t>(base + i));
    if (ok) return base;
  }
  throw std::runtime_error("no free port range");
}

/// Localhost topology with the given slot counts; hosts get disjoint port ranges.
inline flow::Topology localhost(const std::vector<std::size_t>& slots) {
  auto base = free_base_port(64 * slots.size());
  flow::Topology t;
  for (std::size_t i = 0; i < slots.size(); ++i)
    t.hosts.push_back({"127.0.0.1", static_cast<std::uint16_t>(base + 64 * i), slots[i]});
  return t;
}

inline flow::Environment host_env(const flow::Topology& topo, std::size_t index) {
  flow::Config c;
  c.topology = topo;
  c.host_index = index;
  c.connect_retry = {200, std::chrono::milliseconds(20)};
  return flow::Environment(c);
}

/// Builds the same job on every host of `topo` and runs all hosts in this
/// process, one thread each. Returns the per-host builder results.
template <class Build>
auto run_hosts(const flow::Topology& topo, Build build) {
  using R = decltype(build(std::declval<flow::Environment&>()));
  std::vector<flow::Environment> envs;
  std::vector<R> results;
  for (std::size_t h = 0; h < topo.hosts.size(); ++h) {
    envs.push_back(host_env(topo, h));
    results.push_back(build(envs.back()));
  }
  std::vector<std::exception_ptr> errors(envs.size());
  std::vector<std::thread> threads;
  for (std::size_t h = 0; h < envs.size(); ++h) {
    threads.emplace_back([&, h] {
      try {
        envs[h].execute();
      } catch (...) {
        errors[h] = std::current_exception();
      }
    });
  }
  for (auto& t : threads) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return results;
}

template <class T>
std::vector<T> sorted(std::vector<T> v) {
  std::sort(v.begin(), v.end());
  return v;
}

}  // namespace testsupport
