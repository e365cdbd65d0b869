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

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <sys/types.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <cstring>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <thread>
#include <utility>

#include "flow/error.hpp"

namespace flow::net {

inline std::string errno_text(int err) { return std::strerror(err); }

/// Owning socket descriptor.
class Socket {
 public:
  Socket() = default;
  explicit Socket(int fd) : fd_(fd) {}
  Socket(Socket&& o) noexcept : fd_(std::exchange(o.fd_, -1)) {}
  Socket& operator=(Socket&& o) noexcept {
    if (this != &o) {
      close();
      fd_ = std::exchange(o.fd_, -1);
    }
    return *this;
  }
  Socket(const Socket&) = delete;
  Socket& operator=(const Socket&) = delete;
  ~Socket() { close(); }

  int fd() const { return fd_; }
  bool valid() const { return fd_ >= 0; }

  void close() {
    if (fd_ >= 0) {
      ::close(fd_);
      fd_ = -1;
    }
  }

  void shutdown_write() {
    if (fd_ >= 0) ::shutdown(fd_, SHUT_WR);
  }
  /// Wakes any thread blocked on this socket without releasing the descriptor.
  void shutdown_both() {
    if (fd_ >= 0) ::shutdown(fd_, SHUT_RDWR);
  }

  void write_all(std::span<const std::uint8_t> bytes) {
    std::size_t off = 0;
    while (off < bytes.size()) {
      ssize_t n = ::send(fd_, bytes.data() + off, bytes.size() - off, MSG_NOSIGNAL);
      if (n < 0) {
        if (errno == EINTR) continue;
        throw NetError("send failed: " + errno_text(errno));
      }
      off += static_cast<std::size_t>(n);
    }
  }

  /// Returns bytes read; 0 on orderly close.
  std::size_t read_some(std::span<std::uint8_t> buf) {
    while (true) {
      ssize_t n = ::recv(fd_, buf.data(), buf.size(), 0);
      if (n < 0) {
        if (errno == EINTR) continue;
        throw NetError("recv failed: " + errno_text(errno));
      }
      return static_cast<std::size_t>(n);
    }
  }

  /// Reads exactly `buf.size()` bytes; false if the peer closed before any byte.
  bool read_exact(std::span<std::uint8_t> buf) {
    std::size_t off = 0;
    while (off < buf.size()) {
      std::size_t n = read_some(buf.subspan(off));
      if (n == 0) {
        if (off == 0) return false;
        throw NetError("connection closed mid-message");
      }
      off += n;
    }
    return true;
  }

 private:
  int fd_ = -1;
};

inline sockaddr_in resolve(const std::string& address, std::uint16_t port) {
  sockaddr_in sa{};
  sa.sin_family = AF_INET;
  sa.sin_port = htons(port);
  if (::inet_pton(AF_INET, address.c_str(), &sa.sin_addr) == 1) return sa;
  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  if (int rc = ::getaddrinfo(address.c_str(), nullptr, &hints, &res); rc != 0 || res == nullptr)
    throw NetError("cannot resolve " + address + ": " + ::gai_strerror(rc));
  sa.sin_addr = reinterpret_cast<sockaddr_in*>(res->ai_addr)->sin_addr;
  ::freeaddrinfo(res);
  return sa;
}

inline void set_nodelay(int fd) {
  int one = 1;
  ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
}

inline Socket listen_on(const std::string& address, std::uint16_t port, int backlog = 64) {
  Socket s(::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0));
  if (!s.valid()) throw NetError("socket failed: " + errno_text(errno));
  int one = 1;
  ::setsockopt(s.fd(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  sockaddr_in sa = resolve(address, port);
  if (::bind(s.fd(), reinterpret_cast<sockaddr*>(&sa), sizeof sa) != 0)
    throw NetError("bind " + address + ":" + std::to_string(port) + " failed: " + errno_text(errno));
  if (::listen(s.fd(), backlog) != 0) throw NetError("listen failed: " + errno_text(errno));
  return s;
}

inline std::uint16_t local_port(const Socket& s) {
  sockaddr_in sa{};
  socklen_t len = sizeof sa;
  ::getsockname(s.fd(), reinterpret_cast<sockaddr*>(&sa), &len);
  return ntohs(sa.sin_port);
}

inline Socket accept_from(const Socket& listener) {
  while (true) {
    int fd = ::accept4(listener.fd(), nullptr, nullptr, SOCK_CLOEXEC);
    if (fd >= 0) {
      set_nodelay(fd);
      return Socket(fd);
    }
    if (errno == EINTR || errno == ECONNABORTED) continue;
    throw NetError("accept failed: " + errno_text(errno));
  }
}

struct RetryPolicy {
  int attempts = 30;
  std::chrono::milliseconds interval{1000};
};

/// Connects with retries; `should_stop` aborts the wait early.
inline Socket connect_with_retry(const std::string& address, std::uint16_t port, RetryPolicy retry,
                                 const std::function<bool()>& should_stop = {}) {
  sockaddr_in sa = resolve(address, port);
  int last_err = 0;
  for (int attempt = 0; attempt < retry.attempts; ++attempt) {
    if (should_stop && should_stop()) throw JobAborted();
    Socket s(::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0));
    if (!s.valid()) throw NetError("socket failed: " + errno_text(errno));
    if (::connect(s.fd(), reinterpret_cast<sockaddr*>(&sa), sizeof sa) == 0) {
      set_nodelay(s.fd());
      return s;
    }
    last_err = errno;
    if (attempt + 1 < retry.attempts) std::this_thread::sleep_for(retry.interval);
  }
  throw NetError("peer " + address + ":" + std::to_string(port) + " unreachable after " +
                 std::to_string(retry.attempts) + " attempts: " + errno_text(last_err));
}

/// Threads of this process, from /proc/self/task.
inline std::size_t count_threads() {
  std::size_t n = 0;
  for ([[maybe_unused]] const auto& e : std::filesystem::directory_iterator("/proc/self/task")) ++n;
  return n;
}

/// Open socket descriptors of this process, from /proc/self/fd.
inline std::size_t count_sockets() {
  std::size_t n = 0;
  std::error_code ec;
  for (const auto& e : std::filesystem::directory_iterator("/proc/self/fd", ec)) {
    std::error_code lec;
    auto target = std::filesystem::read_symlink(e.path(), lec);
    if (!lec && target.string().rfind("socket:", 0) == 0) ++n;
  }
  return n;
}

}  // namespace flow::net
