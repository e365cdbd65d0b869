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

#include <poll.h>

#include <atomic>
#include <chrono>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "flow/channel.hpp"
#include "flow/error.hpp"
#include "flow/net.hpp"
#include "flow/node.hpp"
#include "flow/planner.hpp"
#include "flow/stats.hpp"
#include "flow/window.hpp"
#include "flow/wire.hpp"

namespace flow {

inline constexpr auto kIdleTick = std::chrono::milliseconds(10);

struct RunOptions {
  BatchingPolicy batching{};
  net::RetryPolicy connect_retry{};
  std::size_t mux_queue_capacity = 64;
  /// Blocks until loop state for `iteration` is visible in this process, if
  /// `to_op` (the operator receiving the batch) is inside a loop body.
  std::function<void(std::size_t to_op, std::uint32_t iteration, const std::atomic<bool>& aborted)> await_loop_state;
};

/// Records the first failure and tears down every blocking primitive so all
/// threads of the worker unwind.
class AbortSignal {
 public:
  void fail(const std::string& what) {
    {
      std::lock_guard lock(mu_);
      if (!error_) error_ = what;
    }
    trigger();
  }

  void trigger() {
    if (aborted_.exchange(true)) return;
    std::vector<std::function<void()>> hooks;
    {
      std::lock_guard lock(mu_);
      hooks = hooks_;
    }
    for (auto& h : hooks) h();
  }

  void on_abort(std::function<void()> hook) {
    std::lock_guard lock(mu_);
    hooks_.push_back(std::move(hook));
  }

  bool aborted() const { return aborted_.load(); }
  const std::atomic<bool>& flag() const { return aborted_; }

  std::optional<std::string> error() const {
    std::lock_guard lock(mu_);
    return error_;
  }

 private:
  mutable std::mutex mu_;
  std::atomic<bool> aborted_{false};
  std::optional<std::string> error_;
  std::vector<std::function<void()>> hooks_;
};

struct MuxItem {
  Coord sender;
  std::uint16_t receiver = 0;
  std::uint8_t port = 0;
  std::unique_ptr<AnyBatch> batch;
};

/// Multiplexer: one per (destination host, destination stage). Tasks of this
/// host push batches into its queue; its thread frames them onto one socket.
class MuxEndpoint {
 public:
  MuxEndpoint(TcpLink link, std::size_t channels, std::size_t capacity)
      : link(link), expected_channels(channels), queue(capacity) {}

  TcpLink link;
  std::size_t expected_channels;
  BlockingQueue<MuxItem> queue;
  net::Socket socket;
  std::thread thread;

  void run(JobStats& stats, AbortSignal& abort) {
    try {
      std::size_t done = 0;
      std::vector<std::uint8_t> payload;
      std::vector<std::uint8_t> frame;
      while (done < expected_channels) {
        auto item = queue.pop();
        if (!item) throw JobAborted();
        stats.observe_mux_queue(queue.max_len());
        payload.clear();
        Writer pw(payload);
        pw.integral(item->port);
        item->batch->encode(pw);
        if (payload.size() > wire::kMaxPayload) throw NetError("batch larger than 64 MiB");
        frame.clear();
        Writer fw(frame);
        wire::write_header(fw, wire::FrameHeader{item->sender, item->receiver, static_cast<std::uint32_t>(payload.size())});
        fw.raw(payload.data(), payload.size());
        socket.write_all(frame);
        stats.tcp_bytes_sent.fetch_add(frame.size(), std::memory_order_relaxed);
        stats.tcp_frames_sent.fetch_add(1, std::memory_order_relaxed);
        if (item->batch->ends_with_terminate()) ++done;
      }
      socket.shutdown_write();
    } catch (const JobAborted&) {
      abort.trigger();
    } catch (const std::exception& e) {
      abort.fail("mux to host " + std::to_string(link.dst_host) + " stage " + std::to_string(link.dst_stage) + ": " +
                 e.what());
    }
  }
};

class RemoteOutbox final : public Outbox {
 public:
  RemoteOutbox(MuxEndpoint* mux, Coord sender, std::uint16_t receiver, std::uint8_t port)
      : mux_(mux), sender_(sender), receiver_(receiver), port_(port) {}
  void send(std::unique_ptr<AnyBatch> batch) override {
    mux_->queue.push(MuxItem{sender_, receiver_, port_, std::move(batch)});
  }

 private:
  MuxEndpoint* mux_;
  Coord sender_;
  std::uint16_t receiver_;
  std::uint8_t port_;
};

/// Runs the tasks of one host of an execution plan.
class Worker {
 public:
  Worker(const ExecutionPlan& plan, const std::vector<std::shared_ptr<Node>>& nodes, std::size_t host,
         RunOptions options, JobStats& stats, const std::atomic<bool>& stop)
      : plan_(plan), nodes_(nodes), host_(host), options_(std::move(options)), stats_(stats), stop_(stop) {
    if (host_ >= plan_.topology.hosts.size()) throw BuildError("host index " + std::to_string(host) + " out of range");
  }

  /// Blocks until every local task, mux and demux thread has finished.
  void run() {
    setup_queues();
    std::vector<std::thread> demux_threads;
    std::vector<std::thread> task_threads;
    try {
      setup_demux();
      for (auto& d : demuxes_) demux_threads.emplace_back([this, &d] { run_demux(*d); });
      setup_mux();
      for (auto& m : muxes_) m->thread = std::thread([this, &m] { m->run(stats_, abort_); });
      for (const auto& c : local_tasks_) task_threads.emplace_back([this, c] { run_task(c); });
    } catch (const std::exception& e) {
      abort_.fail(std::string("startup: ") + e.what());
    }
    for (auto& t : task_threads) t.join();
    for (auto& m : muxes_)
      if (m->thread.joinable()) m->thread.join();
    for (auto& t : demux_threads) t.join();
    for (auto& m : muxes_) m->socket.close();
    for (auto& d : demuxes_) {
      d->listener.close();
      for (auto& c : d->conns) c.socket.close();
    }
    if (auto err = abort_.error()) throw JobError(*err);
    if (abort_.aborted()) throw JobError("job aborted");
  }

 private:
  struct LocalTask {
    std::unique_ptr<TaskQueue> queue;
    std::vector<InputChannel> inputs;
  };

  struct Connection {
    net::Socket socket;
    std::vector<std::uint8_t> hello;
    wire::FrameDecoder decoder;
    bool eof = false;
  };

  struct DemuxEndpoint {
    std::size_t stage = 0;
    net::Socket listener;
    std::size_t expected_connections = 0;
    std::size_t expected_channels = 0;
    std::vector<Connection> conns;
  };

  static std::uint64_t task_key(std::size_t stage, std::size_t replica) { return (std::uint64_t(stage) << 32) | replica; }

  void setup_queues() {
    for (const auto& c : plan_.tasks_on(host_)) {
      local_tasks_.push_back(c);
      LocalTask t;
      t.inputs = plan_.input_channels(c.stage, c.replica);
      std::vector<bool> unbounded;
      for (const auto& in : t.inputs) unbounded.push_back(in.feedback);
      t.queue = std::make_unique<TaskQueue>(t.inputs.size(), unbounded);
      tasks_.emplace(task_key(c.stage, c.replica), std::move(t));
    }
    abort_.on_abort([this] {
      for (auto& [k, t] : tasks_) t.queue->close();
      for (auto& m : muxes_) {
        m->queue.close();
        m->socket.shutdown_both();
      }
    });
  }

  void setup_demux() {
    std::map<std::size_t, std::set<std::size_t>> sources;
    for (const auto& l : plan_.links)
      if (l.dst_host == host_) sources[l.dst_stage].insert(l.src_host);
    for (const auto& [stage, hosts] : sources) {
      auto d = std::make_unique<DemuxEndpoint>();
      d->stage = stage;
      d->expected_connections = hosts.size();
      for (const auto& ch : plan_.channels)
        if (ch.medium == Medium::tcp && ch.to.host == host_ && ch.to.stage == stage) ++d->expected_channels;
      const auto& h = plan_.topology.hosts[host_];
      d->listener = net::listen_on(h.address, static_cast<std::uint16_t>(h.base_port + stage));
      demuxes_.push_back(std::move(d));
    }
  }

  void setup_mux() {
    for (const auto& l : plan_.links) {
      if (l.src_host != host_) continue;
      std::size_t channels = 0;
      for (const auto& ch : plan_.channels)
        if (ch.medium == Medium::tcp && ch.from.host == host_ && ch.to.host == l.dst_host && ch.to.stage == l.dst_stage)
          ++channels;
      auto m = std::make_unique<MuxEndpoint>(l, channels, options_.mux_queue_capacity);
      mux_index_[{l.dst_host, l.dst_stage}] = m.get();
      muxes_.push_back(std::move(m));
    }
    for (auto& m : muxes_) {
      const auto& h = plan_.topology.hosts[m->link.dst_host];
      m->socket = net::connect_with_retry(h.address, static_cast<std::uint16_t>(h.base_port + m->link.dst_stage),
                                          options_.connect_retry, [this] { return abort_.aborted(); });
      auto hello = wire::encode_hello(wire::Hello{wire::kMagic, wire::kVersion, static_cast<std::uint16_t>(m->link.dst_stage)});
      m->socket.write_all(hello);
    }
  }

  void run_demux(DemuxEndpoint& d) {
    try {
      std::size_t terminated = 0;
      std::vector<std::uint8_t> buf(1 << 16);
      while (true) {
        std::size_t open = 0;
        for (const auto& c : d.conns) open += c.eof ? 0 : 1;
        bool accepting = d.conns.size() < d.expected_connections;
        if (!accepting && open == 0) break;
        if (abort_.aborted()) throw JobAborted();
        std::vector<pollfd> fds;
        std::vector<Connection*> who;
        if (accepting) {
          fds.push_back({d.listener.fd(), POLLIN, 0});
          who.push_back(nullptr);
        }
        for (auto& c : d.conns) {
          if (c.eof) continue;
          fds.push_back({c.socket.fd(), POLLIN, 0});
          who.push_back(&c);
        }
        int rc = ::poll(fds.data(), fds.size(), 100);
        if (rc < 0) {
          if (errno == EINTR) continue;
          throw NetError("poll failed");
        }
        for (std::size_t i = 0; i < fds.size(); ++i) {
          if (fds[i].revents == 0) continue;
          if (who[i] == nullptr) {
            Connection c;
            c.socket = net::accept_from(d.listener);
            d.conns.push_back(std::move(c));
            // conns may have reallocated; restart the poll round.
            break;
          }
          auto& c = *who[i];
          std::size_t n = c.socket.read_some(buf);
          if (n == 0) {
            if (c.hello.size() < wire::kHelloSize || c.decoder.pending_bytes() != 0)
              throw NetError("connection closed mid-frame");
            c.eof = true;
            continue;
          }
          std::span<const std::uint8_t> bytes(buf.data(), n);
          if (c.hello.size() < wire::kHelloSize) {
            auto take = std::min(wire::kHelloSize - c.hello.size(), bytes.size());
            c.hello.insert(c.hello.end(), bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(take));
            bytes = bytes.subspan(take);
            if (c.hello.size() == wire::kHelloSize)
              wire::validate_hello(wire::decode_hello(c.hello), static_cast<std::uint16_t>(d.stage));
          }
          if (!bytes.empty()) c.decoder.feed(bytes);
          while (auto f = c.decoder.next()) terminated += dispatch(d, std::move(*f)) ? 1 : 0;
        }
      }
      if (terminated != d.expected_channels)
        throw NetError("peer closed with " + std::to_string(d.expected_channels - terminated) +
                       " unterminated channels into stage " + std::to_string(d.stage));
    } catch (const JobAborted&) {
      abort_.trigger();
    } catch (const std::exception& e) {
      abort_.fail("demux for stage " + std::to_string(d.stage) + ": " + e.what());
    }
  }

  /// Decodes one frame and hands the batch to its task; true if it ends a channel.
  bool dispatch(DemuxEndpoint& d, wire::Frame f) {
    const auto& h = f.header;
    auto it = tasks_.find(task_key(d.stage, h.receiver_replica));
    if (it == tasks_.end() || plan_.replica_host[d.stage][h.receiver_replica] != host_)
      throw NetError("frame for replica " + std::to_string(h.receiver_replica) + " not on this host");
    Reader r(f.payload);
    auto port = r.integral<std::uint8_t>();
    std::optional<std::size_t> edge;
    for (std::size_t e = 0; e < plan_.staged.edges.size(); ++e) {
      const auto& se = plan_.staged.edges[e];
      if (se.to_stage == d.stage && se.to_port == port) edge = e;
    }
    if (!edge || plan_.staged.edges[*edge].from_stage != h.sender.stage)
      throw NetError("frame from " + h.sender.str() + " for unknown port " + std::to_string(port));
    const auto& se = plan_.staged.edges[*edge];
    auto batch = nodes_[se.to_op]->ports[port].type->decode(r);
    if (!r.done()) throw DecodeError(r.offset(), "trailing bytes in frame payload");
    bool last = batch->ends_with_terminate();
    auto ch = plan_.channel_index(*edge, h.sender.replica, h.receiver_replica);
    it->second.queue->push(Envelope{ch, std::move(batch)});
    return last;
  }

  /// Control-message bookkeeping of one task's input channels.
  class Inputs final : public InputHandler {
   public:
    Inputs(const std::vector<InputChannel>& chans, const StagedPlan& staged, Collectors& ports, const RunOptions& opts,
           const std::atomic<bool>& aborted)
        : chans_(chans), staged_(staged), ports_(ports), opts_(opts), aborted_(aborted), frontier_(chans.size()), seq_(chans.size(), 0), last_end_(chans.size(), 0) {
      port_channels_.assign(ports.size(), 0);
      port_terminated_.assign(ports.size(), 0);
      port_epoch_.assign(ports.size(), 0);
      for (const auto& c : chans) {
        ++port_channels_[c.port];
        tagged_.push_back(staged.edges[c.edge].tagged);
      }
      live_ = chans.size();
    }

    std::size_t live() const { return live_; }

    /// Batches of a loop iteration wait until every channel of their port
    /// has finished the previous iteration.
    bool ready(std::size_t ch, const AnyBatch& b) const {
      return !tagged_[ch] || b.epoch() <= port_epoch_[chans_[ch].port] + 1;
    }

    void on_batch_header(std::size_t ch, std::uint32_t seq, std::uint32_t epoch) override {
      if (seq != seq_[ch])
        throw InvariantError("channel " + std::to_string(ch) + ": batch sequence " + std::to_string(seq) +
                             ", expected " + std::to_string(seq_[ch]));
      ++seq_[ch];
      std::uint32_t expected = tagged_[ch] ? last_end_[ch] + 1 : 0;
      if (epoch != expected)
        throw InvariantError("channel " + std::to_string(ch) + ": batch of iteration " + std::to_string(epoch) +
                             " arrived during iteration " + std::to_string(expected));
      if (tagged_[ch] && epoch > awaited_ && opts_.await_loop_state) {
        opts_.await_loop_state(staged_.edges[chans_[ch].edge].to_op, epoch, aborted_);
        awaited_ = epoch;
      }
    }

    void on_watermark(std::size_t ch, Timestamp t) override {
      if (auto f = frontier_.observe(ch, t)) ports_[0]->watermark(*f);
    }

    void on_flush() override { ports_[0]->flush(); }

    void on_terminate(std::size_t ch) override {
      --live_;
      auto port = chans_[ch].port;
      auto f = frontier_.close(ch);
      if (f && *f != kMinTime) ports_[0]->watermark(*f);
      if (++port_terminated_[port] == port_channels_[port]) ports_[port]->end();
    }

    void on_iteration_end(std::size_t ch, std::uint32_t e) override {
      if (e != last_end_[ch] + 1)
        throw InvariantError("channel " + std::to_string(ch) + ": iteration end " + std::to_string(e) +
                             " out of order");
      last_end_[ch] = e;
      auto port = chans_[ch].port;
      if (++iter_counts_[{port, e}] == port_channels_[port]) {
        iter_counts_.erase({port, e});
        port_epoch_[port] = e;
        ports_[port]->iteration_end(e);
      }
    }

   private:
    const std::vector<InputChannel>& chans_;
    const StagedPlan& staged_;
    Collectors& ports_;
    const RunOptions& opts_;
    const std::atomic<bool>& aborted_;
    std::uint32_t awaited_ = 1;
    WatermarkFrontier frontier_;
    std::vector<std::uint32_t> seq_;
    std::vector<std::uint32_t> last_end_;
    std::vector<bool> tagged_;
    std::vector<std::size_t> port_channels_;
    std::vector<std::size_t> port_terminated_;
    std::vector<std::uint32_t> port_epoch_;
    std::map<std::pair<std::size_t, std::uint32_t>, std::size_t> iter_counts_;
    std::size_t live_ = 0;
  };

  std::shared_ptr<Outbox> outbox_for(std::size_t edge, const Coord& sender, std::size_t receiver) {
    const auto& se = plan_.staged.edges[edge];
    auto dst_host = plan_.replica_host[se.to_stage][receiver];
    if (dst_host == host_) {
      auto& t = tasks_.at(task_key(se.to_stage, receiver));
      return std::make_shared<InMemoryOutbox>(t.queue.get(), plan_.channel_index(edge, sender.replica, receiver));
    }
    if (se.to_port > 0xff) throw BuildError("operator has too many input ports");
    return std::make_shared<RemoteOutbox>(mux_index_.at({dst_host, se.to_stage}), sender,
                                          static_cast<std::uint16_t>(receiver), static_cast<std::uint8_t>(se.to_port));
  }

  /// Instantiates the fused operator chain of a task, last operator first.
  Collectors build_chain(TaskEnv& env, const Stage& stage) {
    const auto& ops = stage.ops;
    Collectors downstream;
    for (std::size_t i = ops.size(); i-- > 0;) {
      const auto& node = *nodes_[ops[i]];
      Collectors outs(node.desc.slots);
      if (i + 1 < ops.size()) {
        auto next_port = nodes_[ops[i + 1]]->desc.inputs[0];
        outs[next_port.slot] = downstream[0];
      } else {
        for (std::size_t e = 0; e < plan_.staged.edges.size(); ++e) {
          const auto& se = plan_.staged.edges[e];
          if (se.from_stage != stage.id || se.from_op != node.desc.id) continue;
          RouterSpec spec;
          spec.kind = plan_.edge_kind[e];
          spec.env = &env;
          spec.sender_replica = env.replica;
          spec.initial_epoch = se.tagged ? 1 : 0;
          if (spec.kind == EdgeKind::one_to_one) {
            spec.dests.push_back(outbox_for(e, env.coord, env.replica));
          } else {
            for (std::size_t r = 0; r < plan_.replicas(se.to_stage); ++r) spec.dests.push_back(outbox_for(e, env.coord, r));
          }
          outs[se.from_slot] = nodes_[se.to_op]->ports[se.to_port].make_router(std::move(spec));
        }
      }
      for (std::size_t s = 0; s < outs.size(); ++s)
        if (!outs[s]) throw InvariantError("operator " + std::to_string(node.desc.id) + " output " + std::to_string(s) + " unwired");
      downstream = node.build(env, outs);
    }
    return downstream;
  }

  void run_task(Coord c) {
    try {
      const auto& stage = plan_.staged.stages[c.stage];
      TaskEnv env;
      env.coord = c;
      env.replica = c.replica;
      env.replicas = plan_.replicas(c.stage);
      env.batching = options_.batching;
      env.stats = &stats_;
      env.stop_requested = &stop_;
      env.aborted = &abort_.flag();
      env.plan = &plan_;
      auto ports = build_chain(env, stage);
      const auto& first = *nodes_[stage.ops.front()];
      if (first.run) {
        first.run(env, ports);
        return;
      }
      auto& task = tasks_.at(task_key(c.stage, c.replica));
      if (ports.size() != first.ports.size()) throw InvariantError("port count mismatch");
      Inputs inputs(task.inputs, plan_.staged, ports, options_, abort_.flag());
      std::vector<std::deque<std::unique_ptr<AnyBatch>>> deferred(task.inputs.size());
      std::size_t deferred_count = 0;
      auto deliver = [&](std::size_t ch, AnyBatch& batch) {
        const auto& in = task.inputs[ch];
        auto n = first.ports[in.port].type->deliver(batch, *ports[in.port], ch, inputs);
        stats_.items_received.fetch_add(n, std::memory_order_relaxed);
      };
      auto drain_deferred = [&] {
        bool progress = true;
        while (progress && deferred_count > 0) {
          progress = false;
          for (std::size_t ch = 0; ch < deferred.size(); ++ch) {
            while (!deferred[ch].empty() && inputs.ready(ch, *deferred[ch].front())) {
              auto batch = std::move(deferred[ch].front());
              deferred[ch].pop_front();
              --deferred_count;
              deliver(ch, *batch);
              progress = true;
            }
          }
        }
      };
      auto last_tick = Clock::now();
      while (inputs.live() > 0) {
        auto deadline = env.next_deadline();
        if (!env.tickers.empty()) {
          auto tick_at = last_tick + kIdleTick;
          if (!deadline || tick_at < *deadline) deadline = tick_at;
        }
        auto envelope = task.queue->pop_until(deadline);
        if (envelope) {
          auto ch = envelope->channel;
          if (!deferred[ch].empty() || !inputs.ready(ch, *envelope->batch)) {
            deferred[ch].push_back(std::move(envelope->batch));
            ++deferred_count;
          } else {
            deliver(ch, *envelope->batch);
            drain_deferred();
          }
        }
        auto now = Clock::now();
        if (!env.tickers.empty() && now - last_tick >= kIdleTick) last_tick = now;
        else if (auto d = env.next_deadline(); !d || *d > now) continue;
        env.poll_timers(now);
      }
    } catch (const JobAborted&) {
      abort_.trigger();
    } catch (const std::exception& e) {
      abort_.fail("task " + c.str() + ": " + e.what());
    }
  }

  const ExecutionPlan& plan_;
  const std::vector<std::shared_ptr<Node>>& nodes_;
  std::size_t host_;
  RunOptions options_;
  JobStats& stats_;
  const std::atomic<bool>& stop_;
  AbortSignal abort_;
  std::vector<Coord> local_tasks_;
  std::map<std::uint64_t, LocalTask> tasks_;
  std::vector<std::unique_ptr<MuxEndpoint>> muxes_;
  std::map<std::pair<std::size_t, std::size_t>, MuxEndpoint*> mux_index_;
  std::vector<std::unique_ptr<DemuxEndpoint>> demuxes_;
};

}  // namespace flow
