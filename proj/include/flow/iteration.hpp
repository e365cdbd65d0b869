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
#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <memory>
#include <mutex>
#include <utility>
#include <vector>

#include "flow/codec.hpp"
#include "flow/node.hpp"
#include "flow/ops.hpp"

namespace flow {

/// Decision broadcast by the leader at the end of iteration `iteration`.
template <class S>
struct LoopControl {
  std::uint32_t iteration = 0;
  bool proceed = false;
  S state{};

  FLOW_FIELDS(iteration, proceed, state)
  bool operator==(const LoopControl&) const = default;
};

/// Loop state as seen by body closures in this process. Updated by the first
/// head replica that learns the new state. Tasks wait for the version of an
/// iteration before processing its batches, so reads need no lock.
template <class S>
class IterationState {
 public:
  explicit IterationState(S init) : init_(init), value_(std::move(init)) {}

  const S& get() const { return value_; }
  std::uint32_t iteration() const { return version_; }

  void publish(std::uint32_t iteration, const S& s) {
    {
      std::lock_guard lock(mu_);
      if (iteration <= version_) return;
      value_ = s;
      version_ = iteration;
    }
    cv_.notify_all();
  }

  /// The loop stopped; no further versions will be published.
  void close() {
    {
      std::lock_guard lock(mu_);
      closed_ = true;
    }
    cv_.notify_all();
  }

  /// Blocks until the state of `iteration` has been published here.
  void wait_for(std::uint32_t iteration, const std::atomic<bool>& aborted) {
    std::unique_lock lock(mu_);
    while (version_ < iteration && !closed_) {
      if (aborted.load()) throw JobAborted();
      cv_.wait_for(lock, std::chrono::milliseconds(50));
    }
  }

  void reset() {
    std::lock_guard lock(mu_);
    value_ = init_;
    version_ = 1;
    closed_ = false;
  }

 private:
  std::mutex mu_;
  std::condition_variable cv_;
  S init_;
  S value_;
  std::uint32_t version_ = 1;
  bool closed_ = false;
};

/// Read-only handle to the loop state given to the body.
template <class S>
class StateRef {
 public:
  explicit StateRef(std::shared_ptr<IterationState<S>> cell) : cell_(std::move(cell)) {}
  const S& get() const { return cell_->get(); }
  const S& operator*() const { return get(); }
  const S* operator->() const { return &get(); }
  std::uint32_t iteration() const { return cell_->iteration(); }

 private:
  std::shared_ptr<IterationState<S>> cell_;
};

/// Folds the per-replica deltas of one iteration into `state` in ascending
/// replica order and decides whether the loop continues.
template <class S, class D, class G, class P>
LoopControl<S> leader_step(std::vector<std::pair<std::uint32_t, D>>& deltas, S& state, G& global_fold, P& pred,
                           std::uint32_t iteration, std::uint32_t max_iters, std::size_t expected_deltas) {
  if (deltas.size() != expected_deltas)
    throw InvariantError("iteration " + std::to_string(iteration) + ": expected " + std::to_string(expected_deltas) +
                         " deltas, got " + std::to_string(deltas.size()));
  std::sort(deltas.begin(), deltas.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  for (std::size_t i = 1; i < deltas.size(); ++i)
    if (deltas[i].first == deltas[i - 1].first) throw InvariantError("duplicate delta from one replica");
  for (auto& [replica, d] : deltas) global_fold(state, std::move(d));
  deltas.clear();
  bool keep_going = static_cast<bool>(pred(state));
  return LoopControl<S>{iteration, keep_going && iteration < max_iters, state};
}

/// Loop entry. Port 0 is the loop input (fully buffered before iteration 1),
/// port 1 the leader's control, port 2 the fed-back items (iterate only).
/// Slot 0 feeds the body, slot 1 carries the last iteration's output (iterate only).
template <class T, class S, bool Replay>
class HeadOp final {
 public:
  HeadOp(std::size_t id, std::shared_ptr<IterationState<S>> cell, CollectorPtr<T> body, CollectorPtr<T> exit)
      : id_(id), cell_(std::move(cell)), body_(std::move(body)), exit_(std::move(exit)) {}

  template <std::size_t P>
  void on_item(std::conditional_t<P == 1, LoopControl<S>, T>&& x, MaybeTime) {
    if constexpr (P == 0) {
      input_.push_back(std::move(x));
    } else if constexpr (P == 1) {
      if (x.iteration != iteration_)
        throw InvariantError("loop control for iteration " + std::to_string(x.iteration) + " during iteration " +
                             std::to_string(iteration_));
      control_ = std::move(x);
      try_advance();
    } else if (feedback_done_ == iteration_) {
      // Output of the next iteration, produced by heads that already advanced.
      later_.push_back(std::move(x));
    } else {
      next_.push_back(std::move(x));
    }
  }

  void on_watermark(Timestamp) {}
  void on_flush() {}

  void on_iteration_end(std::size_t port, std::uint32_t e) {
    if (port != 2) return;
    if (e != iteration_)
      throw InvariantError("feedback for iteration " + std::to_string(e) + " during iteration " + std::to_string(iteration_));
    feedback_done_ = e;
    try_advance();
  }

  void on_end(std::size_t port) {
    if (port == 0) {
      input_done_ = true;
      iteration_ = 1;
      run_iteration();
    }
  }

 private:
  void run_iteration() {
    if constexpr (Replay) {
      for (const auto& x : input_) body_->push(T(x), std::nullopt);
    } else {
      auto items = iteration_ == 1 ? std::move(input_) : std::move(next_);
      input_.clear();
      next_ = std::move(later_);
      later_.clear();
      for (auto& x : items) body_->push(std::move(x), std::nullopt);
    }
    body_->iteration_end(iteration_);
  }

  void try_advance() {
    if (!control_ || stopped_) return;
    if constexpr (!Replay) {
      if (feedback_done_ != iteration_) return;
    }
    LoopControl<S> ctl = std::move(*control_);
    control_.reset();
    if (ctl.proceed) {
      cell_->publish(iteration_ + 1, ctl.state);
      ++iteration_;
      run_iteration();
      return;
    }
    stopped_ = true;
    cell_->close();
    if constexpr (!Replay) {
      for (auto& x : next_) exit_->push(std::move(x), std::nullopt);
      next_.clear();
      exit_->end();
    }
    body_->end();
  }

  std::size_t id_;
  std::shared_ptr<IterationState<S>> cell_;
  CollectorPtr<T> body_;
  CollectorPtr<T> exit_;
  std::vector<T> input_;
  std::vector<T> next_;
  std::vector<T> later_;
  std::optional<LoopControl<S>> control_;
  std::uint32_t iteration_ = 0;
  std::uint32_t feedback_done_ = 0;
  bool input_done_ = false;
  bool stopped_ = false;
};

/// Loop exit inside the last body stage: folds this replica's items into one
/// delta per iteration and, for iterate, feeds the items back to the head.
template <class T, class D, class LocalFold, bool Replay>
class TailOp final : public Collector<T> {
 public:
  TailOp(std::size_t id, std::uint32_t replica, LocalFold f, CollectorPtr<std::pair<std::uint32_t, D>> deltas,
         CollectorPtr<T> feedback)
      : id_(id), replica_(replica), f_(std::move(f)), deltas_(std::move(deltas)), feedback_(std::move(feedback)) {}

  void push(T&& x, MaybeTime) override {
    if constexpr (Replay) {
      guarded(id_, [&] { f_(delta_, std::move(x)); });
    } else {
      guarded(id_, [&] { f_(delta_, std::as_const(x)); });
      feedback_->push(std::move(x), std::nullopt);
    }
  }
  void watermark(Timestamp) override {}
  void flush() override {}
  void iteration_end(std::uint32_t e) override {
    deltas_->push(std::pair<std::uint32_t, D>(replica_, std::exchange(delta_, D{})), std::nullopt);
    deltas_->iteration_end(e);
    if constexpr (!Replay) feedback_->iteration_end(e);
  }
  void end() override {
    deltas_->end();
    if constexpr (!Replay) feedback_->end();
  }

 private:
  std::size_t id_;
  std::uint32_t replica_;
  LocalFold f_;
  D delta_{};
  CollectorPtr<std::pair<std::uint32_t, D>> deltas_;
  CollectorPtr<T> feedback_;
};

/// Single-replica loop coordinator. Slot 0 emits the final state once, slot 1
/// broadcasts LoopControl to every head replica.
template <class S, class D, class G, class P>
class LeaderOp final : public Collector<std::pair<std::uint32_t, D>> {
 public:
  LeaderOp(std::size_t id, S init, G global_fold, P pred, std::uint32_t max_iters, std::size_t tail_replicas,
           JobStats* stats, CollectorPtr<S> state_out, CollectorPtr<LoopControl<S>> control)
      : id_(id),
        state_(std::move(init)),
        g_(std::move(global_fold)),
        pred_(std::move(pred)),
        max_iters_(max_iters),
        tail_replicas_(tail_replicas),
        stats_(stats),
        state_out_(std::move(state_out)),
        control_(std::move(control)),
        started_(Clock::now()) {}

  void push(std::pair<std::uint32_t, D>&& x, MaybeTime) override { deltas_.push_back(std::move(x)); }
  void watermark(Timestamp) override {}
  void flush() override {}

  void iteration_end(std::uint32_t e) override {
    if (stopped_) throw InvariantError("iteration end after loop stop");
    auto ctl = guarded(id_, [&] { return leader_step(deltas_, state_, g_, pred_, e, max_iters_, tail_replicas_); });
    auto now = Clock::now();
    stats_->record_iteration(std::chrono::duration<double, std::milli>(now - started_).count());
    started_ = now;
    bool proceed = ctl.proceed;
    control_->push(std::move(ctl), std::nullopt);
    control_->flush();
    if (!proceed) {
      stopped_ = true;
      state_out_->push(S(state_), std::nullopt);
    }
  }

  void end() override {
    if (!stopped_) state_out_->push(S(state_), std::nullopt);
    state_out_->end();
    control_->end();
  }

 private:
  std::size_t id_;
  S state_;
  G g_;
  P pred_;
  std::uint32_t max_iters_;
  std::size_t tail_replicas_;
  JobStats* stats_;
  CollectorPtr<S> state_out_;
  CollectorPtr<LoopControl<S>> control_;
  std::vector<std::pair<std::uint32_t, D>> deltas_;
  Clock::time_point started_;
  bool stopped_ = false;
};

}  // namespace flow
