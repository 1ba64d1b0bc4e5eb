#pragma once

#include "piqt/qtopt.hpp"
#include "piqt/types.hpp"

#include <condition_variable>
#include <cstdint>
#include <deque>
#include <mutex>
#include <random>
#include <vector>

namespace piqt {

// ---------------------------------------------------------------------------
// One replay shard: a bounded ring of transitions with uniform sampling.
// Oldest entries are evicted first. Thread-safe; every counter is conserved
// (inserted == resident + evicted at all times).
// ---------------------------------------------------------------------------

class ReplayShard {
 public:
  explicit ReplayShard(std::size_t capacity);

  void insert(Transition t);
  // Uniform over current contents; false when the shard is empty.
  bool try_sample(std::mt19937_64 &rng, Transition &out);

  std::size_t capacity() const { return capacity_; }
  std::size_t size() const;
  std::uint64_t inserted() const;
  std::uint64_t evicted() const;
  std::uint64_t sampled() const;

  // Oldest-first snapshot / rebuild, for checkpointing. Restoring replays the
  // logical state exactly: contents in age order plus the lifetime counters.
  std::vector<Transition> snapshot() const;
  void restore(std::vector<Transition> contents, std::uint64_t inserted, std::uint64_t evicted,
               std::uint64_t sampled);

 private:
  mutable std::mutex mu_;
  std::size_t capacity_;
  std::vector<Transition> ring_;
  std::size_t start_ = 0;  // index of the oldest element
  std::size_t count_ = 0;
  std::uint64_t inserted_ = 0;
  std::uint64_t evicted_ = 0;
  std::uint64_t sampled_ = 0;
};

// ---------------------------------------------------------------------------
// The updater -> learner queue. Bounded FIFO; producers block when it is
// full (backpressure, nothing is ever dropped), consumers block when it is
// empty. close() wakes everyone: pushes start failing, pops drain what is
// left and then fail.
// ---------------------------------------------------------------------------

class TrainBuffer {
 public:
  explicit TrainBuffer(std::size_t capacity);

  bool push(LabeledSample sample);  // false once closed
  bool pop(LabeledSample &out);     // false once closed and drained
  void close();

  std::size_t size() const;
  std::size_t capacity() const { return capacity_; }
  bool closed() const;

 private:
  mutable std::mutex mu_;
  std::condition_variable not_full_;
  std::condition_variable not_empty_;
  std::deque<LabeledSample> queue_;
  std::size_t capacity_;
  bool closed_ = false;
};

}  // namespace piqt
