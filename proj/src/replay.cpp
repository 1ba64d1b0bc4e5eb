#include "piqt/replay.hpp"

#include <utility>

namespace piqt {

ReplayShard::ReplayShard(std::size_t capacity) : capacity_(capacity) {
  if (capacity_ < 1) throw ConfigError("replay shard capacity must be >= 1");
  ring_.resize(capacity_);
}

void ReplayShard::insert(Transition t) {
  std::lock_guard<std::mutex> lock(mu_);
  if (count_ == capacity_) {  // overwrite the oldest
    ring_[start_] = std::move(t);
    start_ = (start_ + 1) % capacity_;
    ++evicted_;
  } else {
    ring_[(start_ + count_) % capacity_] = std::move(t);
    ++count_;
  }
  ++inserted_;
}

bool ReplayShard::try_sample(std::mt19937_64 &rng, Transition &out) {
  std::lock_guard<std::mutex> lock(mu_);
  if (count_ == 0) return false;
  // Index by age so a restored shard samples identically to the original.
  const auto idx = std::uniform_int_distribution<std::size_t>(0, count_ - 1)(rng);
  out = ring_[(start_ + idx) % capacity_];
  ++sampled_;
  return true;
}

std::size_t ReplayShard::size() const {
  std::lock_guard<std::mutex> lock(mu_);
  return count_;
}
std::uint64_t ReplayShard::inserted() const {
  std::lock_guard<std::mutex> lock(mu_);
  return inserted_;
}
std::uint64_t ReplayShard::evicted() const {
  std::lock_guard<std::mutex> lock(mu_);
  return evicted_;
}
std::uint64_t ReplayShard::sampled() const {
  std::lock_guard<std::mutex> lock(mu_);
  return sampled_;
}

std::vector<Transition> ReplayShard::snapshot() const {
  std::lock_guard<std::mutex> lock(mu_);
  std::vector<Transition> out;
  out.reserve(count_);
  for (std::size_t i = 0; i < count_; ++i) out.push_back(ring_[(start_ + i) % capacity_]);
  return out;
}

void ReplayShard::restore(std::vector<Transition> contents, std::uint64_t inserted,
                          std::uint64_t evicted, std::uint64_t sampled) {
  std::lock_guard<std::mutex> lock(mu_);
  if (contents.size() > capacity_)
    throw CheckpointError("replay snapshot larger than the shard capacity");
  start_ = 0;
  count_ = contents.size();
  for (std::size_t i = 0; i < count_; ++i) ring_[i] = std::move(contents[i]);
  inserted_ = inserted;
  evicted_ = evicted;
  sampled_ = sampled;
}

TrainBuffer::TrainBuffer(std::size_t capacity) : capacity_(capacity) {
  if (capacity_ < 1) throw ConfigError("train buffer capacity must be >= 1");
}

bool TrainBuffer::push(LabeledSample sample) {
  std::unique_lock<std::mutex> lock(mu_);
  not_full_.wait(lock, [&] { return closed_ || queue_.size() < capacity_; });
  if (closed_) return false;
  queue_.push_back(std::move(sample));
  lock.unlock();
  not_empty_.notify_one();
  return true;
}

bool TrainBuffer::pop(LabeledSample &out) {
  std::unique_lock<std::mutex> lock(mu_);
  not_empty_.wait(lock, [&] { return closed_ || !queue_.empty(); });
  if (queue_.empty()) return false;  // closed and drained
  out = std::move(queue_.front());
  queue_.pop_front();
  lock.unlock();
  not_full_.notify_one();
  return true;
}

void TrainBuffer::close() {
  {
    std::lock_guard<std::mutex> lock(mu_);
    closed_ = true;
  }
  not_full_.notify_all();
  not_empty_.notify_all();
}

std::size_t TrainBuffer::size() const {
  std::lock_guard<std::mutex> lock(mu_);
  return queue_.size();
}

bool TrainBuffer::closed() const {
  std::lock_guard<std::mutex> lock(mu_);
  return closed_;
}

}  // namespace piqt
