#pragma once

#include <deque>
#include <iostream>
#include <map>
#include <optional>
#include <stdexcept>
#include <vector>

#include "dualnet/model.hpp"
#include "dualnet/rng.hpp"
#include "dualnet/tensor.hpp"

namespace dualnet {

inline constexpr int kUnlabeled = -1;

struct MemoryEntry {
  Tensor input;  ///< one sample, CHW
  int label = kUnlabeled;
  std::optional<std::vector<Scalar>> soft_logits;
  std::optional<std::size_t> task_id;
};

enum class MemoryPolicy { ring, reservoir };

/// Bounded replay store. Ring: one FIFO segment of `capacity` entries per
/// task. Reservoir: one buffer of `capacity` entries with classic reservoir
/// replacement.
class EpisodicMemory {
 public:
  EpisodicMemory(MemoryPolicy policy, std::size_t capacity) : policy_(policy), capacity_(capacity) {}

  MemoryPolicy policy() const { return policy_; }
  std::size_t capacity() const { return capacity_; }
  std::size_t seen() const { return seen_; }

  std::size_t size() const {
    if (policy_ == MemoryPolicy::reservoir) return buffer_.size();
    std::size_t n = 0;
    for (const auto& [task, seg] : segments_) n += seg.size();
    return n;
  }
  bool empty() const { return size() == 0; }

  /// Returns the reservoir slot the entry landed in, if it was kept (ring
  /// memory always returns nullopt).
  std::optional<std::size_t> insert(MemoryEntry entry, Rng& rng) {
    if (policy_ == MemoryPolicy::ring) {
      if (!entry.task_id) throw std::invalid_argument("ring memory insert requires a task id");
      ++seen_;
      if (capacity_ == 0) return std::nullopt;
      auto& seg = segments_[*entry.task_id];
      if (seg.size() == capacity_) seg.pop_front();
      seg.push_back(std::move(entry));
      return std::nullopt;
    }
    ++seen_;
    if (capacity_ == 0) return std::nullopt;
    if (buffer_.size() < capacity_) {
      buffer_.push_back(std::move(entry));
      return buffer_.size() - 1;
    }
    // Keep with probability capacity / seen by drawing a slot in [0, seen).
    const std::size_t slot = rng.index(seen_);
    if (slot >= capacity_) return std::nullopt;
    buffer_[slot] = std::move(entry);
    return slot;
  }

  /// Reservoir slot access.
  MemoryEntry& slot(std::size_t i) { return buffer_.at(i); }

  /// Uniform sample without replacement (all entries if fewer than
  /// `batch_size`). With `before_task`, ring memory only draws from segments
  /// of tasks < before_task.
  std::vector<MemoryEntry> sample(std::size_t batch_size, Rng& rng,
                                  std::optional<std::size_t> before_task = std::nullopt) const {
    std::vector<const MemoryEntry*> pool = entries(before_task);
    std::vector<MemoryEntry> out;
    if (pool.empty() || batch_size == 0) return out;
    const std::size_t take = std::min(batch_size, pool.size());
    for (std::size_t i = 0; i < take; ++i) {
      const std::size_t j = i + rng.index(pool.size() - i);
      std::swap(pool[i], pool[j]);
      out.push_back(*pool[i]);
    }
    return out;
  }

  std::vector<const MemoryEntry*> entries(std::optional<std::size_t> before_task = std::nullopt) const {
    std::vector<const MemoryEntry*> pool;
    if (policy_ == MemoryPolicy::reservoir) {
      for (const auto& e : buffer_) {
        if (!before_task || (e.task_id && *e.task_id < *before_task)) pool.push_back(&e);
      }
    } else {
      for (const auto& [task, seg] : segments_) {
        if (before_task && task >= *before_task) continue;
        for (const auto& e : seg) pool.push_back(&e);
      }
    }
    return pool;
  }

  /// Mutable access to one task's entries (ring) or all entries (reservoir).
  template <typename Fn>
  void for_each_in_task(std::size_t task, Fn&& fn) {
    if (policy_ == MemoryPolicy::ring) {
      auto it = segments_.find(task);
      if (it == segments_.end()) return;
      for (auto& e : it->second) fn(e);
    } else {
      for (auto& e : buffer_)
        if (e.task_id == task) fn(e);
    }
  }

  std::size_t segment_size(std::size_t task) const {
    auto it = segments_.find(task);
    return it == segments_.end() ? 0 : it->second.size();
  }

  /// Scalars held: inputs, stored logits, plus label and task id per entry.
  std::size_t stored_scalars() const {
    std::size_t n = 0;
    for (const auto* e : entries()) n += e->input.size() + (e->soft_logits ? e->soft_logits->size() : 0) + 2;
    return n;
  }

 private:
  MemoryPolicy policy_;
  std::size_t capacity_;
  std::size_t seen_ = 0;
  std::vector<MemoryEntry> buffer_;
  std::map<std::size_t, std::deque<MemoryEntry>> segments_;
};

/// Stacks the inputs of a list of entries into one NCHW batch.
inline Tensor stack_inputs(const std::vector<MemoryEntry>& entries) {
  if (entries.empty()) return {};
  Shape shape = entries.front().input.shape();
  shape.insert(shape.begin(), entries.size());
  Tensor out(shape);
  const std::size_t stride = entries.front().input.size();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    require_same_shape(entries[i].input, entries.front().input, "stack_inputs");
    std::copy(entries[i].input.storage().begin(), entries[i].input.storage().end(), out.data() + i * stride);
  }
  return out;
}

/// End-of-task soft-label refresh for task-aware runs: every stored entry of
/// `task` gets the model's current eval-mode logits on its head. Returns
/// false (and does nothing) for task-free models, whose logits are stored
/// at insertion time.
inline bool snapshot_soft_labels(EpisodicMemory& memory, DualNetModel& model, std::size_t task) {
  if (!model.registry().task_aware()) {
    std::cerr << "warning: snapshot_soft_labels is a no-op in task-free mode\n";
    return false;
  }
  std::vector<MemoryEntry*> items;
  memory.for_each_in_task(task, [&](MemoryEntry& e) { items.push_back(&e); });
  if (items.empty()) return true;
  std::vector<MemoryEntry> copies;
  for (auto* e : items) copies.push_back(*e);
  const Tensor logits = model.predict(stack_inputs(copies), task);
  const std::size_t k = logits.dim(1);
  for (std::size_t i = 0; i < items.size(); ++i) {
    items[i]->soft_logits = std::vector<Scalar>(logits.data() + i * k, logits.data() + (i + 1) * k);
  }
  return true;
}

}  // namespace dualnet
