#pragma once

#include <cstdint>
#include <list>
#include <optional>
#include <unordered_map>
#include <utility>
#include <vector>

namespace specderef {

// Branch-site -> predicted-target map with true LRU eviction. Prediction does
// not mutate recency; only training does.
class BranchTargetBuffer {
 public:
  explicit BranchTargetBuffer(std::size_t capacity = 512);

  void train(std::uint64_t site, std::uint64_t target);
  std::optional<std::uint64_t> predict(std::uint64_t site) const;

  std::size_t size() const { return entries_.size(); }
  std::size_t capacity() const { return capacity_; }

  // (site, target) pairs in MRU-first order.
  std::vector<std::pair<std::uint64_t, std::uint64_t>> canonical_dump() const;

 private:
  std::size_t capacity_;
  std::list<std::pair<std::uint64_t, std::uint64_t>> entries_;  // front = MRU
  std::unordered_map<std::uint64_t, std::list<std::pair<std::uint64_t, std::uint64_t>>::iterator>
      index_;
};

}  // namespace specderef
