#include "specderef/btb.hpp"

#include "specderef/errors.hpp"

namespace specderef {

BranchTargetBuffer::BranchTargetBuffer(std::size_t capacity) : capacity_(capacity) {
  if (capacity_ == 0) {
    throw ConfigError("btb: capacity must be positive");
  }
}

void BranchTargetBuffer::train(std::uint64_t site, std::uint64_t target) {
  if (auto it = index_.find(site); it != index_.end()) {
    it->second->second = target;
    entries_.splice(entries_.begin(), entries_, it->second);
    return;
  }
  entries_.emplace_front(site, target);
  index_[site] = entries_.begin();
  if (entries_.size() > capacity_) {
    index_.erase(entries_.back().first);
    entries_.pop_back();
  }
}

std::optional<std::uint64_t> BranchTargetBuffer::predict(std::uint64_t site) const {
  if (const auto it = index_.find(site); it != index_.end()) {
    return it->second->second;
  }
  return std::nullopt;
}

std::vector<std::pair<std::uint64_t, std::uint64_t>> BranchTargetBuffer::canonical_dump() const {
  return {entries_.begin(), entries_.end()};
}

}  // namespace specderef
