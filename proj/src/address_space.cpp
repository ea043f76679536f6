#include "specderef/address_space.hpp"

#include <algorithm>
#include <stdexcept>
#include <vector>

#include "specderef/errors.hpp"

namespace specderef {

namespace {

// Highest exclusive user-half page: canonical user addresses end at 2^47.
constexpr std::uint64_t kUserHalfEndPage = (std::uint64_t{1} << 47) / kPageSize;

}  // namespace

std::string_view to_string(FaultKind kind) {
  switch (kind) {
    case FaultKind::NotPresent: return "not-present";
    case FaultKind::UserAccessToKernel: return "user-access-to-kernel";
    case FaultKind::SmapViolation: return "smap-violation";
    case FaultKind::NonCanonical: return "non-canonical";
  }
  return "unknown";
}

AddressSpace::AddressSpace(std::uint64_t physical_memory_size, VirtualAddress dpm_base,
                           bool kaiser_enabled)
    : physical_memory_size_(physical_memory_size),
      dpm_base_(dpm_base),
      kaiser_enabled_(kaiser_enabled) {
  if (physical_memory_size_ == 0 || physical_memory_size_ % kPageSize != 0) {
    throw ConfigError("physical memory size must be a positive multiple of the page size");
  }
  if (!is_canonical(dpm_base_) || !is_kernel_half(dpm_base_) || !is_page_aligned(dpm_base_)) {
    throw ConfigError("dpm_base must be a page-aligned canonical kernel-half address");
  }
  if (dpm_base_.value + physical_memory_size_ < dpm_base_.value) {
    throw ConfigError("direct-physical map wraps the address space");
  }
}

bool AddressSpace::in_dpm(VirtualAddress v) const {
  return v.value >= dpm_base_.value && v.value - dpm_base_.value < physical_memory_size_;
}

TranslateResult AddressSpace::translate(VirtualAddress v, Mode mode, bool smap) const {
  if (!is_canonical(v)) {
    return Fault{FaultKind::NonCanonical};
  }
  if (mode == Mode::User && is_kernel_half(v)) {
    // Kernel-half pages are never reachable from user mode. With KAISER the
    // mapping is absent from the user view, without it the permission check
    // fails; either way the fault is the same and the kernel-mode view below
    // is untouched, which is exactly why KAISER does not affect the leak.
    return Fault{FaultKind::UserAccessToKernel};
  }
  if (mode == Mode::Kernel && in_dpm(v)) {
    return PhysicalAddress{v.value - dpm_base_.value};
  }
  const auto entry = lookup(virtual_page(v));
  if (!entry || !entry->present) {
    return Fault{FaultKind::NotPresent};
  }
  if (mode == Mode::User && !entry->user_accessible) {
    return Fault{FaultKind::UserAccessToKernel};
  }
  if (mode == Mode::Kernel && smap && entry->user_accessible) {
    return Fault{FaultKind::SmapViolation};
  }
  return PhysicalAddress{entry->frame * kPageSize + page_offset(v)};
}

VirtualAddress AddressSpace::dpm_address(PhysicalAddress p) const {
  if (p.value >= physical_memory_size_) {
    throw std::out_of_range("physical address beyond configured memory");
  }
  return VirtualAddress{dpm_base_.value + p.value};
}

void AddressSpace::map_page(VirtualAddress v, PhysicalAddress p, bool user_accessible) {
  if (!is_canonical(v)) {
    throw ConfigError("map_page: non-canonical virtual address");
  }
  if (!is_page_aligned(v)) {
    throw ConfigError("map_page: virtual address not page-aligned");
  }
  if (p.value >= physical_memory_size_) {
    throw ConfigError("map_page: physical address beyond configured memory");
  }
  pages_[virtual_page(v)] = PageEntry{frame_index(p), user_accessible, true};
}

void AddressSpace::map_shared_range(VirtualAddress start, std::uint64_t page_count,
                                    PhysicalAddress p1, PhysicalAddress p2) {
  if (page_count == 0 || page_count % 2 != 0) {
    throw ConfigError("map_shared_range: page count must be positive and even");
  }
  if (!is_canonical(start) || is_kernel_half(start) || !is_page_aligned(start)) {
    throw ConfigError("map_shared_range: start must be a page-aligned user-half address");
  }
  const std::uint64_t first_page = virtual_page(start);
  if (page_count > kUserHalfEndPage - first_page) {
    throw ConfigError("map_shared_range: range exceeds the user half");
  }
  if (p1.value >= physical_memory_size_ || p2.value >= physical_memory_size_) {
    throw ConfigError("map_shared_range: physical address beyond configured memory");
  }
  erase_span(first_page, page_count);
  const std::uint64_t half = page_count / 2;
  insert_range(first_page, half, frame_index(p1), true);
  insert_range(first_page + half, half, frame_index(p2), true);
}

void AddressSpace::unmap_range(VirtualAddress start, std::uint64_t page_count) {
  if (!is_page_aligned(start)) {
    throw ConfigError("unmap_range: start not page-aligned");
  }
  erase_span(virtual_page(start), page_count);
}

void AddressSpace::erase_span(std::uint64_t first_page, std::uint64_t page_count) {
  const std::uint64_t end_page = first_page + page_count;
  for (auto it = pages_.begin(); it != pages_.end();) {
    if (it->first >= first_page && it->first < end_page) {
      it = pages_.erase(it);
    } else {
      ++it;
    }
  }
  // Trim or split every range overlapping [first_page, end_page).
  std::vector<RangeEntry> keep;
  auto it = ranges_.lower_bound(first_page);
  if (it != ranges_.begin()) {
    --it;
  }
  while (it != ranges_.end() && it->first < end_page) {
    const RangeEntry r = it->second;
    const std::uint64_t r_end = r.first_page + r.page_count;
    if (r_end <= first_page) {
      ++it;
      continue;
    }
    it = ranges_.erase(it);
    if (r.first_page < first_page) {
      keep.push_back(RangeEntry{r.first_page, first_page - r.first_page, r.frame, r.user_accessible});
    }
    if (r_end > end_page) {
      keep.push_back(RangeEntry{end_page, r_end - end_page, r.frame, r.user_accessible});
    }
  }
  for (const RangeEntry& r : keep) {
    ranges_.emplace(r.first_page, r);
  }
}

void AddressSpace::insert_range(std::uint64_t first_page, std::uint64_t page_count,
                                std::uint64_t frame, bool user_accessible) {
  ranges_.emplace(first_page, RangeEntry{first_page, page_count, frame, user_accessible});
}

std::optional<PageEntry> AddressSpace::lookup(std::uint64_t vpage) const {
  if (const auto it = pages_.find(vpage); it != pages_.end()) {
    return it->second;
  }
  auto it = ranges_.upper_bound(vpage);
  if (it == ranges_.begin()) {
    return std::nullopt;
  }
  --it;
  const RangeEntry& r = it->second;
  if (vpage >= r.first_page && vpage < r.first_page + r.page_count) {
    return PageEntry{r.frame, r.user_accessible, true};
  }
  return std::nullopt;
}

std::uint64_t AddressSpace::mapped_page_count() const {
  std::uint64_t total = pages_.size();
  for (const auto& [_, r] : ranges_) {
    total += r.page_count;
  }
  return total;
}

std::uint64_t AddressSpace::content_hash() const {
  const auto mix = [](std::uint64_t h, std::uint64_t v) {
    h ^= v + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
    return h;
  };
  std::uint64_t acc = 0;
  for (const auto& [vpage, e] : pages_) {
    std::uint64_t h = 0;
    h = mix(h, vpage);
    h = mix(h, e.frame);
    h = mix(h, (std::uint64_t{e.user_accessible} << 1) | e.present);
    acc += h;  // order-independent combine
  }
  for (const auto& [_, r] : ranges_) {
    std::uint64_t h = 1;
    h = mix(h, r.first_page);
    h = mix(h, r.page_count);
    h = mix(h, r.frame);
    h = mix(h, r.user_accessible);
    acc += h;
  }
  acc = mix(acc, dpm_base_.value);
  acc = mix(acc, kaiser_enabled_);
  return acc;
}

}  // namespace specderef
