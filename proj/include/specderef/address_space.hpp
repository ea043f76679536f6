#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string_view>
#include <unordered_map>
#include <variant>

#include "specderef/addresses.hpp"

namespace specderef {

enum class FaultKind : std::uint8_t {
  NotPresent,
  UserAccessToKernel,
  SmapViolation,
  NonCanonical,
};

std::string_view to_string(FaultKind kind);

struct Fault {
  FaultKind kind;

  friend constexpr bool operator==(const Fault&, const Fault&) = default;
};

enum class Mode : std::uint8_t { User, Kernel };

using TranslateResult = std::variant<PhysicalAddress, Fault>;

constexpr bool translated(const TranslateResult& r) {
  return std::holds_alternative<PhysicalAddress>(r);
}

struct PageEntry {
  std::uint64_t frame = 0;
  bool user_accessible = false;
  bool present = false;
};

// One address space: a flat virtual-page -> frame map plus the kernel
// direct-physical map (DPM) anchored at dpm_base. Large uniform regions that
// map many consecutive virtual pages onto a single frame (the layout the
// massively-shared mappings need) are stored as compressed range entries;
// translation semantics are identical to a page-by-page table.
class AddressSpace {
 public:
  explicit AddressSpace(std::uint64_t physical_memory_size = kDefaultPhysicalMemorySize,
                        VirtualAddress dpm_base = VirtualAddress{kDefaultDpmBase},
                        bool kaiser_enabled = false);

  // Pure function of (this, v, mode, smap). Faults are values, never thrown.
  TranslateResult translate(VirtualAddress v, Mode mode, bool smap) const;

  // Kernel-half alias of a physical address. Throws std::out_of_range when p
  // exceeds physical memory.
  VirtualAddress dpm_address(PhysicalAddress p) const;

  // Installs (or replaces) a single present page-table entry.
  // Throws ConfigError on non-canonical or unaligned v, out-of-range p.
  void map_page(VirtualAddress v, PhysicalAddress p, bool user_accessible);

  // First page_count/2 consecutive pages map to p1's frame, the next
  // page_count/2 to p2's frame, all user-accessible. Overwrites anything
  // previously mapped in the span. Throws ConfigError on odd counts or when
  // the span leaves the user half.
  void map_shared_range(VirtualAddress start, std::uint64_t page_count,
                        PhysicalAddress p1, PhysicalAddress p2);

  void unmap_range(VirtualAddress start, std::uint64_t page_count);

  std::optional<PageEntry> lookup(std::uint64_t vpage) const;

  std::uint64_t physical_memory_size() const { return physical_memory_size_; }
  VirtualAddress dpm_base() const { return dpm_base_; }
  bool kaiser_enabled() const { return kaiser_enabled_; }
  void set_kaiser_enabled(bool on) { kaiser_enabled_ = on; }

  std::uint64_t mapped_page_count() const;

  // Order-independent hash of the full mapping content.
  std::uint64_t content_hash() const;

 private:
  struct RangeEntry {
    std::uint64_t first_page = 0;
    std::uint64_t page_count = 0;
    std::uint64_t frame = 0;
    bool user_accessible = false;
  };

  bool in_dpm(VirtualAddress v) const;
  void erase_span(std::uint64_t first_page, std::uint64_t page_count);
  void insert_range(std::uint64_t first_page, std::uint64_t page_count,
                    std::uint64_t frame, bool user_accessible);

  std::uint64_t physical_memory_size_;
  VirtualAddress dpm_base_;
  bool kaiser_enabled_;
  std::unordered_map<std::uint64_t, PageEntry> pages_;
  std::map<std::uint64_t, RangeEntry> ranges_;  // keyed by first_page
};

}  // namespace specderef
