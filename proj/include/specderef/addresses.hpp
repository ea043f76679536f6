#pragma once

#include <compare>
#include <cstdint>

namespace specderef {

inline constexpr std::uint64_t kPageSize = 4096;

// Default machine geometry: 2^24 bytes of physical memory (4096 frames) keeps
// brute-force physical-frame sweeps in the millisecond range.
inline constexpr std::uint64_t kDefaultPhysicalMemorySize = std::uint64_t{1} << 24;

// Kernel-half base of the direct-physical map. Any canonical kernel-half
// constant works; this one is shaped like the Linux direct map.
inline constexpr std::uint64_t kDefaultDpmBase = 0xFFFF'8880'0000'0000ULL;

// Physical and virtual addresses are distinct roles and never interchangeable
// without going through AddressSpace::translate.
struct PhysicalAddress {
  std::uint64_t value = 0;

  constexpr PhysicalAddress() = default;
  constexpr explicit PhysicalAddress(std::uint64_t v) : value(v) {}

  friend constexpr auto operator<=>(const PhysicalAddress&, const PhysicalAddress&) = default;
};

struct VirtualAddress {
  std::uint64_t value = 0;

  constexpr VirtualAddress() = default;
  constexpr explicit VirtualAddress(std::uint64_t v) : value(v) {}

  friend constexpr auto operator<=>(const VirtualAddress&, const VirtualAddress&) = default;
};

// x86-64 canonical form: bits 48..63 replicate bit 47.
constexpr bool is_canonical(VirtualAddress v) {
  const std::uint64_t upper = v.value >> 47;  // bit 47 and everything above
  return upper == 0 || upper == 0x1FFFF;
}

// Kernel half = top bit set. For canonical addresses this coincides with bit 47.
constexpr bool is_kernel_half(VirtualAddress v) {
  return (v.value >> 63) != 0;
}

constexpr std::uint64_t virtual_page(VirtualAddress v) { return v.value / kPageSize; }
constexpr std::uint64_t page_offset(VirtualAddress v) { return v.value % kPageSize; }
constexpr std::uint64_t frame_index(PhysicalAddress p) { return p.value / kPageSize; }
constexpr std::uint64_t frame_offset(PhysicalAddress p) { return p.value % kPageSize; }
constexpr bool is_page_aligned(VirtualAddress v) { return page_offset(v) == 0; }
constexpr bool is_page_aligned(PhysicalAddress p) { return frame_offset(p) == 0; }

}  // namespace specderef
