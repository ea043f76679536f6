#pragma once

#include <cstdint>
#include <optional>
#include <string_view>
#include <vector>

#include "specderef/address_space.hpp"
#include "specderef/addresses.hpp"

namespace specderef {

enum class CacheLevel : std::uint8_t { L1, L2, L3, Memory };

std::string_view to_string(CacheLevel level);

struct CacheLevelConfig {
  CacheLevel name = CacheLevel::L1;
  std::uint32_t sets = 0;
  std::uint32_t ways = 0;
  std::uint64_t hit_latency = 0;
};

struct CacheConfig {
  std::vector<CacheLevelConfig> levels;  // ordered fastest to slowest
  std::uint64_t line_size = 64;
  std::uint64_t miss_latency = 300;
  bool inclusive = true;

  // Throws ConfigError unless line size is a power of two, set/way counts are
  // positive, hit latencies strictly increase and miss_latency exceeds the
  // slowest hit.
  void validate() const;

  std::uint64_t last_level_hit_latency() const { return levels.back().hit_latency; }

  // L1 64x8 and L3 1024x16, 64-byte lines, latencies 4/40/300.
  static CacheConfig two_level();
  // Adds an L2 (512x8, latency 12) between L1 and L3.
  static CacheConfig three_level();
};

struct AccessOutcome {
  std::uint64_t latency = 0;
  CacheLevel hit_level = CacheLevel::Memory;

  friend constexpr bool operator==(const AccessOutcome&, const AccessOutcome&) = default;
};

struct ProbeOutcome {
  bool hit = false;
  AccessOutcome access;
};

// Physically indexed, physically tagged set-associative hierarchy with true
// LRU replacement. A line is identified by physical address / line_size only.
class CacheState {
 public:
  CacheState(CacheConfig config, std::uint64_t physical_memory_size);

  // Returns the first level holding the line (Memory on a full miss), then
  // installs the line into every level. Inclusive L3 evictions back-invalidate
  // the inner levels. Throws std::out_of_range for addresses beyond physical
  // memory.
  AccessOutcome access(PhysicalAddress p);

  // clflush semantics: the line leaves every level.
  void flush(PhysicalAddress p);

  // Flush+Reload probe: access, compare against threshold, flush so the line
  // is ready for the next round. Threshold must lie strictly between the
  // last-level hit latency and the miss latency (ConfigError otherwise).
  ProbeOutcome flush_reload_probe(PhysicalAddress p, std::uint64_t threshold);

  // Fill by another physical core: installs into the shared last level only.
  void install_remote(PhysicalAddress p);

  // Whole-level eviction (L1 flush on VM entry). Inner-level eviction never
  // touches the outer levels.
  void flush_level(CacheLevel level);
  void flush_line_from_level(CacheLevel level, PhysicalAddress p);

  bool contains(CacheLevel level, PhysicalAddress p) const;
  std::optional<CacheLevel> find_level(PhysicalAddress p) const;

  const CacheConfig& config() const { return config_; }
  std::uint64_t line_of(PhysicalAddress p) const { return p.value / config_.line_size; }
  std::uint64_t lines_per_page() const { return kPageSize / config_.line_size; }

  // Canonical dump for fingerprinting and state comparison: per level, per
  // set, lines in MRU-first order.
  std::vector<std::uint64_t> canonical_dump() const;

 private:
  struct Set {
    std::vector<std::uint64_t> mru_lines;  // front = most recently used
  };
  struct Level {
    CacheLevelConfig cfg;
    std::vector<Set> sets;
  };

  std::size_t level_index(CacheLevel level) const;
  bool level_contains(const Level& lvl, std::uint64_t line) const;
  // Installs into one level; returns the evicted line if the set overflowed.
  std::optional<std::uint64_t> touch(Level& lvl, std::uint64_t line);
  void erase_line(Level& lvl, std::uint64_t line);
  void check_range(PhysicalAddress p) const;

  CacheConfig config_;
  std::uint64_t physical_memory_size_;
  std::vector<Level> levels_;
};

// Prefetch hint: if v translates under mode/smap permissions the line is
// fetched exactly as a normal access would; a faulting translation leaves the
// cache untouched and raises nothing.
void software_prefetch(CacheState& cache, const AddressSpace& aspace, VirtualAddress v,
                       Mode mode, bool smap);

}  // namespace specderef
