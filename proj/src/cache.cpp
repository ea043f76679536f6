#include "specderef/cache.hpp"

#include <algorithm>
#include <bit>
#include <stdexcept>

#include "specderef/errors.hpp"

namespace specderef {

std::string_view to_string(CacheLevel level) {
  switch (level) {
    case CacheLevel::L1: return "L1";
    case CacheLevel::L2: return "L2";
    case CacheLevel::L3: return "L3";
    case CacheLevel::Memory: return "Memory";
  }
  return "unknown";
}

void CacheConfig::validate() const {
  if (levels.empty()) {
    throw ConfigError("cache: at least one level required");
  }
  if (line_size == 0 || !std::has_single_bit(line_size)) {
    throw ConfigError("cache: line size must be a power of two");
  }
  std::uint64_t previous_latency = 0;
  for (const CacheLevelConfig& lvl : levels) {
    if (lvl.sets == 0 || lvl.ways == 0) {
      throw ConfigError("cache: set and way counts must be positive");
    }
    if (lvl.hit_latency <= previous_latency) {
      throw ConfigError("cache: hit latencies must strictly increase with level");
    }
    previous_latency = lvl.hit_latency;
  }
  if (miss_latency <= previous_latency) {
    throw ConfigError("cache: miss latency must exceed the slowest hit latency");
  }
}

CacheConfig CacheConfig::two_level() {
  CacheConfig cfg;
  cfg.levels = {
      {CacheLevel::L1, 64, 8, 4},
      {CacheLevel::L3, 1024, 16, 40},
  };
  return cfg;
}

CacheConfig CacheConfig::three_level() {
  CacheConfig cfg;
  cfg.levels = {
      {CacheLevel::L1, 64, 8, 4},
      {CacheLevel::L2, 512, 8, 12},
      {CacheLevel::L3, 1024, 16, 40},
  };
  return cfg;
}

CacheState::CacheState(CacheConfig config, std::uint64_t physical_memory_size)
    : config_(std::move(config)), physical_memory_size_(physical_memory_size) {
  config_.validate();
  levels_.reserve(config_.levels.size());
  for (const CacheLevelConfig& lvl : config_.levels) {
    Level state;
    state.cfg = lvl;
    state.sets.resize(lvl.sets);
    levels_.push_back(std::move(state));
  }
}

void CacheState::check_range(PhysicalAddress p) const {
  if (p.value >= physical_memory_size_) {
    throw std::out_of_range("cache: physical address beyond configured memory");
  }
}

std::size_t CacheState::level_index(CacheLevel level) const {
  for (std::size_t i = 0; i < levels_.size(); ++i) {
    if (levels_[i].cfg.name == level) {
      return i;
    }
  }
  throw ConfigError("cache: level not configured");
}

bool CacheState::level_contains(const Level& lvl, std::uint64_t line) const {
  const Set& set = lvl.sets[line % lvl.cfg.sets];
  return std::find(set.mru_lines.begin(), set.mru_lines.end(), line) != set.mru_lines.end();
}

std::optional<std::uint64_t> CacheState::touch(Level& lvl, std::uint64_t line) {
  Set& set = lvl.sets[line % lvl.cfg.sets];
  auto it = std::find(set.mru_lines.begin(), set.mru_lines.end(), line);
  if (it != set.mru_lines.end()) {
    set.mru_lines.erase(it);
    set.mru_lines.insert(set.mru_lines.begin(), line);
    return std::nullopt;
  }
  set.mru_lines.insert(set.mru_lines.begin(), line);
  if (set.mru_lines.size() > lvl.cfg.ways) {
    const std::uint64_t victim = set.mru_lines.back();
    set.mru_lines.pop_back();
    return victim;
  }
  return std::nullopt;
}

void CacheState::erase_line(Level& lvl, std::uint64_t line) {
  Set& set = lvl.sets[line % lvl.cfg.sets];
  auto it = std::find(set.mru_lines.begin(), set.mru_lines.end(), line);
  if (it != set.mru_lines.end()) {
    set.mru_lines.erase(it);
  }
}

AccessOutcome CacheState::access(PhysicalAddress p) {
  check_range(p);
  const std::uint64_t line = line_of(p);

  AccessOutcome outcome{config_.miss_latency, CacheLevel::Memory};
  for (const Level& lvl : levels_) {
    if (level_contains(lvl, line)) {
      outcome = AccessOutcome{lvl.cfg.hit_latency, lvl.cfg.name};
      break;
    }
  }

  // Install outermost first so that an inclusive back-invalidation cannot
  // remove the line we are about to place in the inner levels.
  for (std::size_t i = levels_.size(); i-- > 0;) {
    const auto evicted = touch(levels_[i], line);
    if (evicted && config_.inclusive && i == levels_.size() - 1) {
      for (std::size_t inner = 0; inner + 1 < levels_.size(); ++inner) {
        erase_line(levels_[inner], *evicted);
      }
    }
  }
  return outcome;
}

void CacheState::flush(PhysicalAddress p) {
  check_range(p);
  const std::uint64_t line = line_of(p);
  for (Level& lvl : levels_) {
    erase_line(lvl, line);
  }
}

ProbeOutcome CacheState::flush_reload_probe(PhysicalAddress p, std::uint64_t threshold) {
  if (threshold <= config_.last_level_hit_latency() || threshold >= config_.miss_latency) {
    throw ConfigError(
        "probe threshold must lie strictly between the last-level hit latency and the miss "
        "latency");
  }
  const AccessOutcome out = access(p);
  flush(p);
  return ProbeOutcome{out.latency < threshold, out};
}

void CacheState::install_remote(PhysicalAddress p) {
  check_range(p);
  const std::uint64_t line = line_of(p);
  Level& last = levels_.back();
  const auto evicted = touch(last, line);
  if (evicted && config_.inclusive) {
    for (std::size_t inner = 0; inner + 1 < levels_.size(); ++inner) {
      erase_line(levels_[inner], *evicted);
    }
  }
}

void CacheState::flush_level(CacheLevel level) {
  Level& lvl = levels_[level_index(level)];
  for (Set& set : lvl.sets) {
    set.mru_lines.clear();
  }
}

void CacheState::flush_line_from_level(CacheLevel level, PhysicalAddress p) {
  check_range(p);
  erase_line(levels_[level_index(level)], line_of(p));
}

bool CacheState::contains(CacheLevel level, PhysicalAddress p) const {
  check_range(p);
  return level_contains(levels_[level_index(level)], line_of(p));
}

std::optional<CacheLevel> CacheState::find_level(PhysicalAddress p) const {
  check_range(p);
  const std::uint64_t line = line_of(p);
  for (const Level& lvl : levels_) {
    if (level_contains(lvl, line)) {
      return lvl.cfg.name;
    }
  }
  return std::nullopt;
}

std::vector<std::uint64_t> CacheState::canonical_dump() const {
  std::vector<std::uint64_t> dump;
  for (const Level& lvl : levels_) {
    dump.push_back(static_cast<std::uint64_t>(lvl.cfg.name));
    for (std::size_t s = 0; s < lvl.sets.size(); ++s) {
      const Set& set = lvl.sets[s];
      if (set.mru_lines.empty()) {
        continue;
      }
      dump.push_back(s);
      dump.push_back(set.mru_lines.size());
      dump.insert(dump.end(), set.mru_lines.begin(), set.mru_lines.end());
    }
  }
  return dump;
}

void software_prefetch(CacheState& cache, const AddressSpace& aspace, VirtualAddress v,
                       Mode mode, bool smap) {
  const TranslateResult result = aspace.translate(v, mode, smap);
  if (const auto* p = std::get_if<PhysicalAddress>(&result)) {
    cache.access(*p);
  }
  // A faulting translation makes the hint a no-op: nothing is fetched and no
  // fault is raised.
}

}  // namespace specderef
