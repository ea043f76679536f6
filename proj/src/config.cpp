#include "specderef/config.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

#include "specderef/errors.hpp"
#include "specderef/gadget_presets.hpp"

namespace specderef {

namespace {

constexpr std::array<std::pair<Scenario, std::string_view>, 12> kScenarioNames = {{
    {Scenario::H1, "h1"},
    {Scenario::H2, "h2"},
    {Scenario::H3, "h3"},
    {Scenario::H4, "h4"},
    {Scenario::H5, "h5"},
    {Scenario::AddrTranslate, "addr_translate"},
    {Scenario::Covert, "covert"},
    {Scenario::DerefTrap, "deref_trap"},
    {Scenario::ForeshadowL3, "foreshadow_l3"},
    {Scenario::MeltdownL3, "meltdown_l3"},
    {Scenario::SyscallSweep, "syscall_sweep"},
    {Scenario::BtbMistrainSweep, "btb_mistrain_sweep"},
}};

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

bool parse_bool(std::string_view key, std::string_view value) {
  if (value == "on" || value == "true" || value == "1" || value == "yes") return true;
  if (value == "off" || value == "false" || value == "0" || value == "no") return false;
  throw ConfigError("expected on/off for key '" + std::string(key) + "', got '" +
                    std::string(value) + "'");
}

std::uint64_t parse_u64(std::string_view key, std::string_view value) {
  try {
    std::size_t used = 0;
    const std::string s(value);
    const std::uint64_t parsed = std::stoull(s, &used, 0);  // base 0: 0x.. accepted
    if (used != s.size()) throw std::invalid_argument("trailing characters");
    return parsed;
  } catch (const std::exception&) {
    throw ConfigError("expected integer for key '" + std::string(key) + "', got '" +
                      std::string(value) + "'");
  }
}

double parse_double(std::string_view key, std::string_view value) {
  try {
    std::size_t used = 0;
    const std::string s(value);
    const double parsed = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument("trailing characters");
    return parsed;
  } catch (const std::exception&) {
    throw ConfigError("expected number for key '" + std::string(key) + "', got '" +
                      std::string(value) + "'");
  }
}

L1dFlushPolicy parse_flush_policy(std::string_view key, std::string_view value) {
  if (value == "none") return L1dFlushPolicy::None;
  if (value == "conditional") return L1dFlushPolicy::Conditional;
  if (value == "always") return L1dFlushPolicy::Always;
  throw ConfigError("expected none/conditional/always for key '" + std::string(key) + "'");
}

CpuOrder parse_cpu_order(std::string_view key, std::string_view value) {
  if (value == "in-order") return CpuOrder::InOrder;
  if (value == "out-of-order") return CpuOrder::OutOfOrder;
  throw ConfigError("expected in-order/out-of-order for key '" + std::string(key) + "'");
}

CacheLevelConfig* find_level(CacheConfig& cache, CacheLevel name) {
  for (CacheLevelConfig& lvl : cache.levels) {
    if (lvl.name == name) return &lvl;
  }
  return nullptr;
}

void set_level_count(CacheConfig& cache, std::uint64_t count) {
  if (count == 2) {
    const CacheConfig fresh = CacheConfig::two_level();
    CacheConfig merged = fresh;
    if (auto* l1 = find_level(cache, CacheLevel::L1)) *find_level(merged, CacheLevel::L1) = *l1;
    if (auto* l3 = find_level(cache, CacheLevel::L3)) *find_level(merged, CacheLevel::L3) = *l3;
    merged.line_size = cache.line_size;
    merged.miss_latency = cache.miss_latency;
    merged.inclusive = cache.inclusive;
    cache = merged;
  } else if (count == 3) {
    CacheConfig merged = CacheConfig::three_level();
    if (auto* l1 = find_level(cache, CacheLevel::L1)) *find_level(merged, CacheLevel::L1) = *l1;
    if (auto* l2 = find_level(cache, CacheLevel::L2)) *find_level(merged, CacheLevel::L2) = *l2;
    if (auto* l3 = find_level(cache, CacheLevel::L3)) *find_level(merged, CacheLevel::L3) = *l3;
    merged.line_size = cache.line_size;
    merged.miss_latency = cache.miss_latency;
    merged.inclusive = cache.inclusive;
    cache = merged;
  } else {
    throw ConfigError("cache.levels must be 2 or 3");
  }
}

}  // namespace

std::string_view to_string(Scenario scenario) {
  for (const auto& [s, name] : kScenarioNames) {
    if (s == scenario) return name;
  }
  return "unknown";
}

Scenario scenario_from_string(std::string_view name) {
  for (const auto& [s, n] : kScenarioNames) {
    if (n == name) return s;
  }
  throw ConfigError("unknown scenario: " + std::string(name));
}

std::vector<Scenario> all_scenarios() {
  std::vector<Scenario> out;
  for (const auto& [s, _] : kScenarioNames) out.push_back(s);
  return out;
}

bool is_sweep(Scenario scenario) {
  return scenario == Scenario::SyscallSweep || scenario == Scenario::BtbMistrainSweep;
}

void ExperimentConfig::validate() const {
  sim.validate();
  if (repetitions < 1) {
    throw ConfigError("repetitions must be >= 1");
  }
  if (covert.line_index >= kPageSize / sim.cache.line_size) {
    throw ConfigError("covert.line_index must address a line within one page");
  }
}

void ExperimentConfig::apply_override(std::string_view key, std::string_view value) {
  key = trim(key);
  value = trim(value);
  MitigationConfig& mit = sim.mitigations;
  CacheConfig& cache = sim.cache;

  if (key == "scenario") {
    scenario = scenario_from_string(value);
  } else if (key == "seed") {
    sim.seed = parse_u64(key, value);
  } else if (key == "repetitions") {
    repetitions = static_cast<int>(parse_u64(key, value));
  } else if (key == "gadget_preset") {
    sim.gadget_preset = std::string(value);
  } else if (key == "mitigations.spectre_btb") {
    mit.spectre_btb = parse_bool(key, value);
  } else if (key == "mitigations.kaiser") {
    mit.kaiser = parse_bool(key, value);
  } else if (key == "mitigations.smap") {
    mit.smap = parse_bool(key, value);
  } else if (key == "mitigations.register_clearing_on_syscall") {
    mit.register_clearing_on_syscall = parse_bool(key, value);
  } else if (key == "mitigations.register_clearing_on_vmexit") {
    mit.register_clearing_on_vmexit = parse_bool(key, value);
  } else if (key == "mitigations.l1d_flush_on_vmentry") {
    mit.l1d_flush_on_vmentry = parse_flush_policy(key, value);
  } else if (key == "mitigations.cpu_order") {
    mit.cpu_order = parse_cpu_order(key, value);
  } else if (key == "mitigations.meltdown_us_vulnerable") {
    mit.meltdown_us_vulnerable = parse_bool(key, value);
  } else if (key == "mitigations.l1tf_vulnerable") {
    mit.l1tf_vulnerable = parse_bool(key, value);
  } else if (key == "noise.speculation_probability") {
    sim.noise.speculation_probability = parse_double(key, value);
  } else if (key == "noise.fp_rate") {
    sim.noise.fp_rate = parse_double(key, value);
  } else if (key == "cache.levels") {
    set_level_count(cache, parse_u64(key, value));
  } else if (key == "cache.line_size") {
    cache.line_size = parse_u64(key, value);
  } else if (key == "cache.miss_latency") {
    cache.miss_latency = parse_u64(key, value);
  } else if (key == "cache.inclusive") {
    cache.inclusive = parse_bool(key, value);
  } else if (key.starts_with("cache.l")) {
    const std::string_view rest = key.substr(7);  // after "cache.l"
    CacheLevel level_name;
    if (rest.starts_with("1_")) {
      level_name = CacheLevel::L1;
    } else if (rest.starts_with("2_")) {
      level_name = CacheLevel::L2;
    } else if (rest.starts_with("3_")) {
      level_name = CacheLevel::L3;
    } else {
      throw ConfigError("unknown config key: " + std::string(key));
    }
    CacheLevelConfig* lvl = find_level(cache, level_name);
    if (lvl == nullptr) {
      throw ConfigError("cache level not configured (set cache.levels=3 first): " +
                        std::string(key));
    }
    const std::string_view field = rest.substr(2);
    if (field == "sets") {
      lvl->sets = static_cast<std::uint32_t>(parse_u64(key, value));
    } else if (field == "ways") {
      lvl->ways = static_cast<std::uint32_t>(parse_u64(key, value));
    } else if (field == "latency") {
      lvl->hit_latency = parse_u64(key, value);
    } else {
      throw ConfigError("unknown config key: " + std::string(key));
    }
  } else if (key == "machine.physical_memory") {
    sim.physical_memory_size = parse_u64(key, value);
  } else if (key == "machine.dpm_base") {
    sim.dpm_base = parse_u64(key, value);
  } else if (key == "machine.btb_capacity") {
    sim.btb_capacity = static_cast<std::size_t>(parse_u64(key, value));
  } else if (key == "machine.probe_threshold") {
    sim.probe_threshold = parse_u64(key, value);
  } else if (key == "machine.interrupt_latency") {
    sim.interrupt_latency = parse_u64(key, value);
  } else if (key == "machine.hypercall_gadget_registers") {
    sim.hypercall_gadget_registers = reg_set_from_string(value);
  } else if (key == "covert.window") {
    covert.window = parse_u64(key, value);
  } else if (key == "covert.line_index") {
    covert.line_index = static_cast<std::uint32_t>(parse_u64(key, value));
  } else if (key == "covert.message_bytes") {
    covert.message_bytes = static_cast<std::uint32_t>(parse_u64(key, value));
  } else {
    throw ConfigError("unknown config key: " + std::string(key));
  }
}

ExperimentConfig ExperimentConfig::from_string(const std::string& text) {
  ExperimentConfig cfg;
  std::istringstream in(text);
  std::string raw_line;
  std::string section;
  int line_number = 0;
  while (std::getline(in, raw_line)) {
    ++line_number;
    std::string_view line = trim(raw_line);
    if (line.empty() || line.front() == '#') {
      continue;
    }
    if (line.front() == '[') {
      if (line.back() != ']') {
        throw ConfigError("line " + std::to_string(line_number) + ": malformed section header");
      }
      section = std::string(trim(line.substr(1, line.size() - 2)));
      continue;
    }
    const std::size_t eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError("line " + std::to_string(line_number) + ": expected key=value");
    }
    std::string key(trim(line.substr(0, eq)));
    const std::string_view value = trim(line.substr(eq + 1));
    if (!section.empty() && key.find('.') == std::string::npos) {
      key = section + "." + key;
    }
    try {
      cfg.apply_override(key, value);
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(line_number) + ": " + e.what());
    }
  }
  return cfg;
}

ExperimentConfig ExperimentConfig::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) {
    throw ConfigError("cannot open config file: " + path);
  }
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return from_string(buffer.str());
}

std::string ExperimentConfig::serialize() const {
  std::ostringstream out;
  out << "scenario=" << to_string(scenario) << "\n";
  out << "seed=" << sim.seed << "\n";
  out << "repetitions=" << repetitions << "\n";
  out << "gadget_preset=" << sim.gadget_preset << "\n";
  const MitigationConfig& mit = sim.mitigations;
  out << "mitigations.spectre_btb=" << (mit.spectre_btb ? "on" : "off") << "\n";
  out << "mitigations.kaiser=" << (mit.kaiser ? "on" : "off") << "\n";
  out << "mitigations.smap=" << (mit.smap ? "on" : "off") << "\n";
  out << "mitigations.register_clearing_on_syscall="
      << (mit.register_clearing_on_syscall ? "on" : "off") << "\n";
  out << "mitigations.register_clearing_on_vmexit="
      << (mit.register_clearing_on_vmexit ? "on" : "off") << "\n";
  out << "mitigations.l1d_flush_on_vmentry=" << to_string(mit.l1d_flush_on_vmentry) << "\n";
  out << "mitigations.cpu_order=" << to_string(mit.cpu_order) << "\n";
  out << "mitigations.meltdown_us_vulnerable=" << (mit.meltdown_us_vulnerable ? "on" : "off")
      << "\n";
  out << "mitigations.l1tf_vulnerable=" << (mit.l1tf_vulnerable ? "on" : "off") << "\n";
  std::ostringstream spec_prob;
  spec_prob.precision(17);
  spec_prob << sim.noise.speculation_probability;
  out << "noise.speculation_probability=" << spec_prob.str() << "\n";
  std::ostringstream fp;
  fp.precision(17);
  fp << sim.noise.fp_rate;
  out << "noise.fp_rate=" << fp.str() << "\n";
  out << "cache.levels=" << sim.cache.levels.size() << "\n";
  for (const CacheLevelConfig& lvl : sim.cache.levels) {
    std::string prefix = "cache.l";
    prefix += (lvl.name == CacheLevel::L1 ? "1" : lvl.name == CacheLevel::L2 ? "2" : "3");
    out << prefix << "_sets=" << lvl.sets << "\n";
    out << prefix << "_ways=" << lvl.ways << "\n";
    out << prefix << "_latency=" << lvl.hit_latency << "\n";
  }
  out << "cache.line_size=" << sim.cache.line_size << "\n";
  out << "cache.miss_latency=" << sim.cache.miss_latency << "\n";
  out << "cache.inclusive=" << (sim.cache.inclusive ? "on" : "off") << "\n";
  out << "machine.physical_memory=" << sim.physical_memory_size << "\n";
  out << "machine.dpm_base=" << sim.dpm_base << "\n";
  out << "machine.btb_capacity=" << sim.btb_capacity << "\n";
  out << "machine.probe_threshold=" << sim.probe_threshold << "\n";
  out << "machine.interrupt_latency=" << sim.interrupt_latency << "\n";
  if (!sim.hypercall_gadget_registers.empty()) {
    out << "machine.hypercall_gadget_registers=" << to_string(sim.hypercall_gadget_registers)
        << "\n";
  }
  out << "covert.window=" << covert.window << "\n";
  out << "covert.line_index=" << covert.line_index << "\n";
  out << "covert.message_bytes=" << covert.message_bytes << "\n";
  return out.str();
}

}  // namespace specderef
