#include "specderef/machine.hpp"

#include <algorithm>
#include <sstream>
#include <stdexcept>

#include "specderef/errors.hpp"
#include "specderef/gadget_presets.hpp"

namespace specderef {

namespace {

constexpr std::array<std::string_view, kRegCount> kRegNames = {
    "rax", "rbx", "rcx", "rdx", "rsi", "rdi", "rbp", "rsp",
    "r8",  "r9",  "r10", "r11", "r12", "r13", "r14", "r15",
};

constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ULL;
constexpr std::uint64_t kFnvPrime = 0x100000001b3ULL;

struct Fnv1a {
  std::uint64_t state = kFnvOffset;

  void mix(std::uint64_t value) {
    for (int i = 0; i < 8; ++i) {
      state ^= (value >> (i * 8)) & 0xFF;
      state *= kFnvPrime;
    }
  }
  void mix_bytes(std::string_view bytes) {
    for (unsigned char c : bytes) {
      state ^= c;
      state *= kFnvPrime;
    }
  }
};

}  // namespace

std::string_view reg_name(Reg r) { return kRegNames[static_cast<std::size_t>(r)]; }

std::optional<Reg> reg_from_name(std::string_view name) {
  for (std::size_t i = 0; i < kRegCount; ++i) {
    if (kRegNames[i] == name) {
      return static_cast<Reg>(i);
    }
  }
  return std::nullopt;
}

std::string to_string(const RegSet& regs) {
  std::string out;
  for (std::size_t i = 0; i < kRegCount; ++i) {
    if (regs.contains(static_cast<Reg>(i))) {
      if (!out.empty()) out += ',';
      out += kRegNames[i];
    }
  }
  return out;
}

RegSet reg_set_from_string(std::string_view csv) {
  RegSet set;
  std::size_t pos = 0;
  while (pos <= csv.size()) {
    const std::size_t comma = csv.find(',', pos);
    const std::string_view token =
        csv.substr(pos, comma == std::string_view::npos ? csv.size() - pos : comma - pos);
    if (!token.empty()) {
      const auto reg = reg_from_name(token);
      if (!reg) {
        throw ConfigError("unknown register name: " + std::string(token));
      }
      set.insert(*reg);
    }
    if (comma == std::string_view::npos) break;
    pos = comma + 1;
  }
  return set;
}

std::string_view to_string(L1dFlushPolicy policy) {
  switch (policy) {
    case L1dFlushPolicy::None: return "none";
    case L1dFlushPolicy::Conditional: return "conditional";
    case L1dFlushPolicy::Always: return "always";
  }
  return "unknown";
}

std::string_view to_string(CpuOrder order) {
  return order == CpuOrder::InOrder ? "in-order" : "out-of-order";
}

std::string_view to_string(TransientReader reader) {
  return reader == TransientReader::MeltdownUS ? "meltdown-us" : "foreshadow";
}

std::string_view to_string(SpecOrigin origin) {
  switch (origin) {
    case SpecOrigin::Syscall: return "syscall";
    case SpecOrigin::Interrupt: return "interrupt";
    case SpecOrigin::Hypercall: return "hypercall";
    case SpecOrigin::IndirectCall: return "indirect-call";
  }
  return "unknown";
}

std::uint64_t MitigationConfig::fingerprint() const {
  Fnv1a h;
  h.mix(spectre_btb);
  h.mix(kaiser);
  h.mix(smap);
  h.mix(register_clearing_on_syscall);
  h.mix(register_clearing_on_vmexit);
  h.mix(static_cast<std::uint64_t>(l1d_flush_on_vmentry));
  h.mix(static_cast<std::uint64_t>(cpu_order));
  h.mix(meltdown_us_vulnerable);
  h.mix(l1tf_vulnerable);
  return h.state;
}

void SimConfig::validate() const {
  cache.validate();
  if (physical_memory_size == 0 || physical_memory_size % kPageSize != 0) {
    throw ConfigError("physical memory size must be a positive multiple of the page size");
  }
  const VirtualAddress base{dpm_base};
  if (!is_canonical(base) || !is_kernel_half(base) || !is_page_aligned(base)) {
    throw ConfigError("dpm_base must be a page-aligned canonical kernel-half address");
  }
  if (probe_threshold <= cache.last_level_hit_latency() || probe_threshold >= cache.miss_latency) {
    throw ConfigError("probe threshold must lie strictly between the last-level hit latency and "
                      "the miss latency");
  }
  if (noise.speculation_probability < 0.0 || noise.speculation_probability > 1.0 ||
      noise.fp_rate < 0.0 || noise.fp_rate > 1.0) {
    throw ConfigError("noise probabilities must lie in [0, 1]");
  }
  if (btb_capacity == 0) {
    throw ConfigError("btb capacity must be positive");
  }
  if (interrupt_latency == 0) {
    throw ConfigError("interrupt latency must be positive");
  }
  find_gadget_preset(gadget_preset);  // throws on unknown preset
}

MachineState::MachineState(SimConfig config)
    : config_(std::move(config)),
      cache_((config_.validate(), config_.cache), config_.physical_memory_size),
      btb_(config_.btb_capacity),
      kernel_aspace_(config_.physical_memory_size, VirtualAddress{config_.dpm_base},
                     config_.mitigations.kaiser),
      syscall_table_(find_gadget_preset(config_.gadget_preset).syscalls),
      rng_(config_.seed) {}

AddressSpace& MachineState::add_process(Pid pid, bool is_vm) {
  if (pid == kKernelPid || user_aspaces_.contains(pid)) {
    throw ConfigError("add_process: pid already in use");
  }
  log({cycle_, EventKind::op_add_process, pid, 0, is_vm ? "vm=1" : "vm=0"});
  if (is_vm) {
    vm_guests_.insert(pid);
  }
  auto [it, _] = user_aspaces_.emplace(
      pid, AddressSpace(config_.physical_memory_size, VirtualAddress{config_.dpm_base},
                        config_.mitigations.kaiser));
  return it->second;
}

AddressSpace& MachineState::aspace(Pid pid) {
  if (pid == kKernelPid) return kernel_aspace_;
  const auto it = user_aspaces_.find(pid);
  if (it == user_aspaces_.end()) {
    throw ConfigError("unknown process id");
  }
  return it->second;
}

const AddressSpace& MachineState::aspace(Pid pid) const {
  return const_cast<MachineState*>(this)->aspace(pid);
}

// Kernel-mode execution triggered from pid runs on pid's page tables; a VM
// guest's entries are handled by the host, so its context is the host kernel
// address space.
AddressSpace& MachineState::context_aspace(Pid pid) {
  if (pid == kKernelPid || vm_guests_.contains(pid)) {
    return kernel_aspace_;
  }
  return aspace(pid);
}

void MachineState::set_register(Reg r, std::uint64_t value) {
  log({cycle_, EventKind::op_set_register, value, 0,
       std::string("reg=") + std::string(reg_name(r))});
  regs_[static_cast<std::size_t>(r)] = value;
}

void MachineState::fill_registers(const RegSet& regs, std::uint64_t value) {
  for (std::size_t i = 0; i < kRegCount; ++i) {
    if (regs.contains(static_cast<Reg>(i))) {
      set_register(static_cast<Reg>(i), value);
    }
  }
}

void MachineState::map_page(Pid pid, VirtualAddress v, PhysicalAddress p, bool user_accessible) {
  std::ostringstream cause;
  cause << "pid=" << pid << ";phys=" << p.value << ";ua=" << (user_accessible ? 1 : 0);
  log({cycle_, EventKind::op_map_page, v.value, 0, cause.str()});
  aspace(pid).map_page(v, p, user_accessible);
}

void MachineState::map_shared_range(Pid pid, VirtualAddress start, std::uint64_t page_count,
                                    PhysicalAddress p1, PhysicalAddress p2) {
  std::ostringstream cause;
  cause << "pid=" << pid << ";count=" << page_count << ";p1=" << p1.value << ";p2=" << p2.value;
  log({cycle_, EventKind::op_map_shared_range, start.value, 0, cause.str()});
  aspace(pid).map_shared_range(start, page_count, p1, p2);
}

void MachineState::unmap_range(Pid pid, VirtualAddress start, std::uint64_t page_count) {
  std::ostringstream cause;
  cause << "pid=" << pid << ";count=" << page_count;
  log({cycle_, EventKind::op_unmap_range, start.value, 0, cause.str()});
  aspace(pid).unmap_range(start, page_count);
}

void MachineState::plant_byte(PhysicalAddress p, std::uint8_t value) {
  if (p.value >= config_.physical_memory_size) {
    throw ConfigError("plant_byte: physical address beyond configured memory");
  }
  std::ostringstream cause;
  cause << "value=" << static_cast<unsigned>(value);
  log({cycle_, EventKind::op_plant_byte, p.value, 0, cause.str()});
  phys_memory_[p.value] = value;
}

void MachineState::plant_bytes(PhysicalAddress p, std::span<const std::uint8_t> bytes) {
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    plant_byte(PhysicalAddress{p.value + i}, bytes[i]);
  }
}

void MachineState::tag_host_sensitive(PhysicalAddress p) {
  log({cycle_, EventKind::op_tag_host_sensitive, p.value, 0, ""});
  host_sensitive_lines_.insert(cache_.line_of(p));
}

const SyscallDescriptor& MachineState::syscall(int nr) const {
  if (nr < 0 || static_cast<std::size_t>(nr) >= syscall_table_.size()) {
    throw ConfigError("unknown syscall id");
  }
  return syscall_table_[static_cast<std::size_t>(nr)];
}

std::optional<int> MachineState::syscall_by_name(std::string_view name) const {
  for (const SyscallDescriptor& d : syscall_table_) {
    if (d.name == name) {
      return d.id;
    }
  }
  return std::nullopt;
}

std::uint8_t MachineState::read_phys(PhysicalAddress p) const {
  const auto it = phys_memory_.find(p.value);
  return it == phys_memory_.end() ? 0 : it->second;
}

std::uint64_t MachineState::probe_round_trip() const {
  return config_.cache.miss_latency + kFlushLatency;
}

bool MachineState::speculation_enabled() const {
  return config_.mitigations.cpu_order == CpuOrder::OutOfOrder && !config_.mitigations.spectre_btb;
}

bool MachineState::chance(double p) {
  if (p >= 1.0) return true;
  if (p <= 0.0) return false;
  const double unit = static_cast<double>(rng_() >> 11) * 0x1.0p-53;
  return unit < p;
}

void MachineState::log(Event e) {
  if (logging_) {
    log_.push_back(std::move(e));
  }
}

std::uint64_t MachineState::handler_target(int nr) const {
  return kSyscallTargetBase + static_cast<std::uint64_t>(nr);
}

std::optional<int> MachineState::nr_from_target(std::uint64_t target) const {
  if (target < kSyscallTargetBase) return std::nullopt;
  const std::uint64_t nr = target - kSyscallTargetBase;
  if (nr >= syscall_table_.size()) return std::nullopt;
  return static_cast<int>(nr);
}

std::uint64_t MachineState::state_fingerprint() const {
  Fnv1a h;
  h.mix(cycle_);
  for (std::uint64_t r : regs_) h.mix(r);
  for (std::uint64_t word : cache_.canonical_dump()) h.mix(word);
  for (const auto& [site, target] : btb_.canonical_dump()) {
    h.mix(site);
    h.mix(target);
  }
  std::vector<std::pair<std::uint64_t, std::uint8_t>> planted(phys_memory_.begin(),
                                                              phys_memory_.end());
  std::sort(planted.begin(), planted.end());
  for (const auto& [addr, value] : planted) {
    h.mix(addr);
    h.mix(value);
  }
  for (std::uint64_t line : host_sensitive_lines_) h.mix(line);
  for (const auto& [target, derefs] : indirect_targets_) {
    h.mix(target);
    h.mix(derefs);
  }
  const auto mix_aspace = [&h](const AddressSpace& as) {
    h.mix(as.mapped_page_count());
    h.mix(as.content_hash());
  };
  mix_aspace(kernel_aspace_);
  for (const auto& [pid, as] : user_aspaces_) {
    h.mix(pid);
    mix_aspace(as);
  }
  for (Pid pid : vm_guests_) h.mix(pid);
  std::ostringstream rng_state;
  rng_state << rng_;
  h.mix_bytes(rng_state.str());
  return h.state;
}

}  // namespace specderef
