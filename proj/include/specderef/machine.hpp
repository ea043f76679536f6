#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "specderef/address_space.hpp"
#include "specderef/btb.hpp"
#include "specderef/cache.hpp"

namespace specderef {

using Pid = std::uint32_t;

// Pid 0 addresses the host kernel context directly.
inline constexpr Pid kKernelPid = 0;

// Fixed costs of the non-configurable micro-operations, in cycles.
inline constexpr std::uint64_t kFlushLatency = 20;
inline constexpr std::uint64_t kPrefetchLatency = 1;
inline constexpr std::uint64_t kTransientReadLatency = 350;
inline constexpr std::uint64_t kVmResumeLatency = 100;
inline constexpr std::uint64_t kHypercallLatency = 600;

enum class Reg : std::uint8_t {
  rax, rbx, rcx, rdx, rsi, rdi, rbp, rsp, r8, r9, r10, r11, r12, r13, r14, r15
};

inline constexpr std::size_t kRegCount = 16;

std::string_view reg_name(Reg r);
std::optional<Reg> reg_from_name(std::string_view name);

using RegisterFile = std::array<std::uint64_t, kRegCount>;

// Small value set of register names, iterated in register order.
struct RegSet {
  std::uint16_t mask = 0;

  static RegSet of(std::initializer_list<Reg> regs) {
    RegSet s;
    for (Reg r : regs) s.insert(r);
    return s;
  }
  void insert(Reg r) { mask = static_cast<std::uint16_t>(mask | (1u << static_cast<unsigned>(r))); }
  bool contains(Reg r) const { return (mask >> static_cast<unsigned>(r)) & 1u; }
  bool empty() const { return mask == 0; }
  int count() const { return __builtin_popcount(mask); }

  friend constexpr bool operator==(const RegSet&, const RegSet&) = default;
};

std::string to_string(const RegSet& regs);                 // comma-joined names
RegSet reg_set_from_string(std::string_view csv);          // inverse; throws ConfigError

struct SyscallDescriptor {
  int id = 0;
  std::string name;
  RegSet deref_registers;  // registers this handler's code dereferences
  std::uint64_t latency = 100;
};

enum class L1dFlushPolicy : std::uint8_t { None, Conditional, Always };
enum class CpuOrder : std::uint8_t { InOrder, OutOfOrder };

std::string_view to_string(L1dFlushPolicy policy);
std::string_view to_string(CpuOrder order);

struct MitigationConfig {
  bool spectre_btb = true;       // retpoline-style pinning of indirect branches
  bool kaiser = true;            // kernel page-table isolation flag
  bool smap = true;              // supervisor-mode access prevention
  bool register_clearing_on_syscall = false;
  bool register_clearing_on_vmexit = true;
  L1dFlushPolicy l1d_flush_on_vmentry = L1dFlushPolicy::Conditional;
  CpuOrder cpu_order = CpuOrder::OutOfOrder;
  bool meltdown_us_vulnerable = false;
  bool l1tf_vulnerable = false;

  std::uint64_t fingerprint() const;

  friend constexpr bool operator==(const MitigationConfig&, const MitigationConfig&) = default;
};

struct NoiseModel {
  double speculation_probability = 1.0;  // chance a transient window covers the gadget
  double fp_rate = 0.0;                  // Flush+Reload false-positive rate
};

struct SimConfig {
  CacheConfig cache = CacheConfig::two_level();
  std::uint64_t physical_memory_size = kDefaultPhysicalMemorySize;
  std::uint64_t dpm_base = kDefaultDpmBase;
  MitigationConfig mitigations;
  NoiseModel noise;
  std::uint64_t seed = 0;
  std::string gadget_preset = "kernel-4.18";
  std::size_t btb_capacity = 512;
  std::uint64_t probe_threshold = 100;
  std::uint64_t interrupt_latency = 400;
  RegSet hypercall_gadget_registers;  // empty = patched hypervisor (no gadget)

  void validate() const;  // throws ConfigError
};

enum class EventKind : std::uint8_t {
  // Replayable operations.
  op_add_process,
  op_set_register,
  op_syscall,
  op_interrupt,
  op_hypercall,
  op_vm_resume,
  op_access,
  op_remote_touch,
  op_flush_virt,
  op_flush_phys,
  op_probe,
  op_prefetch,
  op_transient_read,
  op_idle_until,
  op_map_page,
  op_map_shared_range,
  op_unmap_range,
  op_plant_byte,
  op_tag_host_sensitive,
  op_register_indirect_target,
  op_indirect_call,
  // Effects, regenerated when a log is replayed.
  speculative_fill,
  arch_fill,
  spec_deref_fault,
  arch_deref_fault,
  probe_result,
  vmexit_register_clear,
  l1_flush,
  transient_read_result,
};

std::string_view to_string(EventKind kind);
std::optional<EventKind> event_kind_from_string(std::string_view name);
bool is_operation(EventKind kind);

struct Event {
  std::uint64_t cycle = 0;
  EventKind kind = EventKind::op_idle_until;
  std::uint64_t address = 0;  // primary numeric argument / affected address
  std::uint64_t level = 0;    // CacheLevel for fill/probe events, 0 otherwise
  std::string cause;          // "key=value;..." details

  friend bool operator==(const Event&, const Event&) = default;
};

enum class TransientReader : std::uint8_t { MeltdownUS, Foreshadow };

std::string_view to_string(TransientReader reader);

enum class SpecOrigin : std::uint8_t { Syscall, Interrupt, Hypercall, IndirectCall };

std::string_view to_string(SpecOrigin origin);

struct MachineCounters {
  std::uint64_t speculative_fills = 0;
  std::uint64_t speculative_fills_user_page = 0;
  std::uint64_t arch_fills = 0;
  std::uint64_t squashed_faults = 0;
};

// The unit of simulation: register file, cache hierarchy, BTB, address
// spaces, mitigation toggles and an append-only event log. Single-owner
// mutable; independent instances may run in parallel.
class MachineState {
 public:
  explicit MachineState(SimConfig config);

  // --- setup & replayable operations (logged when logging is enabled) ---
  AddressSpace& add_process(Pid pid, bool is_vm = false);
  void set_register(Reg r, std::uint64_t value);
  void fill_registers(const RegSet& regs, std::uint64_t value);
  void map_page(Pid pid, VirtualAddress v, PhysicalAddress p, bool user_accessible);
  void map_shared_range(Pid pid, VirtualAddress start, std::uint64_t page_count,
                        PhysicalAddress p1, PhysicalAddress p2);
  void unmap_range(Pid pid, VirtualAddress start, std::uint64_t page_count);
  void plant_byte(PhysicalAddress p, std::uint8_t value);
  void plant_bytes(PhysicalAddress p, std::span<const std::uint8_t> bytes);
  void tag_host_sensitive(PhysicalAddress p);

  // Syscall entry: a possible misspeculated dispatch dereferences the
  // mispredicted handler's registers, then the real handler runs and trains
  // the dispatch site. Throws ConfigError on an unknown syscall id.
  void do_syscall(Pid pid, int nr);

  // Interrupt entry: the stacked r8-r15 values may be speculatively
  // dereferenced; architectural register state is preserved.
  void deliver_interrupt(Pid pid);

  // Hypercall from a registered VM guest. Guest-clobbered registers are
  // cleared before host dispatch when register_clearing_on_vmexit is set;
  // otherwise a configured host-side gadget may dereference them. Applies the
  // VM-entry flush policy on return.
  void vm_hypercall(Pid guest, const RegisterFile& args);

  // Applies the configured L1d flush policy. The shared last level is never
  // flushed.
  void vm_resume(Pid guest);

  // Transient read of a planted byte. Works only on L1-resident lines; a
  // machine without the corresponding vulnerability returns zeros.
  std::optional<std::uint8_t> transient_read(TransientReader reader, PhysicalAddress p);

  // Architectural memory access through pid's address space. Throws
  // std::runtime_error if translation faults.
  AccessOutcome access(Pid pid, VirtualAddress v, Mode mode);
  void remote_touch(PhysicalAddress p);  // other-core fill of the shared level
  void flush_virt(Pid pid, VirtualAddress v);
  void flush_phys(PhysicalAddress p);
  // Flush+Reload with the configured threshold; false positives injected per
  // the noise model.
  bool flush_reload(Pid pid, VirtualAddress v);
  void software_prefetch_op(Pid pid, VirtualAddress v, Mode mode);
  void idle_until(std::uint64_t cycle);

  // Indirect-call site with a registered set of call targets; targets flagged
  // as dereferencing read their member value as an address.
  void register_indirect_target(std::uint64_t target, bool dereferences_member);
  void indirect_call(Pid pid, std::uint64_t site, std::uint64_t target,
                     std::uint64_t member_value);

  // --- accessors ---
  std::uint64_t cycle() const { return cycle_; }
  const SimConfig& sim_config() const { return config_; }
  CacheState& cache() { return cache_; }
  const CacheState& cache() const { return cache_; }
  BranchTargetBuffer& btb() { return btb_; }
  const BranchTargetBuffer& btb() const { return btb_; }
  AddressSpace& aspace(Pid pid);
  const AddressSpace& aspace(Pid pid) const;
  bool is_vm(Pid pid) const { return vm_guests_.contains(pid); }
  std::uint64_t register_value(Reg r) const { return regs_[static_cast<std::size_t>(r)]; }
  const RegisterFile& registers() const { return regs_; }
  const std::vector<SyscallDescriptor>& syscall_table() const { return syscall_table_; }
  const SyscallDescriptor& syscall(int nr) const;           // throws ConfigError
  std::optional<int> syscall_by_name(std::string_view name) const;
  std::uint8_t read_phys(PhysicalAddress p) const;
  const MachineCounters& counters() const { return counters_; }
  std::uint64_t probe_round_trip() const;

  void set_logging(bool enabled) { logging_ = enabled; }
  bool logging() const { return logging_; }
  const std::vector<Event>& event_log() const { return log_; }

  // Hash over registers, cache, BTB, cycle, planted memory, address spaces
  // and RNG state; replaying a log on a fresh machine reproduces it exactly.
  std::uint64_t state_fingerprint() const;

  static constexpr std::uint64_t kSyscallDispatchSite = 0x100;
  static constexpr std::uint64_t kSyscallTargetBase = 0x1000;

 private:
  AddressSpace& context_aspace(Pid pid);
  bool speculation_enabled() const;
  bool chance(double p);
  void log(Event e);
  void speculative_dereference(const AddressSpace& as, std::uint64_t value, SpecOrigin origin,
                               std::string_view detail);
  void architectural_handler_deref(const AddressSpace& as, std::uint64_t value,
                                   std::string_view detail);
  std::uint64_t handler_target(int nr) const;
  std::optional<int> nr_from_target(std::uint64_t target) const;

  SimConfig config_;
  RegisterFile regs_{};
  CacheState cache_;
  BranchTargetBuffer btb_;
  AddressSpace kernel_aspace_;
  std::map<Pid, AddressSpace> user_aspaces_;
  std::set<Pid> vm_guests_;
  std::vector<SyscallDescriptor> syscall_table_;
  std::unordered_map<std::uint64_t, std::uint8_t> phys_memory_;
  std::set<std::uint64_t> host_sensitive_lines_;
  std::map<std::uint64_t, bool> indirect_targets_;  // target id -> dereferences member
  std::mt19937_64 rng_;
  std::uint64_t cycle_ = 0;
  bool logging_ = false;
  std::vector<Event> log_;
  MachineCounters counters_;
};

}  // namespace specderef
