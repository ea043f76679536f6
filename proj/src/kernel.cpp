// Syscall, interrupt and hypercall entry paths of MachineState: the
// speculative register-dereferencing executor and the mitigation toggles
// that gate it.

#include <sstream>
#include <stdexcept>

#include "specderef/errors.hpp"
#include "specderef/machine.hpp"

namespace specderef {

namespace {

constexpr std::array<std::pair<EventKind, std::string_view>, 29> kEventNames = {{
    {EventKind::op_add_process, "op_add_process"},
    {EventKind::op_set_register, "op_set_register"},
    {EventKind::op_syscall, "op_syscall"},
    {EventKind::op_interrupt, "op_interrupt"},
    {EventKind::op_hypercall, "op_hypercall"},
    {EventKind::op_vm_resume, "op_vm_resume"},
    {EventKind::op_access, "op_access"},
    {EventKind::op_remote_touch, "op_remote_touch"},
    {EventKind::op_flush_virt, "op_flush_virt"},
    {EventKind::op_flush_phys, "op_flush_phys"},
    {EventKind::op_probe, "op_probe"},
    {EventKind::op_prefetch, "op_prefetch"},
    {EventKind::op_transient_read, "op_transient_read"},
    {EventKind::op_idle_until, "op_idle_until"},
    {EventKind::op_map_page, "op_map_page"},
    {EventKind::op_map_shared_range, "op_map_shared_range"},
    {EventKind::op_unmap_range, "op_unmap_range"},
    {EventKind::op_plant_byte, "op_plant_byte"},
    {EventKind::op_tag_host_sensitive, "op_tag_host_sensitive"},
    {EventKind::op_register_indirect_target, "op_register_indirect_target"},
    {EventKind::op_indirect_call, "op_indirect_call"},
    {EventKind::speculative_fill, "speculative_fill"},
    {EventKind::arch_fill, "arch_fill"},
    {EventKind::spec_deref_fault, "spec_deref_fault"},
    {EventKind::arch_deref_fault, "arch_deref_fault"},
    {EventKind::probe_result, "probe_result"},
    {EventKind::vmexit_register_clear, "vmexit_register_clear"},
    {EventKind::l1_flush, "l1_flush"},
    {EventKind::transient_read_result, "transient_read_result"},
}};

}  // namespace

std::string_view to_string(EventKind kind) {
  for (const auto& [k, name] : kEventNames) {
    if (k == kind) return name;
  }
  return "unknown";
}

std::optional<EventKind> event_kind_from_string(std::string_view name) {
  for (const auto& [k, n] : kEventNames) {
    if (n == name) return k;
  }
  return std::nullopt;
}

bool is_operation(EventKind kind) {
  return static_cast<std::uint8_t>(kind) <= static_cast<std::uint8_t>(EventKind::op_indirect_call);
}

// Transient load of *value in kernel mode. Faults are squashed silently; a
// successful translation leaves a cache footprint and nothing else — register
// file and address spaces are untouched.
void MachineState::speculative_dereference(const AddressSpace& as, std::uint64_t value,
                                           SpecOrigin origin, std::string_view detail) {
  const TranslateResult result =
      as.translate(VirtualAddress{value}, Mode::Kernel, config_.mitigations.smap);
  if (const auto* fault = std::get_if<Fault>(&result)) {
    ++counters_.squashed_faults;
    if (logging_) {
      std::ostringstream cause;
      cause << "origin=" << to_string(origin) << ";" << detail
            << ";fault=" << to_string(fault->kind);
      log({cycle_, EventKind::spec_deref_fault, value, 0, cause.str()});
    }
    return;
  }
  const PhysicalAddress p = std::get<PhysicalAddress>(result);
  const auto entry = as.lookup(virtual_page(VirtualAddress{value}));
  const bool user_page = entry && entry->user_accessible;
  const AccessOutcome found = cache_.access(p);
  ++counters_.speculative_fills;
  if (user_page) {
    ++counters_.speculative_fills_user_page;
  }
  if (logging_) {
    std::ostringstream cause;
    cause << "origin=" << to_string(origin) << ";" << detail << ";va=" << value
          << ";page=" << (user_page ? "user" : "kernel");
    log({cycle_, EventKind::speculative_fill, p.value, static_cast<std::uint64_t>(found.hit_level),
         cause.str()});
  }
}

// Architectural pointer use inside a handler. Kernel-half values coming from
// user registers fail the access_ok check (EFAULT); user-half values are
// accessed through the usual user-copy path, which lifts SMAP legitimately.
void MachineState::architectural_handler_deref(const AddressSpace& as, std::uint64_t value,
                                               std::string_view detail) {
  const VirtualAddress va{value};
  if (is_kernel_half(va) || !is_canonical(va)) {
    log({cycle_, EventKind::arch_deref_fault, value, 0, std::string(detail) + ";efault=1"});
    return;
  }
  const TranslateResult result = as.translate(va, Mode::Kernel, /*smap=*/false);
  if (std::holds_alternative<Fault>(result)) {
    log({cycle_, EventKind::arch_deref_fault, value, 0, std::string(detail) + ";efault=1"});
    return;
  }
  const PhysicalAddress p = std::get<PhysicalAddress>(result);
  const AccessOutcome out = cache_.access(p);
  ++counters_.arch_fills;
  cycle_ += out.latency;
  if (logging_) {
    log({cycle_, EventKind::arch_fill, p.value, static_cast<std::uint64_t>(out.hit_level),
         std::string(detail)});
  }
}

void MachineState::do_syscall(Pid pid, int nr) {
  const SyscallDescriptor& actual = syscall(nr);
  {
    std::ostringstream cause;
    cause << "pid=" << pid;
    log({cycle_, EventKind::op_syscall, static_cast<std::uint64_t>(nr), 0, cause.str()});
  }
  AddressSpace& as = context_aspace(pid);

  // Phase 1, transient: only an out-of-order core without retpoline follows
  // the stale BTB prediction into the previously dispatched handler.
  if (speculation_enabled()) {
    const auto predicted = btb_.predict(kSyscallDispatchSite);
    if (predicted && *predicted != handler_target(nr)) {
      const auto mispredicted_nr = nr_from_target(*predicted);
      if (mispredicted_nr && !config_.mitigations.register_clearing_on_syscall &&
          chance(config_.noise.speculation_probability)) {
        const SyscallDescriptor& mispredicted = syscall_table_[*mispredicted_nr];
        for (std::size_t i = 0; i < kRegCount; ++i) {
          const Reg r = static_cast<Reg>(i);
          if (mispredicted.deref_registers.contains(r)) {
            std::ostringstream detail;
            detail << "reg=" << reg_name(r) << ";handler=" << mispredicted.name;
            speculative_dereference(as, regs_[i], SpecOrigin::Syscall, detail.str());
          }
        }
      }
    }
  }

  // Phase 2, architectural: dispatch trains the BTB, then the real handler
  // uses its own argument registers.
  btb_.train(kSyscallDispatchSite, handler_target(nr));
  for (std::size_t i = 0; i < kRegCount; ++i) {
    const Reg r = static_cast<Reg>(i);
    if (actual.deref_registers.contains(r)) {
      std::ostringstream detail;
      detail << "handler=" << actual.name << ";reg=" << reg_name(r);
      architectural_handler_deref(as, regs_[i], detail.str());
    }
  }
  cycle_ += actual.latency;
}

void MachineState::deliver_interrupt(Pid pid) {
  {
    std::ostringstream cause;
    cause << "pid=" << pid;
    log({cycle_, EventKind::op_interrupt, 0, 0, cause.str()});
  }
  AddressSpace& as = context_aspace(pid);

  // The entry path clears r8-r15 but their values sit on the stack and are
  // restored afterwards; the transient window dereferences those stacked
  // values, so clearing does not protect this path.
  if (speculation_enabled()) {
    for (std::size_t i = static_cast<std::size_t>(Reg::r8);
         i <= static_cast<std::size_t>(Reg::r15); ++i) {
      if (chance(config_.noise.speculation_probability)) {
        std::ostringstream detail;
        detail << "reg=" << reg_name(static_cast<Reg>(i));
        speculative_dereference(as, regs_[i], SpecOrigin::Interrupt, detail.str());
      }
    }
  }
  cycle_ += config_.interrupt_latency;
}

void MachineState::vm_hypercall(Pid guest, const RegisterFile& args) {
  if (!vm_guests_.contains(guest)) {
    throw ConfigError("vm_hypercall: pid is not a registered VM guest");
  }
  if (logging_) {
    std::ostringstream cause;
    cause << "pid=" << guest << ";args=";
    for (std::size_t i = 0; i < kRegCount; ++i) {
      if (i != 0) cause << ',';
      cause << args[i];
    }
    log({cycle_, EventKind::op_hypercall, 0, 0, cause.str()});
  }

  if (config_.mitigations.register_clearing_on_vmexit) {
    // Guest-clobbered registers are zeroed before any host code can
    // misspeculate on them.
    log({cycle_, EventKind::vmexit_register_clear, 0, 0, "pid-cleared=guest"});
  } else if (speculation_enabled() && !config_.hypercall_gadget_registers.empty() &&
             chance(config_.noise.speculation_probability)) {
    // Hypothetical host-side gadget: current hypervisors were found clean, so
    // a non-empty register set here models the pre-patch case. Fills are
    // labeled accordingly.
    for (std::size_t i = 0; i < kRegCount; ++i) {
      const Reg r = static_cast<Reg>(i);
      if (config_.hypercall_gadget_registers.contains(r)) {
        std::ostringstream detail;
        detail << "reg=" << reg_name(r) << ";gadget=hypothetical";
        speculative_dereference(kernel_aspace_, args[i], SpecOrigin::Hypercall, detail.str());
      }
    }
  }
  cycle_ += kHypercallLatency;
  vm_resume(guest);
}

void MachineState::vm_resume(Pid guest) {
  {
    std::ostringstream cause;
    cause << "pid=" << guest;
    log({cycle_, EventKind::op_vm_resume, 0, 0, cause.str()});
  }
  switch (config_.mitigations.l1d_flush_on_vmentry) {
    case L1dFlushPolicy::Always:
      cache_.flush_level(CacheLevel::L1);
      log({cycle_, EventKind::l1_flush, 0, 0, "policy=always"});
      break;
    case L1dFlushPolicy::Conditional: {
      // Only lines the scenario tagged host-sensitive are flushed; the
      // regular case keeps the L1 intact.
      std::uint64_t flushed = 0;
      for (std::uint64_t line : host_sensitive_lines_) {
        const PhysicalAddress p{line * config_.cache.line_size};
        if (cache_.contains(CacheLevel::L1, p)) {
          cache_.flush_line_from_level(CacheLevel::L1, p);
          ++flushed;
        }
      }
      if (logging_) {
        std::ostringstream cause;
        cause << "policy=conditional;flushed=" << flushed;
        log({cycle_, EventKind::l1_flush, 0, 0, cause.str()});
      }
      break;
    }
    case L1dFlushPolicy::None:
      break;
  }
  cycle_ += kVmResumeLatency;
}

std::optional<std::uint8_t> MachineState::transient_read(TransientReader reader,
                                                         PhysicalAddress p) {
  {
    std::ostringstream cause;
    cause << "reader=" << to_string(reader);
    log({cycle_, EventKind::op_transient_read, p.value, 0, cause.str()});
  }
  const bool vulnerable = reader == TransientReader::Foreshadow
                              ? config_.mitigations.l1tf_vulnerable
                              : config_.mitigations.meltdown_us_vulnerable;
  std::optional<std::uint8_t> result;
  std::string_view note;
  if (!vulnerable) {
    // In-silicon patches serve zeros for the faulting load.
    result = std::uint8_t{0};
    note = "hw-zero";
  } else if (cache_.contains(CacheLevel::L1, p)) {
    result = read_phys(p);
    note = "l1-hit";
  } else {
    note = "not-in-l1";
  }
  cycle_ += kTransientReadLatency;
  if (logging_) {
    std::ostringstream cause;
    cause << "reader=" << to_string(reader) << ";outcome=" << note;
    if (result) {
      cause << ";value=" << static_cast<unsigned>(*result);
    }
    log({cycle_, EventKind::transient_read_result, p.value, 0, cause.str()});
  }
  return result;
}

AccessOutcome MachineState::access(Pid pid, VirtualAddress v, Mode mode) {
  {
    std::ostringstream cause;
    cause << "pid=" << pid << ";mode=" << (mode == Mode::User ? "user" : "kernel");
    log({cycle_, EventKind::op_access, v.value, 0, cause.str()});
  }
  const TranslateResult result = aspace(pid).translate(v, mode, config_.mitigations.smap);
  if (const auto* fault = std::get_if<Fault>(&result)) {
    throw std::runtime_error("architectural access faulted: " +
                             std::string(to_string(fault->kind)));
  }
  const PhysicalAddress p = std::get<PhysicalAddress>(result);
  const AccessOutcome out = cache_.access(p);
  ++counters_.arch_fills;
  cycle_ += out.latency;
  if (logging_) {
    log({cycle_, EventKind::arch_fill, p.value, static_cast<std::uint64_t>(out.hit_level),
         "origin=program"});
  }
  return out;
}

void MachineState::remote_touch(PhysicalAddress p) {
  log({cycle_, EventKind::op_remote_touch, p.value, 0, ""});
  cache_.install_remote(p);
  // Runs on another physical core; costs no local cycles.
}

void MachineState::flush_virt(Pid pid, VirtualAddress v) {
  {
    std::ostringstream cause;
    cause << "pid=" << pid;
    log({cycle_, EventKind::op_flush_virt, v.value, 0, cause.str()});
  }
  const TranslateResult result = aspace(pid).translate(v, Mode::User, false);
  if (const auto* p = std::get_if<PhysicalAddress>(&result)) {
    cache_.flush(*p);
  }
  cycle_ += kFlushLatency;
}

void MachineState::flush_phys(PhysicalAddress p) {
  log({cycle_, EventKind::op_flush_phys, p.value, 0, ""});
  cache_.flush(p);
  cycle_ += kFlushLatency;
}

bool MachineState::flush_reload(Pid pid, VirtualAddress v) {
  {
    std::ostringstream cause;
    cause << "pid=" << pid;
    log({cycle_, EventKind::op_probe, v.value, 0, cause.str()});
  }
  const TranslateResult result = aspace(pid).translate(v, Mode::User, false);
  if (std::holds_alternative<Fault>(result)) {
    throw ConfigError("flush_reload: probed virtual address is not user-mapped");
  }
  const PhysicalAddress p = std::get<PhysicalAddress>(result);
  const ProbeOutcome probe = cache_.flush_reload_probe(p, config_.probe_threshold);
  bool hit = probe.hit;
  bool injected = false;
  if (!hit && chance(config_.noise.fp_rate)) {
    hit = true;  // stray Flush+Reload false positive
    injected = true;
  }
  cycle_ += probe.access.latency + kFlushLatency;
  if (logging_) {
    std::ostringstream cause;
    cause << "hit=" << (hit ? 1 : 0) << ";latency=" << probe.access.latency;
    if (injected) {
      cause << ";noise=fp";
    }
    log({cycle_, EventKind::probe_result, p.value,
         static_cast<std::uint64_t>(probe.access.hit_level), cause.str()});
  }
  return hit;
}

void MachineState::software_prefetch_op(Pid pid, VirtualAddress v, Mode mode) {
  {
    std::ostringstream cause;
    cause << "pid=" << pid << ";mode=" << (mode == Mode::User ? "user" : "kernel");
    log({cycle_, EventKind::op_prefetch, v.value, 0, cause.str()});
  }
  software_prefetch(cache_, aspace(pid), v, mode, config_.mitigations.smap);
  cycle_ += kPrefetchLatency;
}

void MachineState::idle_until(std::uint64_t cycle) {
  log({cycle_, EventKind::op_idle_until, cycle, 0, ""});
  if (cycle > cycle_) {
    cycle_ = cycle;
  }
}

void MachineState::register_indirect_target(std::uint64_t target, bool dereferences_member) {
  std::ostringstream cause;
  cause << "derefs=" << (dereferences_member ? 1 : 0);
  log({cycle_, EventKind::op_register_indirect_target, target, 0, cause.str()});
  indirect_targets_[target] = dereferences_member;
}

void MachineState::indirect_call(Pid pid, std::uint64_t site, std::uint64_t target,
                                 std::uint64_t member_value) {
  const auto target_it = indirect_targets_.find(target);
  if (target_it == indirect_targets_.end()) {
    throw ConfigError("indirect_call: unregistered call target");
  }
  {
    std::ostringstream cause;
    cause << "pid=" << pid << ";site=" << site << ";member=" << member_value;
    log({cycle_, EventKind::op_indirect_call, target, 0, cause.str()});
  }
  AddressSpace& as = context_aspace(pid);

  // A stale prediction executes the previous object's virtual function with
  // the current object's member: type confusion under speculation.
  if (speculation_enabled()) {
    const auto predicted = btb_.predict(site);
    if (predicted && *predicted != target &&
        chance(config_.noise.speculation_probability)) {
      const auto predicted_it = indirect_targets_.find(*predicted);
      if (predicted_it != indirect_targets_.end() && predicted_it->second) {
        std::ostringstream detail;
        detail << "site=" << site;
        speculative_dereference(as, member_value, SpecOrigin::IndirectCall, detail.str());
      }
    }
  }

  btb_.train(site, target);
  if (target_it->second) {
    std::ostringstream detail;
    detail << "target=" << target;
    architectural_handler_deref(as, member_value, detail.str());
  }
  cycle_ += 50;  // call + return
}

}  // namespace specderef
