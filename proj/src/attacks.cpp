#include "specderef/attacks.hpp"

#include <algorithm>
#include <sstream>

#include "specderef/errors.hpp"
#include "specderef/gadget_presets.hpp"

namespace specderef {

namespace {

constexpr std::uint64_t kTypeConfusionSiteId = 0x300;
constexpr std::uint64_t kDummyPrintTarget = 0x310;
constexpr std::uint64_t kSecretPrintTarget = 0x311;

// Trap geometry over the 32-bit value space: 2^20 pages cover it, and the
// paper's schedule needs exactly 20 rounds (round 0 gives bit 31 plus the
// line offset bits 6..11, rounds 1..19 give bits 30..12).
constexpr std::uint64_t kTrapTotalPages = std::uint64_t{1} << 20;
constexpr int kTrapRounds = 20;

}  // namespace

std::string bytes_to_hex(std::span<const std::optional<std::uint8_t>> bytes) {
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(bytes.size() * 2);
  for (const auto& b : bytes) {
    if (b) {
      out += kHex[*b >> 4];
      out += kHex[*b & 0xF];
    } else {
      out += "??";
    }
  }
  return out;
}

std::string bytes_to_hex(std::span<const std::uint8_t> bytes) {
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(bytes.size() * 2);
  for (std::uint8_t b : bytes) {
    out += kHex[b >> 4];
    out += kHex[b & 0xF];
  }
  return out;
}

SyscallGadgetSequence default_gadget_sequence(const MachineState& m, TriggerKind trigger) {
  const GadgetPreset& preset = find_gadget_preset(m.sim_config().gadget_preset);
  SyscallGadgetSequence seq;
  seq.mistrain_nr = preset.mistrain_nr;
  seq.trigger_nr = preset.trigger_nr;
  seq.registers = trigger == TriggerKind::Interrupt
                      ? RegSet::of({Reg::r8, Reg::r9, Reg::r10, Reg::r11, Reg::r12, Reg::r13,
                                    Reg::r14, Reg::r15})
                      : preset.gadget_registers;
  seq.trigger = trigger;
  return seq;
}

void run_gadget_round(MachineState& m, Pid pid, const SyscallGadgetSequence& seq,
                      std::uint64_t value) {
  if (seq.trigger == TriggerKind::Syscall) {
    // The mistrain call runs with clean registers so only the later transient
    // window sees the attacker-chosen value.
    m.fill_registers(seq.registers, 0);
    m.do_syscall(pid, seq.mistrain_nr);
    m.fill_registers(seq.registers, value);
    m.do_syscall(pid, seq.trigger_nr);
  } else {
    m.fill_registers(seq.registers, value);
    m.deliver_interrupt(pid);
  }
}

std::optional<PhysicalAddress> address_translation_attack(MachineState& m, Pid pid,
                                                          VirtualAddress v,
                                                          const FrameRange& guesses,
                                                          const SyscallGadgetSequence& seq,
                                                          int repetitions) {
  const TranslateResult mapped = m.aspace(pid).translate(v, Mode::User, false);
  if (!translated(mapped)) {
    throw ConfigError("address_translation_attack: v is not user-mapped");
  }
  const std::uint64_t offset = page_offset(v);
  const AddressSpace& as = m.aspace(pid);

  for (std::uint64_t g = guesses.first_frame; g < guesses.first_frame + guesses.frame_count;
       ++g) {
    const PhysicalAddress guess{g * kPageSize + offset};
    if (guess.value >= as.physical_memory_size()) {
      break;
    }
    const std::uint64_t guess_dpm = as.dpm_address(guess).value;
    for (int rep = 0; rep < repetitions; ++rep) {
      m.flush_virt(pid, v);
      run_gadget_round(m, pid, seq, guess_dpm);
      if (m.flush_reload(pid, v)) {
        return guess;
      }
    }
  }
  return std::nullopt;
}

CovertChannel covert_channel_setup(MachineState& m, Pid receiver_pid, VirtualAddress receiver_va,
                                   PhysicalAddress receiver_page, std::uint64_t window,
                                   std::uint32_t line_index) {
  if (window < m.probe_round_trip()) {
    throw ConfigError("covert channel: window shorter than one probe round-trip");
  }
  if (line_index >= m.cache().lines_per_page()) {
    throw ConfigError("covert channel: line index beyond the receiver page");
  }
  CovertChannel chan;
  chan.receiver_pid = receiver_pid;
  chan.receiver_va = receiver_va;
  chan.receiver_page = receiver_page;
  chan.window = window;
  chan.line_index = line_index;
  chan.gadget = default_gadget_sequence(m);
  chan.epoch_start = m.cycle();
  return chan;
}

void covert_send(MachineState& m, CovertChannel& chan, bool bit) {
  const std::uint64_t window_end = chan.epoch_start + (chan.bits_elapsed + 1) * chan.window;
  const std::uint64_t probe_point = window_end - m.probe_round_trip();
  if (bit) {
    const std::uint64_t line_size = m.cache().config().line_size;
    const PhysicalAddress target{chan.receiver_page.value + chan.line_index * line_size};
    const std::uint64_t dpm = m.aspace(chan.receiver_pid).dpm_address(target).value;
    const std::uint64_t round_cost = m.syscall(chan.gadget.mistrain_nr).latency +
                                     m.syscall(chan.gadget.trigger_nr).latency;
    while (m.cycle() + round_cost <= probe_point) {
      run_gadget_round(m, chan.receiver_pid, chan.gadget, dpm);
    }
  }
  m.idle_until(probe_point);
}

bool covert_receive(MachineState& m, CovertChannel& chan) {
  const std::uint64_t line_size = m.cache().config().line_size;
  const VirtualAddress probe_va{chan.receiver_va.value + chan.line_index * line_size};
  const bool bit = m.flush_reload(chan.receiver_pid, probe_va);
  const std::uint64_t window_end = chan.epoch_start + (chan.bits_elapsed + 1) * chan.window;
  m.idle_until(window_end);
  ++chan.bits_elapsed;
  return bit;
}

CovertBenchmarkResult covert_benchmark(MachineState& m, CovertChannel& chan,
                                       std::span<const std::uint8_t> message, int runs) {
  CovertBenchmarkResult result;
  const std::uint64_t start_cycle = m.cycle();
  for (int run = 0; run < runs; ++run) {
    for (std::uint8_t byte : message) {
      for (int bit = 7; bit >= 0; --bit) {
        const bool sent = (byte >> bit) & 1;
        covert_send(m, chan, sent);
        const bool received = covert_receive(m, chan);
        ++result.bits_transmitted;
        if (received != sent) {
          ++result.bit_errors;
        }
      }
    }
  }
  const std::uint64_t elapsed = m.cycle() - start_cycle;
  result.error_rate = result.bits_transmitted == 0
                          ? 0.0
                          : static_cast<double>(result.bit_errors) /
                                static_cast<double>(result.bits_transmitted);
  result.bits_per_kilocycle =
      elapsed == 0 ? 0.0
                   : 1000.0 * static_cast<double>(result.bits_transmitted) /
                         static_cast<double>(elapsed);
  return result;
}

TrapOutcome dereference_trap(MachineState& m, Pid attacker, PhysicalAddress p1,
                             PhysicalAddress p2, const SpecDerefGadget& gadget) {
  TrapOutcome outcome;
  const std::uint64_t line_size = m.cache().config().line_size;
  const std::uint64_t lines_per_page = m.cache().lines_per_page();

  // Probe mappings of the two trap pages, placed outside the covered 32-bit
  // region so they never alias the trap mappings themselves.
  const VirtualAddress probe1{std::uint64_t{1} << 40};
  const VirtualAddress probe2{(std::uint64_t{1} << 40) + kPageSize};
  m.map_page(attacker, probe1, p1, true);
  m.map_page(attacker, probe2, p2, true);

  std::uint64_t region_first_page = 0;       // of the covered 32-bit space
  std::uint64_t region_pages = kTrapTotalPages;
  std::uint32_t value = 0;

  for (int round = 0; round < kTrapRounds; ++round) {
    m.map_shared_range(attacker, VirtualAddress{region_first_page * kPageSize}, region_pages, p1,
                       p2);

    for (std::uint64_t i = 0; i < lines_per_page; ++i) {
      m.flush_phys(PhysicalAddress{p1.value + i * line_size});
      m.flush_phys(PhysicalAddress{p2.value + i * line_size});
    }

    gadget(m);

    std::optional<TrapRound> hit;
    int hits = 0;
    for (int page = 0; page < 2; ++page) {
      const VirtualAddress base = page == 0 ? probe1 : probe2;
      for (std::uint64_t i = 0; i < lines_per_page; ++i) {
        ++outcome.probes;
        if (m.flush_reload(attacker, VirtualAddress{base.value + i * line_size})) {
          ++hits;
          if (!hit) {
            hit = TrapRound{round, page == 1, static_cast<std::uint32_t>(i)};
          }
        }
      }
    }

    m.unmap_range(attacker, VirtualAddress{region_first_page * kPageSize}, region_pages);

    if (hits == 0) {
      outcome.rounds = round + 1;
      outcome.diagnostic = "no cache hit: gadget inactive or secret outside the mapped region";
      return outcome;
    }
    if (hits > 1) {
      outcome.rounds = round + 1;
      outcome.diagnostic = "ambiguous probe: multiple lines hit in one round";
      return outcome;
    }

    outcome.schedule.push_back(*hit);
    if (round == 0) {
      if (hit->hit_second_page) {
        value |= 1u << 31;
      }
      value |= hit->line << 6;
    } else if (hit->hit_second_page) {
      value |= 1u << (31 - round);
    }

    const std::uint64_t half = region_pages / 2;
    region_first_page += hit->hit_second_page ? half : 0;
    region_pages = half;
  }

  outcome.success = true;
  outcome.recovered = value;
  outcome.rounds = kTrapRounds;
  return outcome;
}

TypeConfusionSite install_type_confusion_site(MachineState& m, Pid pid,
                                              VirtualAddress dummy_data) {
  TypeConfusionSite site;
  site.pid = pid;
  site.site = kTypeConfusionSiteId;
  site.dummy_target = kDummyPrintTarget;
  site.secret_target = kSecretPrintTarget;
  site.dummy_member = dummy_data.value;
  m.register_indirect_target(site.dummy_target, /*dereferences_member=*/true);
  m.register_indirect_target(site.secret_target, /*dereferences_member=*/false);
  return site;
}

void call_virtual(MachineState& m, TypeConfusionSite& site, ObjectKind object,
                  std::uint64_t member_value) {
  const std::uint64_t target =
      object == ObjectKind::Dummy ? site.dummy_target : site.secret_target;
  m.indirect_call(site.pid, site.site, target, member_value);
}

SpecDerefGadget make_type_confusion_gadget(TypeConfusionSite site, std::uint32_t secret) {
  return [site, secret](MachineState& m) mutable {
    // Mistrain with the dereferencing type, then call with the secret-bearing
    // one; the stale prediction dereferences the secret member.
    call_virtual(m, site, ObjectKind::Dummy, site.dummy_member);
    call_virtual(m, site, ObjectKind::Secret, secret);
  };
}

ForeshadowResult foreshadow_l3_attack(MachineState& m, Pid guest, PhysicalAddress secret_p,
                                      std::size_t length) {
  ForeshadowResult result;
  result.bytes.resize(length);
  const std::uint64_t line_size = m.cache().config().line_size;
  const AddressSpace& host = m.aspace(kKernelPid);
  const RegSet interrupt_regs = RegSet::of(
      {Reg::r8, Reg::r9, Reg::r10, Reg::r11, Reg::r12, Reg::r13, Reg::r14, Reg::r15});

  for (std::uint64_t offset = 0; offset < length; offset += line_size) {
    const PhysicalAddress line_p{secret_p.value + offset};

    // Host activity on another physical core keeps the secret in the shared
    // level; the guest-visible L1 stays cold.
    m.remote_touch(line_p);

    // Guest hyperthread 1: host alias into every register, then an interrupt
    // whose handler may speculatively dereference them.
    m.fill_registers(interrupt_regs, host.dpm_address(line_p).value);
    m.deliver_interrupt(guest);

    // Back into the guest; the VM-entry flush policy applies here, between
    // the fill and the transient read.
    m.vm_resume(guest);

    // Guest hyperthread 2: Foreshadow on each byte of the line.
    const std::uint64_t line_end = std::min<std::uint64_t>(offset + line_size, length);
    for (std::uint64_t i = offset; i < line_end; ++i) {
      ++result.probes;
      const auto byte = m.transient_read(TransientReader::Foreshadow,
                                         PhysicalAddress{secret_p.value + i});
      if (byte && m.sim_config().mitigations.l1tf_vulnerable) {
        result.bytes[i] = byte;
      }
    }
  }
  return result;
}

bool meltdown_l3_experiment(MachineState& m, Pid pid, PhysicalAddress secret_p,
                            std::uint8_t expected, bool gadget_active,
                            const SyscallGadgetSequence& seq) {
  // Another core pins the secret into the shared level.
  m.remote_touch(secret_p);

  if (gadget_active) {
    const std::uint64_t dpm = m.aspace(pid).dpm_address(secret_p).value;
    run_gadget_round(m, pid, seq, dpm);
  }

  const auto byte = m.transient_read(TransientReader::MeltdownUS, secret_p);
  return byte.has_value() && *byte == expected;
}

}  // namespace specderef
