#include "specderef/scenario.hpp"

#include <algorithm>
#include <array>
#include <cstdio>
#include <random>
#include <sstream>

#include "specderef/errors.hpp"
#include "specderef/gadget_presets.hpp"

namespace specderef {

double f1_score(const ConfusionCounts& c) {
  if (c.tp + c.fp == 0 || c.tp + c.fn == 0) {
    return 0.0;
  }
  const double precision = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp);
  const double recall = static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
  if (precision + recall == 0.0) {
    return 0.0;
  }
  return 2.0 * precision * recall / (precision + recall);
}

std::string format_metric(double value) {
  char buffer[64];
  std::snprintf(buffer, sizeof(buffer), "%.6g", value);
  return buffer;
}

std::string format_metric(std::uint64_t value) { return std::to_string(value); }

bool syscall_leak_expected(const MitigationConfig& m) {
  return !m.spectre_btb && m.cpu_order == CpuOrder::OutOfOrder &&
         !m.register_clearing_on_syscall;
}

bool interrupt_leak_expected(const MitigationConfig& m) {
  return !m.spectre_btb && m.cpu_order == CpuOrder::OutOfOrder;
}

namespace {

constexpr std::uint64_t kVictimVa = 0x5550'0000'0000ULL;
constexpr std::uint64_t kScratchVa = 0x6660'0000'0000ULL;

struct Runner {
  const ExperimentConfig& cfg;
  bool capture = false;
  ScenarioOutcome out;
  std::mt19937_64 rng;

  explicit Runner(const ExperimentConfig& config)
      : cfg(config), rng(config.sim.seed * 0x9E3779B97F4A7C15ULL + 0x1234) {}

  bool deterministic() const {
    return cfg.sim.noise.fp_rate == 0.0 && cfg.sim.noise.speculation_probability >= 1.0;
  }

  void check(bool condition, const std::string& what) {
    if (!condition) {
      out.passed = false;
      out.failures.push_back(what);
    }
  }

  void row(const std::string& metric, const std::string& value) {
    out.rows.push_back(MetricRow{std::string(to_string(cfg.scenario)),
                                 cfg.sim.mitigations.fingerprint(), cfg.sim.seed, metric, value});
  }

  void attach_report(const AttackReport& report) {
    out.report = report;
    row("success", format_metric(static_cast<std::uint64_t>(report.success ? 1 : 0)));
  }

  void attach_counts(const ConfusionCounts& counts) {
    out.counts = counts;
    row("tp", format_metric(counts.tp));
    row("fp", format_metric(counts.fp));
    row("tn", format_metric(counts.tn));
    row("fn", format_metric(counts.fn));
    row("f1_total", format_metric(f1_score(counts)));
  }

  std::uint64_t random_frame(const MachineState& m) {
    const std::uint64_t frames = m.sim_config().physical_memory_size / kPageSize;
    return 1 + rng() % (frames - 1);
  }

  MachineState make_machine(bool log = false) {
    MachineState m(cfg.sim);
    m.set_logging(log || capture);
    return m;
  }

  void finalize_export(MachineState& m) {
    if (!capture || out.exported_log) {
      return;
    }
    ExportedLog log;
    log.config_text = cfg.serialize();
    log.events = m.event_log();
    log.final_fingerprint = m.state_fingerprint();
    out.exported_log = log;
  }

  std::uint64_t fills_of_line(const MachineState& m, PhysicalAddress p) const {
    const std::uint64_t line = m.cache().line_of(p);
    std::uint64_t count = 0;
    for (const Event& e : m.event_log()) {
      if (e.kind == EventKind::speculative_fill &&
          e.address / m.cache().config().line_size == line) {
        ++count;
      }
    }
    return count;
  }
};

struct PlantedPage {
  VirtualAddress va;
  PhysicalAddress page;
};

PlantedPage plant_user_page(Runner& r, MachineState& m, Pid pid, std::uint64_t va) {
  const std::uint64_t frame = r.random_frame(m);
  const PlantedPage planted{VirtualAddress{va}, PhysicalAddress{frame * kPageSize}};
  m.map_page(pid, planted.va, planted.page, /*user_accessible=*/true);
  return planted;
}

// --- H1: removing the prefetch instruction changes nothing ---

struct FillProtocolResult {
  std::uint64_t spec_fills = 0;
  std::uint64_t probe_hits = 0;
};

FillProtocolResult run_fill_protocol(MachineState& m, Pid pid, const PlantedPage& planted,
                                     int rounds, bool with_prefetch) {
  const SyscallGadgetSequence seq = default_gadget_sequence(m);
  const std::uint64_t dpm = m.aspace(pid).dpm_address(planted.page).value;
  FillProtocolResult result;
  const std::uint64_t before = m.counters().speculative_fills;
  for (int i = 0; i < rounds; ++i) {
    m.flush_virt(pid, planted.va);
    if (with_prefetch) {
      // The original attack's hint: a user-mode prefetch of the kernel-half
      // alias. Translation faults, so the hint fetches nothing.
      m.software_prefetch_op(pid, VirtualAddress{dpm}, Mode::User);
    }
    run_gadget_round(m, pid, seq, dpm);
    if (m.flush_reload(pid, planted.va)) {
      ++result.probe_hits;
    }
  }
  result.spec_fills = m.counters().speculative_fills - before;
  return result;
}

void run_h1(Runner& r) {
  const int rounds = std::max(1, r.cfg.repetitions);

  MachineState with_prefetch = r.make_machine(true);
  with_prefetch.add_process(1);
  const PlantedPage planted = plant_user_page(r, with_prefetch, 1, kVictimVa);
  const FillProtocolResult a = run_fill_protocol(with_prefetch, 1, planted, rounds, true);

  MachineState without_prefetch = r.make_machine(true);
  without_prefetch.add_process(1);
  without_prefetch.map_page(1, planted.va, planted.page, true);
  const FillProtocolResult b = run_fill_protocol(without_prefetch, 1, planted, rounds, false);

  r.row("fills_with_prefetch", format_metric(a.spec_fills));
  r.row("fills_without_prefetch", format_metric(b.spec_fills));
  r.row("hits_with_prefetch", format_metric(a.probe_hits));
  r.row("hits_without_prefetch", format_metric(b.probe_hits));
  r.check(a.spec_fills == b.spec_fills, "prefetch op must not change the fill count");
  if (r.deterministic()) {
    r.check(a.probe_hits == b.probe_hits, "prefetch op must not change the probe outcome");
  }

  // The hint itself works on accessible memory; it only ignores addresses the
  // issuing mode cannot translate.
  MachineState sanity = r.make_machine();
  sanity.add_process(1);
  const PlantedPage own = plant_user_page(r, sanity, 1, kVictimVa);
  sanity.software_prefetch_op(1, own.va, Mode::User);
  r.check(sanity.flush_reload(1, own.va), "prefetch of an accessible user page must cache it");

  r.finalize_export(without_prefetch);
}

// --- H2: only register contents reach the transient dereferencer ---

void run_h2(Runner& r) {
  MachineState m = r.make_machine(true);
  m.add_process(1);
  const PlantedPage in_registers = plant_user_page(r, m, 1, kVictimVa);
  std::uint64_t other_frame = r.random_frame(m);
  while (other_frame * kPageSize == in_registers.page.value) {
    other_frame = r.random_frame(m);
  }
  // The second target exists only as a constant in the attacker's code
  // (IP-relative / immediate addressing); it is never written to a register.
  const PhysicalAddress ip_relative_target{other_frame * kPageSize};

  const SyscallGadgetSequence seq = default_gadget_sequence(m);
  const std::uint64_t dpm = m.aspace(1).dpm_address(in_registers.page).value;
  const int rounds = std::max(1, r.cfg.repetitions);
  for (int i = 0; i < rounds; ++i) {
    run_gadget_round(m, 1, seq, dpm);
  }

  const std::uint64_t fills_registers = r.fills_of_line(m, in_registers.page);
  const std::uint64_t fills_ip_relative = r.fills_of_line(m, ip_relative_target);
  r.row("fills_register_target", format_metric(fills_registers));
  r.row("fills_ip_relative_target", format_metric(fills_ip_relative));
  if (syscall_leak_expected(r.cfg.sim.mitigations) &&
      r.cfg.sim.noise.speculation_probability >= 1.0) {
    r.check(fills_registers > 0, "register-held kernel address must be filled");
  }
  if (!syscall_leak_expected(r.cfg.sim.mitigations)) {
    r.check(fills_registers == 0, "mitigated configuration must not fill");
  }
  r.check(fills_ip_relative == 0, "address never held in a register must never fill");
  r.finalize_export(m);
}

// --- H3: no kernel entry, no fills ---

void run_h3(Runner& r) {
  MachineState quiet = r.make_machine(true);
  quiet.add_process(1);
  const PlantedPage planted = plant_user_page(r, quiet, 1, kVictimVa);
  const SyscallGadgetSequence seq = default_gadget_sequence(quiet);
  const std::uint64_t dpm = quiet.aspace(1).dpm_address(planted.page).value;

  quiet.flush_virt(1, planted.va);
  quiet.fill_registers(seq.registers, dpm);
  quiet.idle_until(quiet.cycle() + 1'000'000);
  r.row("fills_without_kernel_entry", format_metric(quiet.counters().speculative_fills));
  r.check(quiet.counters().speculative_fills == 0,
          "register filling alone must not fetch anything");
  if (r.cfg.sim.noise.fp_rate == 0.0) {
    r.check(!quiet.flush_reload(1, planted.va), "line must stay uncached without kernel entry");
  }

  MachineState active = r.make_machine(true);
  active.add_process(1);
  active.map_page(1, planted.va, planted.page, true);
  const int rounds = std::max(1, r.cfg.repetitions);
  for (int i = 0; i < rounds; ++i) {
    run_gadget_round(active, 1, seq, dpm);
  }
  r.row("fills_with_syscalls", format_metric(active.counters().speculative_fills));
  if (syscall_leak_expected(r.cfg.sim.mitigations) &&
      r.cfg.sim.noise.speculation_probability >= 1.0) {
    r.check(active.counters().speculative_fills > 0, "syscalls must leak when unmitigated");
  }
  r.finalize_export(quiet);
}

// --- H4: the transient dereferencer adheres to SMAP ---

void run_h4(Runner& r) {
  const auto run_arm = [&r](bool smap_on) {
    ExperimentConfig armed = r.cfg;
    armed.sim.mitigations.smap = smap_on;
    MachineState m(armed.sim);
    m.add_process(1);
    const std::uint64_t frame = r.random_frame(m);
    const PhysicalAddress user_page{frame * kPageSize};
    const VirtualAddress user_va{kVictimVa};
    m.map_page(1, user_va, user_page, true);

    // The register holds the user-space virtual address itself: a kernel-mode
    // transient dereference of user memory.
    const SyscallGadgetSequence seq = default_gadget_sequence(m);
    const int rounds = std::max(1, r.cfg.repetitions);
    for (int i = 0; i < rounds; ++i) {
      run_gadget_round(m, 1, seq, user_va.value);
    }
    return m.counters().speculative_fills_user_page;
  };

  const std::uint64_t fills_smap_on = run_arm(true);
  const std::uint64_t fills_smap_off = run_arm(false);
  r.row("user_fills_smap_on", format_metric(fills_smap_on));
  r.row("user_fills_smap_off", format_metric(fills_smap_off));
  r.check(fills_smap_on == 0, "SMAP must block user-address fills");
  MitigationConfig unsmapped = r.cfg.sim.mitigations;
  unsmapped.smap = false;
  if (syscall_leak_expected(unsmapped) && r.cfg.sim.noise.speculation_probability >= 1.0) {
    r.check(fills_smap_off > 0, "user-address fills must appear once SMAP is off");
  }
}

// --- H5: an in-order core never follows the stale prediction ---

void run_h5(Runner& r) {
  const auto run_arm = [&r](CpuOrder order) {
    ExperimentConfig armed = r.cfg;
    armed.sim.mitigations.cpu_order = order;
    MachineState m(armed.sim);
    m.add_process(1);
    const std::uint64_t frame = r.random_frame(m);
    const PhysicalAddress page{frame * kPageSize};
    const SyscallGadgetSequence seq = default_gadget_sequence(m);
    const std::uint64_t dpm = m.aspace(1).dpm_address(page).value;
    const int rounds = std::max(1, r.cfg.repetitions);
    for (int i = 0; i < rounds; ++i) {
      run_gadget_round(m, 1, seq, dpm);
    }
    return m.counters().speculative_fills;
  };

  const std::uint64_t fills_in_order = run_arm(CpuOrder::InOrder);
  const std::uint64_t fills_out_of_order = run_arm(CpuOrder::OutOfOrder);
  r.row("fills_in_order", format_metric(fills_in_order));
  r.row("fills_out_of_order", format_metric(fills_out_of_order));
  r.check(fills_in_order == 0, "an in-order core must never fill speculatively");
  MitigationConfig ooo = r.cfg.sim.mitigations;
  ooo.cpu_order = CpuOrder::OutOfOrder;
  if (syscall_leak_expected(ooo) && r.cfg.sim.noise.speculation_probability >= 1.0) {
    r.check(fills_out_of_order > 0, "the out-of-order arm must leak when unmitigated");
  }
}

// --- address-translation attack ---

void run_addr_translate(Runner& r) {
  MachineState m = r.make_machine();
  m.add_process(1);
  const SyscallGadgetSequence seq = default_gadget_sequence(m);
  const std::uint64_t frames = m.sim_config().physical_memory_size / kPageSize;
  const int pairs = 3;

  int recovered = 0;
  int wrong = 0;
  AttackReport report;
  report.attack = "addr_translate";
  report.config_fingerprint = r.cfg.sim.mitigations.fingerprint();
  const std::uint64_t start_cycle = m.cycle();

  for (int i = 0; i < pairs; ++i) {
    const std::uint64_t va = kVictimVa + static_cast<std::uint64_t>(i) * 0x10000;
    const PlantedPage planted = plant_user_page(r, m, 1, va);
    const auto result = address_translation_attack(m, 1, planted.va, FrameRange{0, frames}, seq,
                                                   r.cfg.repetitions);
    if (result) {
      if (*result == planted.page) {
        ++recovered;
      } else {
        ++wrong;
      }
      std::ostringstream hex;
      hex << std::hex << result->value;
      report.recovered = hex.str();
    }
  }
  report.simulated_cycles = m.cycle() - start_cycle;
  report.success = recovered == pairs && wrong == 0;

  r.row("pairs", format_metric(static_cast<std::uint64_t>(pairs)));
  r.row("recovered", format_metric(static_cast<std::uint64_t>(recovered)));
  r.row("wrong", format_metric(static_cast<std::uint64_t>(wrong)));
  if (r.cfg.sim.noise.fp_rate == 0.0) {
    r.check(wrong == 0, "the attack must never report a wrong physical address");
  }
  const bool leak = syscall_leak_expected(r.cfg.sim.mitigations);
  if (leak && r.cfg.sim.noise.speculation_probability >= 1.0) {
    r.check(recovered == pairs, "deterministic unmitigated attack must recover every pair");
  }
  if (!leak && r.cfg.sim.noise.fp_rate == 0.0) {
    r.check(recovered == 0, "mitigated attack must recover nothing");
  }
  r.attach_report(report);
  r.finalize_export(m);
}

// --- covert channel ---

void run_covert(Runner& r) {
  MachineState m = r.make_machine();
  m.add_process(1);
  const PlantedPage page = plant_user_page(r, m, 1, kVictimVa);
  const std::uint64_t window =
      r.cfg.covert.window != 0 ? r.cfg.covert.window : 4 * m.probe_round_trip();
  CovertChannel chan =
      covert_channel_setup(m, 1, page.va, page.page, window, r.cfg.covert.line_index);

  std::vector<std::uint8_t> message(r.cfg.covert.message_bytes);
  for (auto& byte : message) {
    byte = static_cast<std::uint8_t>(r.rng() & 0xFF);
  }
  const int runs = std::max(1, r.cfg.repetitions);
  const CovertBenchmarkResult bench = covert_benchmark(m, chan, message, runs);

  r.row("bitrate", format_metric(bench.bits_per_kilocycle));
  r.row("error_rate", format_metric(bench.error_rate));
  r.row("bits", format_metric(bench.bits_transmitted));

  const bool leak = syscall_leak_expected(r.cfg.sim.mitigations);
  if (leak && r.deterministic()) {
    r.check(bench.bit_errors == 0, "noiseless channel must transmit error-free");
  } else if (leak && r.cfg.sim.noise.speculation_probability >= 1.0) {
    r.check(bench.error_rate < 0.001, "noisy channel must stay under 0.1% bit error rate");
  } else if (!leak && r.cfg.sim.noise.fp_rate == 0.0) {
    // Dead channel: every transmitted 1 reads as 0.
    std::uint64_t ones = 0;
    for (std::uint8_t byte : message) {
      ones += static_cast<std::uint64_t>(__builtin_popcount(byte));
    }
    r.check(bench.bit_errors == ones * static_cast<std::uint64_t>(runs),
            "a mitigated channel must be silent");
  }

  AttackReport report;
  report.attack = "covert";
  report.success = leak && bench.bit_errors == 0;
  report.recovered = bytes_to_hex(std::span<const std::uint8_t>(message));
  report.probes = bench.bits_transmitted;
  report.simulated_cycles = m.cycle();
  report.config_fingerprint = r.cfg.sim.mitigations.fingerprint();
  r.attach_report(report);
  r.finalize_export(m);
}

// --- Dereference Trap ---

void run_deref_trap(Runner& r) {
  MachineState m = r.make_machine();
  m.add_process(1);

  std::uint64_t f1 = r.random_frame(m);
  std::uint64_t f2 = r.random_frame(m);
  while (f2 == f1) f2 = r.random_frame(m);
  std::uint64_t f3 = r.random_frame(m);
  while (f3 == f1 || f3 == f2) f3 = r.random_frame(m);
  const PhysicalAddress p1{f1 * kPageSize};
  const PhysicalAddress p2{f2 * kPageSize};
  const VirtualAddress dummy_data{kScratchVa};
  m.map_page(1, dummy_data, PhysicalAddress{f3 * kPageSize}, true);

  const std::uint32_t secret = static_cast<std::uint32_t>(r.rng());
  TypeConfusionSite site = install_type_confusion_site(m, 1, dummy_data);
  const TrapOutcome trap =
      dereference_trap(m, 1, p1, p2, make_type_confusion_gadget(site, secret));

  r.row("rounds", format_metric(static_cast<std::uint64_t>(trap.rounds)));
  r.row("probes", format_metric(trap.probes));
  r.row("recovered_value", format_metric(static_cast<std::uint64_t>(trap.recovered)));

  const MitigationConfig& mit = r.cfg.sim.mitigations;
  const bool gadget_alive =
      !mit.spectre_btb && mit.cpu_order == CpuOrder::OutOfOrder && !mit.smap;
  if (gadget_alive && r.deterministic()) {
    r.check(trap.success, "trap must recover under an unmitigated configuration");
    r.check(trap.recovered == (secret & ~0x3Fu), "recovered value must match bits 6..31");
    r.check(trap.rounds == 20, "recovery must finish in exactly 20 rounds");
    r.check(trap.probes <= 20 * 128, "probe budget is 128 per round");
  } else if (!gadget_alive && r.cfg.sim.noise.fp_rate == 0.0) {
    r.check(!trap.success, "a mitigated machine must defeat the trap");
    r.check(!trap.diagnostic.empty(), "an aborted trap must carry a diagnostic");
  }

  AttackReport report;
  report.attack = "deref_trap";
  report.success = trap.success && trap.recovered == (secret & ~0x3Fu);
  {
    std::ostringstream hex;
    hex << std::hex << trap.recovered;
    report.recovered = hex.str();
  }
  report.probes = trap.probes;
  report.simulated_cycles = m.cycle();
  report.config_fingerprint = mit.fingerprint();
  r.attach_report(report);
  r.finalize_export(m);
}

// --- Foreshadow-L3 ---

void run_foreshadow_l3(Runner& r) {
  MachineState m = r.make_machine();
  m.add_process(2, /*is_vm=*/true);

  const std::uint64_t frame = r.random_frame(m);
  const PhysicalAddress secret_p{frame * kPageSize};
  std::vector<std::uint8_t> secret(64);
  for (auto& byte : secret) {
    byte = static_cast<std::uint8_t>(r.rng() & 0xFF);
  }
  m.plant_bytes(secret_p, secret);

  const ForeshadowResult result = foreshadow_l3_attack(m, 2, secret_p, secret.size());
  std::size_t matched = 0;
  for (std::size_t i = 0; i < secret.size(); ++i) {
    if (result.bytes[i] && *result.bytes[i] == secret[i]) {
      ++matched;
    }
  }

  r.row("secret_bytes", format_metric(static_cast<std::uint64_t>(secret.size())));
  r.row("recovered_bytes", format_metric(static_cast<std::uint64_t>(matched)));

  const MitigationConfig& mit = r.cfg.sim.mitigations;
  const bool expected_full = mit.l1tf_vulnerable && interrupt_leak_expected(mit) &&
                             mit.l1d_flush_on_vmentry != L1dFlushPolicy::Always;
  if (r.cfg.sim.noise.speculation_probability >= 1.0) {
    if (expected_full) {
      r.check(matched == secret.size(), "unmitigated guest must recover the full secret");
    } else {
      r.check(matched == 0, "a mitigated configuration must leak nothing");
    }
  }

  AttackReport report;
  report.attack = "foreshadow_l3";
  report.success = matched == secret.size();
  report.recovered = bytes_to_hex(std::span<const std::optional<std::uint8_t>>(result.bytes));
  report.probes = result.probes;
  report.simulated_cycles = m.cycle();
  report.config_fingerprint = mit.fingerprint();
  r.attach_report(report);
  r.finalize_export(m);
}

// --- Meltdown-L3 ---

void run_meltdown_l3(Runner& r) {
  const auto run_arms = [&r](bool kaiser) {
    ExperimentConfig armed = r.cfg;
    armed.sim.mitigations.kaiser = kaiser;
    MachineState m(armed.sim);
    m.add_process(1);
    const std::uint64_t frame = r.random_frame(m);
    const PhysicalAddress secret_p{frame * kPageSize};
    const std::uint8_t secret = 0x5A;
    m.plant_byte(secret_p, secret);
    const SyscallGadgetSequence seq = default_gadget_sequence(m);
    const bool without_gadget = meltdown_l3_experiment(m, 1, secret_p, secret, false, seq);
    const bool with_gadget = meltdown_l3_experiment(m, 1, secret_p, secret, true, seq);
    return std::pair<bool, bool>(without_gadget, with_gadget);
  };

  const auto [without_a, with_a] = run_arms(r.cfg.sim.mitigations.kaiser);
  const auto [without_b, with_b] = run_arms(!r.cfg.sim.mitigations.kaiser);

  r.row("without_gadget", format_metric(static_cast<std::uint64_t>(without_a ? 1 : 0)));
  r.row("with_gadget", format_metric(static_cast<std::uint64_t>(with_a ? 1 : 0)));

  r.check(!without_a && !without_b, "an L3-only secret must resist the plain transient read");
  const MitigationConfig& mit = r.cfg.sim.mitigations;
  if (mit.meltdown_us_vulnerable && syscall_leak_expected(mit) &&
      r.cfg.sim.noise.speculation_probability >= 1.0) {
    r.check(with_a, "the fill gadget must revive the read");
  } else if (!mit.meltdown_us_vulnerable || !syscall_leak_expected(mit)) {
    r.check(!with_a, "a mitigated machine must not leak");
  }
  r.check(without_a == without_b && with_a == with_b,
          "the outcome must not depend on the KAISER flag");

  AttackReport report;
  report.attack = "meltdown_l3";
  report.success = with_a;
  report.recovered = with_a ? "5a" : "";
  report.config_fingerprint = mit.fingerprint();
  r.attach_report(report);
}

// --- syscall F1 sweep ---

void run_syscall_sweep(Runner& r) {
  const std::array<std::string_view, 5> triggers = {"sched_yield", "pipe", "read", "write",
                                                    "nanosleep"};
  const std::array<std::string_view, 4> priors = {"none", "sendto", "geteuid", "stat"};
  const int reps = std::max(1, r.cfg.repetitions);
  const bool leak = syscall_leak_expected(r.cfg.sim.mitigations);

  ConfusionCounts totals;
  for (const std::string_view trigger_name : triggers) {
    for (const std::string_view prior_name : priors) {
      MachineState m = r.make_machine();
      m.add_process(1);
      const auto trigger = m.syscall_by_name(trigger_name);
      if (!trigger) {
        continue;
      }
      std::optional<int> prior;
      if (prior_name != "none") {
        prior = m.syscall_by_name(prior_name);
      }
      const RegSet regs = find_gadget_preset(m.sim_config().gadget_preset).gadget_registers;
      const PlantedPage planted = plant_user_page(r, m, 1, kVictimVa);
      std::uint64_t other_frame = r.random_frame(m);
      while (other_frame * kPageSize == planted.page.value) {
        other_frame = r.random_frame(m);
      }
      const PhysicalAddress decoy{other_frame * kPageSize};
      const std::uint64_t dpm_true = m.aspace(1).dpm_address(planted.page).value;
      const std::uint64_t dpm_decoy = m.aspace(1).dpm_address(decoy).value;

      ConfusionCounts counts;
      const auto round = [&](std::uint64_t value) {
        m.flush_virt(1, planted.va);
        if (prior) {
          m.fill_registers(regs, 0);
          m.do_syscall(1, *prior);
        }
        m.fill_registers(regs, value);
        m.do_syscall(1, *trigger);
        return m.flush_reload(1, planted.va);
      };
      for (int rep = 0; rep < reps; ++rep) {
        // The aliased address should fetch; the decoy must not.
        if (round(dpm_true)) {
          ++counts.tp;
        } else {
          ++counts.fn;
        }
        if (round(dpm_decoy)) {
          ++counts.fp;
        } else {
          ++counts.tn;
        }
      }

      const double f1 = f1_score(counts);
      std::ostringstream metric;
      metric << "f1[trigger=" << trigger_name << ";prior=" << prior_name << "]";
      r.row(metric.str(), format_metric(f1));
      r.check(f1 >= 0.0 && f1 <= 1.0, "F1 must stay within [0,1]");
      r.check(counts.total() == static_cast<std::uint64_t>(reps) * 2,
              "confusion counts must cover every probe");
      if (r.deterministic() && prior_name == "none") {
        r.check(f1 == 0.0, "without mistraining the dispatch site predicts correctly");
      }
      if (r.deterministic() && prior_name == "sendto") {
        r.check(f1 == (leak ? 1.0 : 0.0), "covering prior must follow the mitigation state");
      }
      totals.tp += counts.tp;
      totals.fp += counts.fp;
      totals.tn += counts.tn;
      totals.fn += counts.fn;
    }
  }
  r.attach_counts(totals);
}

// --- BTB mistraining sweep ---

void run_btb_mistrain_sweep(Runner& r) {
  const int reps = std::max(1, r.cfg.repetitions);
  struct RankEntry {
    std::string prior;
    std::uint64_t fills = 0;
  };
  std::vector<RankEntry> table;
  const GadgetPreset& preset = find_gadget_preset(r.cfg.sim.gadget_preset);

  const auto run_cell = [&r, reps, &preset](std::optional<int> prior_nr) {
    MachineState m(r.cfg.sim);
    m.add_process(1);
    const std::uint64_t frame = 1 + (m.sim_config().seed % 7);
    const std::uint64_t dpm =
        m.aspace(1).dpm_address(PhysicalAddress{frame * kPageSize}).value;
    for (int i = 0; i < reps; ++i) {
      if (prior_nr) {
        m.fill_registers(preset.gadget_registers, 0);
        m.do_syscall(1, *prior_nr);
      }
      m.fill_registers(preset.gadget_registers, dpm);
      m.do_syscall(1, preset.trigger_nr);
    }
    return m.counters().speculative_fills;
  };

  for (const SyscallDescriptor& d : preset.syscalls) {
    if (d.id == preset.trigger_nr) {
      continue;  // self-training never mispredicts
    }
    table.push_back(RankEntry{d.name, run_cell(d.id)});
  }
  table.push_back(RankEntry{"none", run_cell(std::nullopt)});

  std::stable_sort(table.begin(), table.end(),
                   [](const RankEntry& a, const RankEntry& b) { return a.fills > b.fills; });

  const bool leak = syscall_leak_expected(r.cfg.sim.mitigations);
  for (const RankEntry& entry : table) {
    std::ostringstream metric;
    metric << "fills[prior=" << entry.prior << "]";
    r.row(metric.str(), format_metric(entry.fills));
    if (entry.prior == "none") {
      r.check(entry.fills == 0, "no prior syscall means an untrained dispatch site");
    }
    if (entry.prior == "geteuid" || entry.prior == "getpeername" || entry.prior == "bind" ||
        entry.prior == "connect") {
      r.check(entry.fills == 0, "a handler with an empty dereference set cannot fill");
    }
    if (r.cfg.sim.noise.speculation_probability >= 1.0 && leak &&
        (entry.prior == "read" || entry.prior == "readv")) {
      r.check(entry.fills >= static_cast<std::uint64_t>(reps),
              "a covering dereference set must fill every round");
    }
  }
}

}  // namespace

ScenarioOutcome run_scenario(const ExperimentConfig& cfg, bool capture_log) {
  cfg.validate();
  Runner runner(cfg);
  runner.capture = capture_log;
  switch (cfg.scenario) {
    case Scenario::H1: run_h1(runner); break;
    case Scenario::H2: run_h2(runner); break;
    case Scenario::H3: run_h3(runner); break;
    case Scenario::H4: run_h4(runner); break;
    case Scenario::H5: run_h5(runner); break;
    case Scenario::AddrTranslate: run_addr_translate(runner); break;
    case Scenario::Covert: run_covert(runner); break;
    case Scenario::DerefTrap: run_deref_trap(runner); break;
    case Scenario::ForeshadowL3: run_foreshadow_l3(runner); break;
    case Scenario::MeltdownL3: run_meltdown_l3(runner); break;
    case Scenario::SyscallSweep: run_syscall_sweep(runner); break;
    case Scenario::BtbMistrainSweep: run_btb_mistrain_sweep(runner); break;
  }
  return runner.out;
}

}  // namespace specderef
