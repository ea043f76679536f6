#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "specderef/machine.hpp"

namespace specderef {

struct AttackReport {
  std::string attack;
  bool success = false;
  std::string recovered;  // hex bytes / address; "??" marks gaps
  std::uint64_t probes = 0;
  std::uint64_t simulated_cycles = 0;
  std::uint64_t config_fingerprint = 0;
};

// How one speculative-fill attempt is provoked: mistrain the dispatch site
// with one syscall, fill the gadget registers, enter the kernel again.
enum class TriggerKind : std::uint8_t { Syscall, Interrupt };

struct SyscallGadgetSequence {
  int mistrain_nr = 0;
  int trigger_nr = 0;
  RegSet registers;
  TriggerKind trigger = TriggerKind::Syscall;
};

// Sequence derived from the machine's configured gadget preset.
SyscallGadgetSequence default_gadget_sequence(const MachineState& m,
                                              TriggerKind trigger = TriggerKind::Syscall);

// One mistrain+fill+trigger round with `value` in the gadget registers.
void run_gadget_round(MachineState& m, Pid pid, const SyscallGadgetSequence& seq,
                      std::uint64_t value);

struct FrameRange {
  std::uint64_t first_frame = 0;
  std::uint64_t frame_count = 0;
};

// Recovers the physical address behind v by guessing frames, provoking a
// speculative dereference of each guess's kernel-half alias and watching v
// with Flush+Reload. Returns the first guess that produced a hit. Throws
// ConfigError when v is not user-mapped in pid's address space.
std::optional<PhysicalAddress> address_translation_attack(MachineState& m, Pid pid,
                                                          VirtualAddress v,
                                                          const FrameRange& guesses,
                                                          const SyscallGadgetSequence& seq,
                                                          int repetitions = 1);

// A covert-channel frame: payload plus per-bit timing window and the probed
// line inside the receiver page.
struct CovertFrame {
  std::vector<bool> payload;
  std::uint64_t window = 0;
  std::uint32_t line_index = 0;
};

// Established channel state shared by sender and receiver.
struct CovertChannel {
  Pid receiver_pid = 0;
  VirtualAddress receiver_va;      // receiver's user mapping of the page
  PhysicalAddress receiver_page;   // sender's knowledge: physical page address
  std::uint64_t window = 0;        // cycles per bit
  std::uint32_t line_index = 0;
  SyscallGadgetSequence gadget;
  std::uint64_t epoch_start = 0;   // cycle of bit 0's window start
  std::uint64_t bits_elapsed = 0;
};

// Validates window/line_index (ConfigError) and anchors the window clock.
CovertChannel covert_channel_setup(MachineState& m, Pid receiver_pid, VirtualAddress receiver_va,
                                   PhysicalAddress receiver_page, std::uint64_t window,
                                   std::uint32_t line_index);

// Sender half of one bit window: hammer the gadget for a 1, stay idle for a
// 0. Leaves the clock at the receiver's probe point.
void covert_send(MachineState& m, CovertChannel& chan, bool bit);

// Receiver half: probe the line, flush it for the next bit, close the window.
bool covert_receive(MachineState& m, CovertChannel& chan);

struct CovertBenchmarkResult {
  std::uint64_t bits_transmitted = 0;
  std::uint64_t bit_errors = 0;
  double error_rate = 0.0;
  double bits_per_kilocycle = 0.0;
};

CovertBenchmarkResult covert_benchmark(MachineState& m, CovertChannel& chan,
                                       std::span<const std::uint8_t> message, int runs);

// --- Dereference Trap ---

// The victim: something that, when invoked, speculatively dereferences a
// register holding the zero-extended 32-bit secret.
using SpecDerefGadget = std::function<void(MachineState&)>;

struct TrapRound {
  int round = 0;
  bool hit_second_page = false;  // p1 or p2 got the fill
  std::uint32_t line = 0;        // line offset within the page
};

struct TrapOutcome {
  bool success = false;
  std::uint32_t recovered = 0;  // bits 6..31 of the secret; bits 0..5 are lost
  int rounds = 0;
  std::uint64_t probes = 0;
  std::string diagnostic;
  std::vector<TrapRound> schedule;
};

// Divide-and-conquer recovery of a speculatively dereferenced 32-bit value:
// map the covered space onto two physical pages, halve the mapping each
// round, read one bit per round from which page got cached.
TrapOutcome dereference_trap(MachineState& m, Pid attacker, PhysicalAddress p1,
                             PhysicalAddress p2, const SpecDerefGadget& gadget);

// --- speculative type confusion (the usual source of the trap's gadget) ---

enum class ObjectKind : std::uint8_t { Dummy, Secret };

struct TypeConfusionSite {
  Pid pid = 0;
  std::uint64_t site = 0;
  std::uint64_t dummy_target = 0;   // virtual function that dereferences its member
  std::uint64_t secret_target = 0;  // virtual function that does not
  std::uint64_t dummy_member = 0;   // harmless data pointer of the dummy object
};

TypeConfusionSite install_type_confusion_site(MachineState& m, Pid pid,
                                              VirtualAddress dummy_data);

// Virtual call through the site with the given object. Passing Secret after a
// Dummy call speculatively dereferences the secret member.
void call_virtual(MachineState& m, TypeConfusionSite& site, ObjectKind object,
                  std::uint64_t member_value);

// Builds the trap gadget from a type-confused virtual call on the secret.
SpecDerefGadget make_type_confusion_gadget(TypeConfusionSite site, std::uint32_t secret);

// --- Foreshadow / Meltdown from L3 ---

struct ForeshadowResult {
  std::vector<std::optional<std::uint8_t>> bytes;
  std::uint64_t probes = 0;
};

// Guest-side recovery of an L3-resident host secret: a host actor keeps the
// secret in the shared level, the guest provokes interrupt-path speculative
// fills of its kernel-half alias into L1 and transient-reads it. Missing
// bytes are reported as gaps.
ForeshadowResult foreshadow_l3_attack(MachineState& m, Pid guest, PhysicalAddress secret_p,
                                      std::size_t length);

// True iff the transient read returns the planted byte. Without the fill
// gadget the secret stays outside L1 and the read fails.
bool meltdown_l3_experiment(MachineState& m, Pid pid, PhysicalAddress secret_p,
                            std::uint8_t expected, bool gadget_active,
                            const SyscallGadgetSequence& seq);

std::string bytes_to_hex(std::span<const std::optional<std::uint8_t>> bytes);
std::string bytes_to_hex(std::span<const std::uint8_t> bytes);

}  // namespace specderef
