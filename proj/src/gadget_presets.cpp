#include "specderef/gadget_presets.hpp"

#include "specderef/errors.hpp"

namespace specderef {

namespace {

// Builds one preset around a vulnerable register set. Handlers with an empty
// deref set (sched_yield, geteuid, getpeername, bind, connect) are safe
// trigger candidates; the others dereference some or all of the vulnerable
// registers, mirroring that handler argument usage varies per syscall.
GadgetPreset make_preset(std::string name, Reg a, Reg b, Reg c, bool use_three) {
  const RegSet full = use_three ? RegSet::of({a, b, c}) : RegSet::of({a, b});
  const RegSet pair = RegSet::of({a, b});
  const RegSet first = RegSet::of({a});
  const RegSet second = RegSet::of({b});

  GadgetPreset preset;
  preset.name = std::move(name);
  preset.gadget_registers = full;
  preset.syscalls = {
      {0, "sched_yield", RegSet{}, 120},
      {1, "geteuid", RegSet{}, 90},
      {2, "read", full, 260},
      {3, "write", pair, 260},
      {4, "stat", second, 300},
      {5, "sendto", first, 320},
      {6, "nanosleep", RegSet{}, 350},
      {7, "pipe", full, 500},
      {8, "getcwd", pair, 280},
      {9, "readv", full, 270},
      {10, "mmap", full, 420},
      {11, "getpeername", RegSet{}, 240},
      {12, "bind", RegSet{}, 230},
      {13, "connect", RegSet{}, 310},
  };
  preset.mistrain_nr = 2;  // read
  preset.trigger_nr = 0;   // sched_yield
  return preset;
}

}  // namespace

const std::vector<GadgetPreset>& builtin_gadget_presets() {
  static const std::vector<GadgetPreset> presets = {
      make_preset("kernel-4.18", Reg::r12, Reg::r13, Reg::r14, true),
      make_preset("kernel-4.19", Reg::r9, Reg::r10, Reg::r10, false),
      make_preset("kernel-4.15-mint", Reg::rdi, Reg::rdx, Reg::rdx, false),
  };
  return presets;
}

const GadgetPreset& find_gadget_preset(std::string_view name) {
  for (const GadgetPreset& preset : builtin_gadget_presets()) {
    if (preset.name == name) {
      return preset;
    }
  }
  throw ConfigError("unknown gadget preset: " + std::string(name));
}

}  // namespace specderef
