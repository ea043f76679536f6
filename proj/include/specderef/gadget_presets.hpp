#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "specderef/machine.hpp"

namespace specderef {

// A gadget preset pins which registers the kernel's handlers dereference.
// The vulnerable register set differs between kernel builds, so it is data,
// not code. Each preset also names the default mistrain/trigger syscall pair
// used by the attack procedures.
struct GadgetPreset {
  std::string name;
  std::vector<SyscallDescriptor> syscalls;
  RegSet gadget_registers;  // union of the dereferenced register sets
  int mistrain_nr = 0;
  int trigger_nr = 0;
};

const std::vector<GadgetPreset>& builtin_gadget_presets();

// Throws ConfigError when the name is unknown.
const GadgetPreset& find_gadget_preset(std::string_view name);

}  // namespace specderef
