#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "specderef/machine.hpp"

namespace specderef {

enum class Scenario : std::uint8_t {
  H1,
  H2,
  H3,
  H4,
  H5,
  AddrTranslate,
  Covert,
  DerefTrap,
  ForeshadowL3,
  MeltdownL3,
  SyscallSweep,
  BtbMistrainSweep,
};

std::string_view to_string(Scenario scenario);
Scenario scenario_from_string(std::string_view name);  // throws ConfigError
std::vector<Scenario> all_scenarios();
bool is_sweep(Scenario scenario);

struct CovertParams {
  std::uint64_t window = 0;  // 0 = derive the default from the probe round-trip
  std::uint32_t line_index = 0;
  std::uint32_t message_bytes = 128;
};

// One experiment: a scenario, the machine it runs on, and the noise/repeat
// knobs. Parsed from a flat key=value file; CLI --set overrides win.
struct ExperimentConfig {
  Scenario scenario = Scenario::AddrTranslate;
  SimConfig sim;
  int repetitions = 1;
  CovertParams covert;

  void validate() const;  // throws ConfigError

  // Grammar: one `key=value` per line, `#` comments, blank lines ignored.
  // A `[section]` line prefixes following bare keys with `section.`; fully
  // dotted keys (`mitigations.smap=off`) work anywhere.
  static ExperimentConfig from_string(const std::string& text);
  static ExperimentConfig from_file(const std::string& path);

  void apply_override(std::string_view key, std::string_view value);

  // Canonical flat serialization; parsing it back yields an equal config.
  std::string serialize() const;
};

}  // namespace specderef
