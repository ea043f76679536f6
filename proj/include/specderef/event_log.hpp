#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "specderef/machine.hpp"

namespace specderef {

// Line-delimited event-log file:
//   # specderef-event-log v1
//   # cfg <key>=<value>          (full experiment config, one key per line)
//   # final_fingerprint <hex>
//   cycle,event_kind,address,level,cause
//   ...
// Operation records carry their arguments in the cause column and are enough
// to re-execute the run; effect records are regenerated by the replay.
struct ExportedLog {
  std::string config_text;  // flat key=value serialization of the experiment
  std::vector<Event> events;
  std::uint64_t final_fingerprint = 0;
};

std::string event_to_line(const Event& e);
Event event_from_line(const std::string& line);  // throws ConfigError on malformed input

void write_event_log(std::ostream& out, const ExportedLog& log);
ExportedLog read_event_log(std::istream& in);  // throws ConfigError

struct ReplayResult {
  bool fingerprint_matches = false;
  bool log_matches = false;
  std::uint64_t expected_fingerprint = 0;
  std::uint64_t actual_fingerprint = 0;
  std::string detail;
};

// Re-executes the operation records on a fresh machine built from the
// embedded config and compares both the regenerated log and the final state
// fingerprint.
ReplayResult replay_event_log(const ExportedLog& log);

// Applies one operation record to a machine. Effect records are ignored.
void apply_operation(MachineState& m, const Event& e);

}  // namespace specderef
