#include "specderef/event_log.hpp"

#include <istream>
#include <ostream>
#include <sstream>
#include <unordered_map>

#include "specderef/config.hpp"
#include "specderef/errors.hpp"

namespace specderef {

namespace {

// The cause column holds "key=value;key=value" pairs. Values never contain
// commas or semicolons by construction.
std::unordered_map<std::string, std::string> parse_cause(const std::string& cause) {
  std::unordered_map<std::string, std::string> out;
  std::size_t pos = 0;
  while (pos < cause.size()) {
    std::size_t semi = cause.find(';', pos);
    if (semi == std::string::npos) semi = cause.size();
    const std::string_view pair(cause.data() + pos, semi - pos);
    const std::size_t eq = pair.find('=');
    if (eq != std::string_view::npos) {
      out.emplace(std::string(pair.substr(0, eq)), std::string(pair.substr(eq + 1)));
    }
    pos = semi + 1;
  }
  return out;
}

std::uint64_t cause_u64(const std::unordered_map<std::string, std::string>& kv,
                        const std::string& key) {
  const auto it = kv.find(key);
  if (it == kv.end()) {
    throw ConfigError("event log: missing argument '" + key + "'");
  }
  return std::stoull(it->second, nullptr, 0);
}

std::string cause_str(const std::unordered_map<std::string, std::string>& kv,
                      const std::string& key) {
  const auto it = kv.find(key);
  if (it == kv.end()) {
    throw ConfigError("event log: missing argument '" + key + "'");
  }
  return it->second;
}

}  // namespace

std::string event_to_line(const Event& e) {
  std::ostringstream out;
  out << e.cycle << ',' << to_string(e.kind) << ',' << e.address << ',' << e.level << ','
      << e.cause;
  return out.str();
}

Event event_from_line(const std::string& line) {
  Event e;
  std::size_t pos = 0;
  const auto next_field = [&](bool last) {
    const std::size_t comma = last ? std::string::npos : line.find(',', pos);
    const std::string field =
        comma == std::string::npos ? line.substr(pos) : line.substr(pos, comma - pos);
    pos = comma == std::string::npos ? line.size() : comma + 1;
    return field;
  };
  try {
    e.cycle = std::stoull(next_field(false));
    const std::string kind_name = next_field(false);
    const auto kind = event_kind_from_string(kind_name);
    if (!kind) {
      throw ConfigError("event log: unknown event kind '" + kind_name + "'");
    }
    e.kind = *kind;
    e.address = std::stoull(next_field(false));
    e.level = std::stoull(next_field(false));
    e.cause = next_field(true);
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception&) {
    throw ConfigError("event log: malformed record: " + line);
  }
  return e;
}

void write_event_log(std::ostream& out, const ExportedLog& log) {
  out << "# specderef-event-log v1\n";
  std::istringstream cfg(log.config_text);
  std::string line;
  while (std::getline(cfg, line)) {
    if (!line.empty()) {
      out << "# cfg " << line << "\n";
    }
  }
  out << "# final_fingerprint " << log.final_fingerprint << "\n";
  for (const Event& e : log.events) {
    out << event_to_line(e) << "\n";
  }
}

ExportedLog read_event_log(std::istream& in) {
  ExportedLog log;
  std::string line;
  bool saw_magic = false;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line.rfind("# specderef-event-log", 0) == 0) {
      saw_magic = true;
      continue;
    }
    if (line.rfind("# cfg ", 0) == 0) {
      log.config_text += line.substr(6);
      log.config_text += '\n';
      continue;
    }
    if (line.rfind("# final_fingerprint ", 0) == 0) {
      log.final_fingerprint = std::stoull(line.substr(20));
      continue;
    }
    if (line.front() == '#') continue;
    log.events.push_back(event_from_line(line));
  }
  if (!saw_magic) {
    throw ConfigError("event log: missing header");
  }
  return log;
}

void apply_operation(MachineState& m, const Event& e) {
  if (!is_operation(e.kind)) {
    return;
  }
  const auto kv = parse_cause(e.cause);
  switch (e.kind) {
    case EventKind::op_add_process:
      m.add_process(static_cast<Pid>(e.address), cause_u64(kv, "vm") != 0);
      break;
    case EventKind::op_set_register: {
      const auto reg = reg_from_name(cause_str(kv, "reg"));
      if (!reg) throw ConfigError("event log: bad register name");
      m.set_register(*reg, e.address);
      break;
    }
    case EventKind::op_syscall:
      m.do_syscall(static_cast<Pid>(cause_u64(kv, "pid")), static_cast<int>(e.address));
      break;
    case EventKind::op_interrupt:
      m.deliver_interrupt(static_cast<Pid>(cause_u64(kv, "pid")));
      break;
    case EventKind::op_hypercall: {
      RegisterFile args{};
      std::istringstream in(cause_str(kv, "args"));
      std::string field;
      std::size_t i = 0;
      while (std::getline(in, field, ',') && i < kRegCount) {
        args[i++] = std::stoull(field);
      }
      m.vm_hypercall(static_cast<Pid>(cause_u64(kv, "pid")), args);
      break;
    }
    case EventKind::op_vm_resume:
      m.vm_resume(static_cast<Pid>(cause_u64(kv, "pid")));
      break;
    case EventKind::op_access:
      m.access(static_cast<Pid>(cause_u64(kv, "pid")), VirtualAddress{e.address},
               cause_str(kv, "mode") == "user" ? Mode::User : Mode::Kernel);
      break;
    case EventKind::op_remote_touch:
      m.remote_touch(PhysicalAddress{e.address});
      break;
    case EventKind::op_flush_virt:
      m.flush_virt(static_cast<Pid>(cause_u64(kv, "pid")), VirtualAddress{e.address});
      break;
    case EventKind::op_flush_phys:
      m.flush_phys(PhysicalAddress{e.address});
      break;
    case EventKind::op_probe:
      m.flush_reload(static_cast<Pid>(cause_u64(kv, "pid")), VirtualAddress{e.address});
      break;
    case EventKind::op_prefetch:
      m.software_prefetch_op(static_cast<Pid>(cause_u64(kv, "pid")), VirtualAddress{e.address},
                             cause_str(kv, "mode") == "user" ? Mode::User : Mode::Kernel);
      break;
    case EventKind::op_transient_read:
      m.transient_read(cause_str(kv, "reader") == "foreshadow" ? TransientReader::Foreshadow
                                                               : TransientReader::MeltdownUS,
                       PhysicalAddress{e.address});
      break;
    case EventKind::op_idle_until:
      m.idle_until(e.address);
      break;
    case EventKind::op_map_page:
      m.map_page(static_cast<Pid>(cause_u64(kv, "pid")), VirtualAddress{e.address},
                 PhysicalAddress{cause_u64(kv, "phys")}, cause_u64(kv, "ua") != 0);
      break;
    case EventKind::op_map_shared_range:
      m.map_shared_range(static_cast<Pid>(cause_u64(kv, "pid")), VirtualAddress{e.address},
                         cause_u64(kv, "count"), PhysicalAddress{cause_u64(kv, "p1")},
                         PhysicalAddress{cause_u64(kv, "p2")});
      break;
    case EventKind::op_unmap_range:
      m.unmap_range(static_cast<Pid>(cause_u64(kv, "pid")), VirtualAddress{e.address},
                    cause_u64(kv, "count"));
      break;
    case EventKind::op_plant_byte:
      m.plant_byte(PhysicalAddress{e.address}, static_cast<std::uint8_t>(cause_u64(kv, "value")));
      break;
    case EventKind::op_tag_host_sensitive:
      m.tag_host_sensitive(PhysicalAddress{e.address});
      break;
    case EventKind::op_register_indirect_target:
      m.register_indirect_target(e.address, cause_u64(kv, "derefs") != 0);
      break;
    case EventKind::op_indirect_call:
      m.indirect_call(static_cast<Pid>(cause_u64(kv, "pid")), cause_u64(kv, "site"), e.address,
                      cause_u64(kv, "member"));
      break;
    default:
      break;
  }
}

ReplayResult replay_event_log(const ExportedLog& log) {
  ReplayResult result;
  result.expected_fingerprint = log.final_fingerprint;

  const ExperimentConfig cfg = ExperimentConfig::from_string(log.config_text);
  cfg.validate();
  MachineState machine(cfg.sim);
  machine.set_logging(true);
  for (const Event& e : log.events) {
    if (is_operation(e.kind)) {
      apply_operation(machine, e);
    }
  }
  result.actual_fingerprint = machine.state_fingerprint();
  result.fingerprint_matches = result.actual_fingerprint == result.expected_fingerprint;
  result.log_matches = machine.event_log() == log.events;
  if (!result.log_matches) {
    const auto& regenerated = machine.event_log();
    std::size_t i = 0;
    while (i < regenerated.size() && i < log.events.size() && regenerated[i] == log.events[i]) {
      ++i;
    }
    std::ostringstream detail;
    detail << "log diverges at record " << i << " (recorded " << log.events.size()
           << ", regenerated " << regenerated.size() << ")";
    result.detail = detail.str();
  }
  return result;
}

}  // namespace specderef
