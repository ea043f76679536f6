// Experiment runner. Exit codes: 0 = scenario executed and assertions held,
// 1 = assertions failed (or replay mismatch), 2 = configuration error.

#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "specderef/config.hpp"
#include "specderef/errors.hpp"
#include "specderef/event_log.hpp"
#include "specderef/gadget_presets.hpp"
#include "specderef/report.hpp"
#include "specderef/scenario.hpp"

namespace {

using namespace specderef;

struct RunOptions {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string format = "csv";
  std::string output_path;
  std::string export_log_path;
};

ExperimentConfig load_config(const RunOptions& opts) {
  ExperimentConfig cfg = ExperimentConfig::from_file(opts.config_path);
  for (const std::string& kv : opts.overrides) {
    const std::size_t eq = kv.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("--set expects key=value, got '" + kv + "'");
    }
    cfg.apply_override(kv.substr(0, eq), kv.substr(eq + 1));
  }
  cfg.validate();
  return cfg;
}

void write_output(const std::string& path, const std::string& content) {
  if (path.empty()) {
    std::cout << content;
    return;
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw ConfigError("cannot open output path: " + path);
  }
  out << content;
}

int execute(const RunOptions& opts, bool sweep_command) {
  const ExperimentConfig cfg = load_config(opts);
  if (sweep_command && !is_sweep(cfg.scenario)) {
    throw ConfigError("'sweep' runs syscall_sweep or btb_mistrain_sweep scenarios; use 'run'");
  }
  if (!sweep_command && is_sweep(cfg.scenario)) {
    throw ConfigError("sweep scenarios run through the 'sweep' subcommand");
  }
  const bool capture = !opts.export_log_path.empty();
  const ScenarioOutcome outcome = run_scenario(cfg, capture);

  write_output(opts.output_path, render_report(outcome.rows,
                                               report_format_from_string(opts.format)));

  if (capture) {
    if (!outcome.exported_log) {
      throw ConfigError("scenario '" + std::string(to_string(cfg.scenario)) +
                        "' does not export an event log (multi-machine protocol)");
    }
    std::ofstream out(opts.export_log_path, std::ios::binary);
    if (!out) {
      throw ConfigError("cannot open event-log path: " + opts.export_log_path);
    }
    write_event_log(out, *outcome.exported_log);
  }

  for (const std::string& failure : outcome.failures) {
    std::cerr << "assertion failed: " << failure << "\n";
  }
  return outcome.passed ? 0 : 1;
}

int list_presets() {
  std::cout << "gadget presets:\n";
  for (const GadgetPreset& preset : builtin_gadget_presets()) {
    std::cout << "  " << preset.name << "  registers={" << to_string(preset.gadget_registers)
              << "}  mistrain=" << preset.syscalls[preset.mistrain_nr].name
              << "  trigger=" << preset.syscalls[preset.trigger_nr].name << "\n";
    for (const SyscallDescriptor& d : preset.syscalls) {
      std::cout << "    " << d.id << "  " << d.name << "  derefs={" << to_string(d.deref_registers)
                << "}  latency=" << d.latency << "\n";
    }
  }
  std::cout << "scenarios:\n";
  for (Scenario s : all_scenarios()) {
    std::cout << "  " << to_string(s) << (is_sweep(s) ? "  (sweep)" : "") << "\n";
  }
  return 0;
}

int replay(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw ConfigError("cannot open event log: " + path);
  }
  const ExportedLog log = read_event_log(in);
  const ReplayResult result = replay_event_log(log);
  if (result.fingerprint_matches && result.log_matches) {
    std::cout << "replay ok: " << log.events.size() << " events, fingerprint "
              << result.actual_fingerprint << "\n";
    return 0;
  }
  std::cerr << "replay mismatch:";
  if (!result.fingerprint_matches) {
    std::cerr << " fingerprint expected " << result.expected_fingerprint << " got "
              << result.actual_fingerprint << ";";
  }
  if (!result.detail.empty()) {
    std::cerr << " " << result.detail;
  }
  std::cerr << "\n";
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"speculative register-dereference simulator"};
  app.require_subcommand(1);

  RunOptions run_opts;
  CLI::App* run_cmd = app.add_subcommand("run", "run one experiment scenario");
  run_cmd->add_option("config", run_opts.config_path, "experiment config file")->required();
  run_cmd->add_option("--set", run_opts.overrides, "override a config key (key=value)");
  run_cmd->add_option("--format", run_opts.format, "csv or text");
  run_cmd->add_option("--output", run_opts.output_path, "write the report here");
  run_cmd->add_option("--export-log", run_opts.export_log_path, "write a replayable event log");

  RunOptions sweep_opts;
  CLI::App* sweep_cmd = app.add_subcommand("sweep", "run a sweep scenario");
  sweep_cmd->add_option("config", sweep_opts.config_path, "experiment config file")->required();
  sweep_cmd->add_option("--set", sweep_opts.overrides, "override a config key (key=value)");
  sweep_cmd->add_option("--format", sweep_opts.format, "csv or text");
  sweep_cmd->add_option("--output", sweep_opts.output_path, "write the report here");

  CLI::App* list_cmd = app.add_subcommand("list-presets", "list gadget presets and scenarios");

  std::string replay_path;
  CLI::App* replay_cmd = app.add_subcommand("replay", "re-execute an exported event log");
  replay_cmd->add_option("log", replay_path, "event-log file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      return app.exit(e);  // --help
    }
    app.exit(e);
    return 2;
  }

  try {
    if (run_cmd->parsed()) {
      return execute(run_opts, false);
    }
    if (sweep_cmd->parsed()) {
      return execute(sweep_opts, true);
    }
    if (list_cmd->parsed()) {
      return list_presets();
    }
    if (replay_cmd->parsed()) {
      return replay(replay_path);
    }
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 2;
}
