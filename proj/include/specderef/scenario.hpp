#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "specderef/attacks.hpp"
#include "specderef/config.hpp"
#include "specderef/event_log.hpp"

namespace specderef {

struct ConfusionCounts {
  std::uint64_t tp = 0;
  std::uint64_t fp = 0;
  std::uint64_t tn = 0;
  std::uint64_t fn = 0;

  std::uint64_t total() const { return tp + fp + tn + fn; }
};

// Harmonic mean of precision and recall; 0 by convention when no positives
// were predicted or present.
double f1_score(const ConfusionCounts& counts);

struct MetricRow {
  std::string scenario;
  std::uint64_t mitigation_fingerprint = 0;
  std::uint64_t seed = 0;
  std::string metric;
  std::string value;
};

std::string format_metric(double value);
std::string format_metric(std::uint64_t value);

struct ScenarioOutcome {
  std::vector<MetricRow> rows;
  bool passed = true;
  std::vector<std::string> failures;
  std::optional<AttackReport> report;
  std::optional<ConfusionCounts> counts;
  std::optional<ExportedLog> exported_log;  // filled when capture_log is set
};

// Builds the machine(s) from the config, plants ground truth, runs the
// scenario's protocol and asserts its expected finding under the configured
// mitigations. With capture_log the primary machine records a replayable
// event log.
ScenarioOutcome run_scenario(const ExperimentConfig& cfg, bool capture_log = false);

// True iff the syscall path can speculatively fill under these mitigations.
bool syscall_leak_expected(const MitigationConfig& m);
// Same for the interrupt path (register clearing does not help there).
bool interrupt_leak_expected(const MitigationConfig& m);

}  // namespace specderef
