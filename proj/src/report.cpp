#include "specderef/report.hpp"

#include <algorithm>
#include <cstdio>
#include <iomanip>
#include <sstream>
#include <vector>

#include "specderef/errors.hpp"

namespace specderef {

namespace {

std::string fingerprint_hex(std::uint64_t fp) {
  char buffer[32];
  std::snprintf(buffer, sizeof(buffer), "0x%016llx", static_cast<unsigned long long>(fp));
  return buffer;
}

std::vector<MetricRow> sorted_rows(std::span<const MetricRow> rows) {
  std::vector<MetricRow> out(rows.begin(), rows.end());
  std::stable_sort(out.begin(), out.end(), [](const MetricRow& a, const MetricRow& b) {
    if (a.scenario != b.scenario) return a.scenario < b.scenario;
    if (a.metric != b.metric) return a.metric < b.metric;
    return a.value < b.value;
  });
  return out;
}

}  // namespace

ReportFormat report_format_from_string(std::string_view name) {
  if (name == "csv") return ReportFormat::Csv;
  if (name == "text") return ReportFormat::Text;
  throw ConfigError("unknown report format: " + std::string(name));
}

std::string to_csv(std::span<const MetricRow> rows) {
  std::ostringstream out;
  out << "scenario,mitigation_fingerprint,seed,metric,value\n";
  for (const MetricRow& row : sorted_rows(rows)) {
    out << row.scenario << ',' << fingerprint_hex(row.mitigation_fingerprint) << ',' << row.seed
        << ',' << row.metric << ',' << row.value << '\n';
  }
  return out.str();
}

std::string to_text(std::span<const MetricRow> rows) {
  const std::vector<MetricRow> ordered = sorted_rows(rows);
  std::size_t scenario_width = 8;
  std::size_t metric_width = 6;
  for (const MetricRow& row : ordered) {
    scenario_width = std::max(scenario_width, row.scenario.size());
    metric_width = std::max(metric_width, row.metric.size());
  }
  std::ostringstream out;
  out << std::left << std::setw(static_cast<int>(scenario_width + 2)) << "scenario"
      << std::setw(static_cast<int>(metric_width + 2)) << "metric" << std::setw(20)
      << "mitigations" << "value" << '\n';
  for (const MetricRow& row : ordered) {
    out << std::left << std::setw(static_cast<int>(scenario_width + 2)) << row.scenario
        << std::setw(static_cast<int>(metric_width + 2)) << row.metric << std::setw(20)
        << fingerprint_hex(row.mitigation_fingerprint) << row.value << '\n';
  }
  return out.str();
}

std::string render_report(std::span<const MetricRow> rows, ReportFormat format) {
  return format == ReportFormat::Csv ? to_csv(rows) : to_text(rows);
}

}  // namespace specderef
