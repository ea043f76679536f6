#pragma once

#include <span>
#include <string>

#include "specderef/scenario.hpp"

namespace specderef {

enum class ReportFormat : std::uint8_t { Csv, Text };

ReportFormat report_format_from_string(std::string_view name);  // throws ConfigError

// CSV schema: scenario,mitigation_fingerprint,seed,metric,value. Rows are
// sorted before emission so identical configurations emit identical bytes.
std::string to_csv(std::span<const MetricRow> rows);

// Aligned table for humans, same row order as the CSV.
std::string to_text(std::span<const MetricRow> rows);

std::string render_report(std::span<const MetricRow> rows, ReportFormat format);

}  // namespace specderef
