#pragma once

#include <filesystem>
#include <string>

#include "forge/progressive.hpp"

namespace forge {

/// Human-readable table: effective config, a baseline row, then one row per
/// step with overall and per-layer rates, bit widths, accuracy and the loss
/// against the baseline.
std::string format_report_table(const CompressionReport& report);

/// Tab-separated records with a header line, one per row of the table.
/// Columns: method step mode overall_rate layer_rates bits accuracy
/// accuracy_loss admm_iterations converged trace_file.
std::string format_report_records(const CompressionReport& report);

/// Writes `<stem>.txt` and `<stem>.tsv`.
void emit_report(const CompressionReport& report, const std::filesystem::path& stem);

}  // namespace forge
