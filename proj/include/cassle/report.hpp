#pragma once

#include <json.hpp>

#include <string>
#include <vector>

#include "cassle/evaluation.hpp"
#include "cassle/scenarios.hpp"

namespace cassle {

struct RunReport {
  nlohmann::json config;  // full echo, defaults included
  std::string version;
  std::vector<TaskLog> task_logs;
  AccuracyMatrix matrix;
  std::vector<Scalar> random_baseline;  // R_i, probe on the freshly initialized encoder
  MetricsReport metrics;
  std::vector<std::string> checkpoint_digests;  // per finished task
  std::string lr_schedule;  // echoed schedule choice
  double wall_clock_sec = 0.0;
  bool incomplete = false;
};

// canonical = true blanks volatile fields (wall clock) so two deterministic
// runs serialize identically.
nlohmann::json report_to_json(const RunReport& report, bool canonical);

// Writes report.json, metrics.csv (one row: strategy, seed, A, F, FT) and
// matrix.csv into out_dir.
void write_report_files(const RunReport& report, const std::string& out_dir, bool canonical);

// Minimal structural JSON-schema check (type/required/properties/items/enum/
// additionalProperties), enough for the shipped report schema.
bool validate_against_schema(const nlohmann::json& value, const nlohmann::json& schema,
                             std::string* error);

nlohmann::json load_json_file(const std::string& path);

// Standalone SVG line chart: x = task index, y = mean accuracy over the tasks
// seen so far, one polyline per strategy (averaged over the reports of that
// strategy).
std::string emit_plot_svg(const std::vector<nlohmann::json>& reports);

// Recomputes A/F/FT from the serialized matrix; used by consistency checks.
MetricsReport metrics_from_report_json(const nlohmann::json& report);

}  // namespace cassle
