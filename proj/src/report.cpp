#include "cassle/report.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

namespace cassle {

namespace {

nlohmann::json matrix_to_json(const AccuracyMatrix& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (int j = 0; j < m.tasks(); ++j) {
    nlohmann::json row = nlohmann::json::array();
    for (int k = 0; k < m.tasks(); ++k) {
      if (m.present(j, k))
        row.push_back(m.at(j, k));
      else
        row.push_back(nullptr);
    }
    rows.push_back(row);
  }
  return rows;
}

AccuracyMatrix matrix_from_json(const nlohmann::json& rows) {
  if (!rows.is_array() || rows.empty()) throw parse_error("matrix must be a non-empty array");
  AccuracyMatrix m(static_cast<int>(rows.size()));
  for (int j = 0; j < m.tasks(); ++j) {
    const auto& row = rows.at(static_cast<size_t>(j));
    if (!row.is_array() || static_cast<int>(row.size()) != m.tasks())
      throw parse_error("matrix must be square");
    for (int k = 0; k < m.tasks(); ++k) {
      const auto& cell = row.at(static_cast<size_t>(k));
      if (!cell.is_null()) m.set(j, k, cell.get<Scalar>());
    }
  }
  return m;
}

std::string csv_number(Scalar v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

nlohmann::json report_to_json(const RunReport& report, bool canonical) {
  nlohmann::json j;
  j["config"] = report.config;
  j["version"] = report.version;
  j["lr_schedule"] = report.lr_schedule;
  j["incomplete"] = report.incomplete;
  j["wall_clock_sec"] = canonical ? 0.0 : report.wall_clock_sec;

  nlohmann::json logs = nlohmann::json::array();
  for (const TaskLog& log : report.task_logs) {
    nlohmann::json entries = nlohmann::json::array();
    for (const TrainLogEntry& e : log.entries)
      entries.push_back({{"step", e.step}, {"ssl", e.ssl}, {"distill", e.distill}, {"total", e.total}});
    logs.push_back({{"entries", entries},
                    {"completed", log.completed},
                    {"error", log.error},
                    {"frozen_digest", log.frozen_digest}});
  }
  j["task_logs"] = logs;
  j["accuracy_matrix"] = matrix_to_json(report.matrix);
  j["random_baseline"] = report.random_baseline;

  nlohmann::json metrics;
  metrics["average_accuracy"] = report.metrics.average_accuracy;
  metrics["forgetting"] =
      report.metrics.forgetting ? nlohmann::json(*report.metrics.forgetting) : nlohmann::json();
  metrics["forward_transfer"] = report.metrics.forward_transfer
                                    ? nlohmann::json(*report.metrics.forward_transfer)
                                    : nlohmann::json();
  j["metrics"] = metrics;
  j["checkpoint_digests"] = report.checkpoint_digests;
  return j;
}

void write_report_files(const RunReport& report, const std::string& out_dir, bool canonical) {
  std::filesystem::create_directories(out_dir);
  const nlohmann::json j = report_to_json(report, canonical);
  {
    std::ofstream out(out_dir + "/report.json");
    if (!out) throw io_error("cannot write report.json in " + out_dir);
    out << j.dump(2) << "\n";
  }
  {
    std::ofstream out(out_dir + "/metrics.csv");
    if (!out) throw io_error("cannot write metrics.csv in " + out_dir);
    out << "strategy,method,seed,average_accuracy,forgetting,forward_transfer\n";
    out << report.config.at("strategy").get<std::string>() << ","
        << report.config.at("method").get<std::string>() << ","
        << report.config.at("seed").get<uint64_t>() << ","
        << csv_number(report.metrics.average_accuracy) << ","
        << (report.metrics.forgetting ? csv_number(*report.metrics.forgetting) : "") << ","
        << (report.metrics.forward_transfer ? csv_number(*report.metrics.forward_transfer) : "")
        << "\n";
  }
  {
    std::ofstream out(out_dir + "/matrix.csv");
    if (!out) throw io_error("cannot write matrix.csv in " + out_dir);
    for (int j2 = 0; j2 < report.matrix.tasks(); ++j2) {
      for (int k = 0; k < report.matrix.tasks(); ++k) {
        if (k) out << ",";
        if (report.matrix.present(j2, k)) out << csv_number(report.matrix.at(j2, k));
      }
      out << "\n";
    }
  }
}

bool validate_against_schema(const nlohmann::json& value, const nlohmann::json& schema,
                             std::string* error) {
  auto fail = [&](const std::string& msg) {
    if (error) *error = msg;
    return false;
  };

  if (schema.contains("type")) {
    const std::string type = schema.at("type").get<std::string>();
    const bool ok = (type == "object" && value.is_object()) ||
                    (type == "array" && value.is_array()) ||
                    (type == "string" && value.is_string()) ||
                    (type == "number" && value.is_number()) ||
                    (type == "integer" && value.is_number_integer()) ||
                    (type == "boolean" && value.is_boolean()) || (type == "null" && value.is_null());
    if (!ok) return fail("expected type " + type);
  }
  if (schema.contains("enum")) {
    bool matched = false;
    for (const auto& candidate : schema.at("enum"))
      if (candidate == value) matched = true;
    if (!matched) return fail("value not in enum");
  }
  if (schema.contains("anyOf")) {
    std::string sub_error;
    for (const auto& option : schema.at("anyOf"))
      if (validate_against_schema(value, option, &sub_error)) return true;
    return fail("no anyOf branch matched: " + sub_error);
  }
  if (value.is_object()) {
    if (schema.contains("required")) {
      for (const auto& key : schema.at("required"))
        if (!value.contains(key.get<std::string>()))
          return fail("missing required key " + key.get<std::string>());
    }
    const nlohmann::json props =
        schema.contains("properties") ? schema.at("properties") : nlohmann::json::object();
    if (schema.contains("additionalProperties") &&
        schema.at("additionalProperties").is_boolean() &&
        !schema.at("additionalProperties").get<bool>()) {
      for (auto it = value.begin(); it != value.end(); ++it)
        if (!props.contains(it.key())) return fail("unexpected key " + it.key());
    }
    for (auto it = props.begin(); it != props.end(); ++it) {
      if (!value.contains(it.key())) continue;
      std::string sub_error;
      if (!validate_against_schema(value.at(it.key()), it.value(), &sub_error))
        return fail(it.key() + ": " + sub_error);
    }
  }
  if (value.is_array() && schema.contains("items")) {
    for (size_t i = 0; i < value.size(); ++i) {
      std::string sub_error;
      if (!validate_against_schema(value.at(i), schema.at("items"), &sub_error))
        return fail("item " + std::to_string(i) + ": " + sub_error);
    }
  }
  return true;
}

nlohmann::json load_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw io_error("cannot open " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw parse_error(std::string("malformed JSON in ") + path + ": " + e.what());
  }
  return j;
}

MetricsReport metrics_from_report_json(const nlohmann::json& report) {
  const AccuracyMatrix m = matrix_from_json(report.at("accuracy_matrix"));
  std::vector<Scalar> baseline;
  for (const auto& r : report.at("random_baseline")) baseline.push_back(r.get<Scalar>());
  return compute_metrics(m, baseline);
}

std::string emit_plot_svg(const std::vector<nlohmann::json>& reports) {
  if (reports.empty()) throw config_error("emit_plot needs at least one report");

  // strategy -> per-task running means, averaged across that strategy's runs
  std::map<std::string, std::vector<std::vector<Scalar>>> by_strategy;
  int tasks = 0;
  for (const auto& report : reports) {
    const AccuracyMatrix m = matrix_from_json(report.at("accuracy_matrix"));
    if (tasks == 0) tasks = m.tasks();
    if (m.tasks() != tasks) throw config_error("emit_plot: reports have differing task counts");
    std::vector<Scalar> running(static_cast<size_t>(tasks));
    for (int t = 0; t < tasks; ++t) {
      Scalar sum = 0.0;
      for (int k = 0; k <= t; ++k) sum += m.at(t, k);
      running[static_cast<size_t>(t)] = sum / static_cast<Scalar>(t + 1);
    }
    by_strategy[report.at("config").at("strategy").get<std::string>()].push_back(running);
  }

  const int width = 640, height = 420;
  const int left = 60, right = 20, top = 30, bottom = 50;
  const Scalar plot_w = width - left - right;
  const Scalar plot_h = height - top - bottom;
  auto x_at = [&](int t) {
    return left + (tasks == 1 ? plot_w / 2.0
                              : plot_w * static_cast<Scalar>(t) / static_cast<Scalar>(tasks - 1));
  };
  auto y_at = [&](Scalar acc) { return top + plot_h * (1.0 - acc); };

  static const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};

  std::ostringstream svg;
  svg.precision(12);
  svg << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
      << "\" viewBox=\"0 0 " << width << " " << height << "\">\n";
  svg << "<rect width=\"" << width << "\" height=\"" << height << "\" fill=\"white\"/>\n";
  // axes
  svg << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\""
      << top + plot_h << "\" stroke=\"black\"/>\n";
  svg << "<line x1=\"" << left << "\" y1=\"" << top + plot_h << "\" x2=\"" << left + plot_w
      << "\" y2=\"" << top + plot_h << "\" stroke=\"black\"/>\n";
  for (int tick = 0; tick <= 4; ++tick) {
    const Scalar acc = 0.25 * tick;
    svg << "<text x=\"" << left - 8 << "\" y=\"" << y_at(acc) + 4
        << "\" font-size=\"11\" text-anchor=\"end\">" << acc << "</text>\n";
    svg << "<line x1=\"" << left - 4 << "\" y1=\"" << y_at(acc) << "\" x2=\"" << left << "\" y2=\""
        << y_at(acc) << "\" stroke=\"black\"/>\n";
  }
  for (int t = 0; t < tasks; ++t) {
    svg << "<text x=\"" << x_at(t) << "\" y=\"" << top + plot_h + 18
        << "\" font-size=\"11\" text-anchor=\"middle\">" << (t + 1) << "</text>\n";
  }
  svg << "<text x=\"" << left + plot_w / 2 << "\" y=\"" << height - 12
      << "\" font-size=\"12\" text-anchor=\"middle\">task</text>\n";
  svg << "<text x=\"16\" y=\"" << top + plot_h / 2
      << "\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 16 "
      << top + plot_h / 2 << ")\">average accuracy over seen tasks</text>\n";

  int color_at = 0;
  int legend_y = top + 6;
  for (const auto& [strategy, runs] : by_strategy) {
    std::vector<Scalar> mean(static_cast<size_t>(tasks), 0.0);
    for (const auto& run : runs)
      for (int t = 0; t < tasks; ++t) mean[static_cast<size_t>(t)] += run[static_cast<size_t>(t)];
    for (auto& v : mean) v /= static_cast<Scalar>(runs.size());

    const char* color = kColors[color_at % 6];
    svg << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
    for (int t = 0; t < tasks; ++t) {
      if (t) svg << " ";
      svg << x_at(t) << "," << y_at(mean[static_cast<size_t>(t)]);
    }
    svg << "\"/>\n";
    svg << "<rect x=\"" << left + plot_w - 150 << "\" y=\"" << legend_y - 9
        << "\" width=\"12\" height=\"12\" fill=\"" << color << "\"/>\n";
    svg << "<text x=\"" << left + plot_w - 132 << "\" y=\"" << legend_y + 1
        << "\" font-size=\"11\">" << strategy << "</text>\n";
    legend_y += 18;
    ++color_at;
  }
  svg << "</svg>\n";
  return svg.str();
}

}  // namespace cassle
