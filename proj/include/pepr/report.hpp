#pragma once

// Comparison and ablation reports: report.json (full structure),
// report.csv (flat rows) and report.md (table with deltas against rgb_only).

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "pepr/dataset.hpp"
#include "pepr/eval.hpp"
#include "pepr/training.hpp"

namespace pepr::report {

using nlohmann::json;

struct RunResult {
  std::string method;  // rgb_only, l2_align, pepr
  std::uint64_t seed = 0;
  std::vector<DomainResult> domains;
};

inline double median(std::vector<double> v) {
  require(!v.empty(), "median of empty set");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline std::string train_modalities(const std::string& method) { return method == "rgb_only" ? "RGB" : "RGB+E"; }

inline int method_rank(const std::string& m) {
  if (m == "rgb_only") return 0;
  if (m == "l2_align") return 1;
  if (m == "pepr") return 2;
  return 3;
}

// Builds the report.json document. Cells hold the median over seeds of the
// headline metric (mIoU or mAP50:95); deltas are taken against rgb_only.
inline json build_comparison(const std::vector<RunResult>& runs) {
  require(!runs.empty(), "report: no runs");
  std::vector<std::string> methods, domains;
  std::map<std::string, std::map<std::string, std::vector<double>>> values;
  std::map<std::string, std::vector<std::uint64_t>> seeds;
  std::optional<Task> task;
  for (const auto& r : runs) {
    if (std::find(methods.begin(), methods.end(), r.method) == methods.end()) methods.push_back(r.method);
    seeds[r.method].push_back(r.seed);
    for (const auto& d : r.domains) {
      if (std::find(domains.begin(), domains.end(), d.domain) == domains.end()) domains.push_back(d.domain);
      if (task && *task != d.task) throw ValidationError("report: runs mix segmentation and detection results");
      task = d.task;
      if (!d.error) values[r.method][d.domain].push_back(d.primary());
    }
  }
  require(!domains.empty() && task.has_value(), "report: runs carry no domain results");
  std::stable_sort(methods.begin(), methods.end(),
                   [](const std::string& a, const std::string& b) { return method_rank(a) < method_rank(b); });

  std::map<std::string, double> baseline;
  const bool has_baseline = values.count("rgb_only") > 0;
  if (has_baseline)
    for (const auto& [d, v] : values["rgb_only"]) baseline[d] = median(v);

  json rows = json::array();
  for (const auto& m : methods) {
    json cells = json::object();
    for (const auto& d : domains) {
      const auto& v = values[m][d];
      json c;
      c["runs"] = v;
      if (v.empty()) {
        c["median"] = nullptr;
      } else {
        c["median"] = median(v);
        if (has_baseline && m != "rgb_only" && baseline.count(d)) c["delta"] = median(v) - baseline[d];
      }
      cells[d] = c;
    }
    auto s = seeds[m];
    std::sort(s.begin(), s.end());
    rows.push_back({{"method", m},
                    {"train_modalities", train_modalities(m)},
                    {"test_modalities", "RGB"},
                    {"seeds", s},
                    {"cells", cells}});
  }
  json full = json::array();
  for (const auto& r : runs) {
    json ds = json::array();
    for (const auto& d : r.domains) ds.push_back(to_json(d));
    full.push_back({{"method", r.method}, {"seed", r.seed}, {"domains", ds}});
  }
  return {{"kind", "comparison"},
          {"task", to_string(*task)},
          {"metric", *task == Task::segmentation ? "miou" : "map_50_95"},
          {"aggregation", "median"},
          {"domains", domains},
          {"rows", rows},
          {"runs", full}};
}

inline std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

inline std::string csv_number(const json& v) { return v.is_null() ? "" : fmt("%.6f", v.get<double>()); }

// Flat rows, one per (row, domain). Rendered from report.json alone so that
// parsing the JSON back and re-rendering reproduces the same bytes.
inline std::string render_csv(const json& report) {
  const bool ablation = report.at("kind") == "ablation";
  std::string out = ablation ? "axis,label,domain,metric,value,n_runs\n"
                             : "method,train_modalities,test_modalities,domain,metric,value,delta,n_runs\n";
  const std::string metric = report.at("metric").get<std::string>();
  for (const auto& row : report.at("rows")) {
    for (const auto& d : report.at("domains")) {
      const json& c = row.at("cells").at(d.get<std::string>());
      const std::string n = std::to_string(c.at("runs").size());
      if (ablation) {
        out += report.at("axis").get<std::string>() + "," + row.at("label").get<std::string>() + "," +
               d.get<std::string>() + "," + metric + "," + csv_number(c.at("median")) + "," + n + "\n";
      } else {
        out += row.at("method").get<std::string>() + "," + row.at("train_modalities").get<std::string>() + "," +
               row.at("test_modalities").get<std::string>() + "," + d.get<std::string>() + "," + metric + "," +
               csv_number(c.at("median")) + "," + (c.contains("delta") ? csv_number(c["delta"]) : "") + "," + n +
               "\n";
      }
    }
  }
  return out;
}

// Values in percent with two decimals; deltas in parentheses, "(+x.xx)".
inline std::string percent(double v) { return fmt("%.2f", 100.0 * v); }

inline std::string signed_delta(double d) {
  double p = std::round(100.0 * d * 100.0) / 100.0;
  if (p == 0.0) p = 0.0;  // no "-0.00"
  return "(" + std::string(p >= 0.0 ? "+" : "") + fmt("%.2f", p) + ")";
}

inline std::string render_markdown(const json& report) {
  const bool ablation = report.at("kind") == "ablation";
  const std::string metric = report.at("metric") == "miou" ? "mIoU" : "mAP50:95";
  std::string head, rule;
  if (ablation) {
    head = "| " + report.at("label_header").get<std::string>() + " |";
    rule = "|---|";
  } else {
    head = "| Model | Train Mod. | Test Mod. |";
    rule = "|---|---|---|";
  }
  for (const auto& d : report.at("domains")) {
    head += " " + d.get<std::string>() + " " + metric + " |";
    rule += "---|";
  }
  std::string out = head + "\n" + rule + "\n";
  for (const auto& row : report.at("rows")) {
    std::string line = ablation ? "| " + row.at("label").get<std::string>() + " |"
                                : "| " + row.at("method").get<std::string>() + " | " +
                                      row.at("train_modalities").get<std::string>() + " | " +
                                      row.at("test_modalities").get<std::string>() + " |";
    for (const auto& d : report.at("domains")) {
      const json& c = row.at("cells").at(d.get<std::string>());
      if (c.at("median").is_null()) {
        line += " n/a |";
        continue;
      }
      line += " " + percent(c["median"].get<double>());
      if (c.contains("delta")) line += " " + signed_delta(c["delta"].get<double>());
      line += " |";
    }
    out += line + "\n";
  }
  out += "\nValues are " + metric + " in percent, median over seeds.";
  if (!ablation) out += " Deltas in parentheses are against rgb_only.";
  out += "\n";
  return out;
}

inline void write_report(const json& report, const std::filesystem::path& out_dir) {
  try {
    std::filesystem::create_directories(out_dir);
  } catch (const std::filesystem::filesystem_error& e) {
    throw IoError(std::string("cannot create report directory (") + e.what() + ")", out_dir.string());
  }
  data::write_file(out_dir / "report.json", report.dump(2) + "\n");
  data::write_file(out_dir / "report.csv", render_csv(report));
  data::write_file(out_dir / "report.md", render_markdown(report));
}

inline json write_report(const std::vector<RunResult>& runs, const std::filesystem::path& out_dir) {
  json r = build_comparison(runs);
  write_report(r, out_dir);
  return r;
}

struct AblationPoint {
  std::string label;  // e.g. "s=4,M=2" or "task=1,feat=0.5"
  json settings;
  std::vector<RunResult> runs;
};

inline json build_ablation(const std::string& axis, const std::string& label_header,
                           const std::vector<AblationPoint>& points) {
  require(!points.empty(), "ablation report: no grid points");
  std::vector<std::string> domains;
  std::optional<Task> task;
  for (const auto& p : points)
    for (const auto& r : p.runs)
      for (const auto& d : r.domains) {
        if (std::find(domains.begin(), domains.end(), d.domain) == domains.end()) domains.push_back(d.domain);
        task = d.task;
      }
  require(task.has_value(), "ablation report: no results");
  json rows = json::array();
  for (const auto& p : points) {
    json cells = json::object();
    for (const auto& d : domains) {
      std::vector<double> v;
      for (const auto& r : p.runs)
        for (const auto& x : r.domains)
          if (x.domain == d && !x.error) v.push_back(x.primary());
      cells[d] = {{"runs", v}, {"median", v.empty() ? json(nullptr) : json(median(v))}};
    }
    rows.push_back({{"label", p.label}, {"settings", p.settings}, {"cells", cells}});
  }
  return {{"kind", "ablation"},
          {"axis", axis},
          {"label_header", label_header},
          {"task", to_string(*task)},
          {"metric", *task == Task::segmentation ? "miou" : "map_50_95"},
          {"aggregation", "median"},
          {"domains", domains},
          {"rows", rows}};
}

}  // namespace pepr::report
