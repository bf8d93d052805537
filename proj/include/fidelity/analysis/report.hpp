#pragma once

#include "fidelity/analysis/stability.hpp"
#include "fidelity/metric/metric.hpp"
#include "fidelity/rules/rules.hpp"

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace fidelity::analysis {

enum class ReportFormat { csv, json, plot_data };

ReportFormat parse_report_format(std::string_view s);

enum class PlotAxis { k, n_train };

// csv: one row per report, fixed columns then per-proxy PPLs by name.
// json: array of report objects. plot-data: `target` is a directory with one
// "x y" file per (method, family, scenario) series.
std::vector<std::filesystem::path> emit_report(const std::vector<metric::MetricReport>& reports, ReportFormat format,
                                               const std::filesystem::path& target, PlotAxis axis = PlotAxis::k);

std::string reports_csv(const std::vector<metric::MetricReport>& reports);

// Rows Base, FN, RN, SA, Comb (those present); one column per method in
// first-seen order. Comb is the per-method minimum over FN/RN/SA.
std::string metric_matrix(const std::vector<metric::MetricReport>& reports,
                          const std::map<std::string, double>& baseline_ppl = {});

std::string density_table(const std::vector<std::pair<std::string, rules::DensityHistogram>>& rows);

std::string stability_csv(const StabilityTable& table);

struct RankRow {
  std::string method;
  double ppl = 0.0;
  double aer = 0.0;
};

// Methods ranked by PPL and by AER (1 = best); "*" marks a method whose two
// ranks differ.
std::string rank_comparison(const std::vector<RankRow>& rows);

void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace fidelity::analysis
