#include "fidelity/analysis/report.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>

namespace fidelity::analysis {

namespace {

std::string num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::vector<std::size_t> ranks(const std::vector<double>& v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<std::size_t> rank(v.size());
  for (std::size_t r = 0; r < order.size(); ++r) rank[order[r]] = r + 1;
  return rank;
}

}  // namespace

ReportFormat parse_report_format(std::string_view s) {
  if (s == "csv") return ReportFormat::csv;
  if (s == "json") return ReportFormat::json;
  if (s == "plot-data" || s == "plot") return ReportFormat::plot_data;
  throw std::invalid_argument("unknown report format '" + std::string(s) + "' (csv, json, plot-data)");
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  out << text;
}

std::string reports_csv(const std::vector<metric::MetricReport>& reports) {
  std::set<std::string> proxies;
  for (const auto& r : reports) {
    for (const auto& [name, _] : r.per_proxy_ppl) proxies.insert(name);
  }
  std::ostringstream out;
  out << "method,k,scenario,family,metric_ppl,winner,n_train,n_test,seed";
  for (const auto& p : proxies) out << ',' << p;
  out << '\n';
  for (const auto& r : reports) {
    out << explain::to_string(r.method) << ',' << r.k << ',' << rules::to_string(r.scenario) << ',' << r.family << ','
        << num(r.metric_ppl) << ',' << r.winner << ',' << r.n_train << ',' << r.n_test << ',' << r.seed;
    for (const auto& p : proxies) {
      auto it = r.per_proxy_ppl.find(p);
      out << ',' << (it == r.per_proxy_ppl.end() ? "" : num(it->second));
    }
    out << '\n';
  }
  return out.str();
}

std::vector<std::filesystem::path> emit_report(const std::vector<metric::MetricReport>& reports, ReportFormat format,
                                               const std::filesystem::path& target, PlotAxis axis) {
  if (reports.empty()) throw std::invalid_argument("no reports to emit");
  switch (format) {
    case ReportFormat::csv:
      write_text(target, reports_csv(reports));
      return {target};
    case ReportFormat::json: {
      nlohmann::ordered_json arr = nlohmann::ordered_json::array();
      for (const auto& r : reports) arr.push_back(metric::report_to_json(r));
      write_text(target, arr.dump(2) + "\n");
      return {target};
    }
    case ReportFormat::plot_data: {
      std::map<std::string, std::vector<std::pair<double, double>>> series;
      for (const auto& r : reports) {
        const std::string name =
            explain::to_string(r.method) + "." + r.family + "." + rules::to_string(r.scenario) + ".dat";
        const double x = axis == PlotAxis::k ? static_cast<double>(r.k) : static_cast<double>(r.n_train);
        series[name].emplace_back(x, r.metric_ppl);
      }
      std::vector<std::filesystem::path> files;
      for (auto& [name, points] : series) {
        std::stable_sort(points.begin(), points.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
        std::string text;
        for (const auto& [x, y] : points) text += num(x) + " " + num(y) + "\n";
        files.push_back(target / name);
        write_text(files.back(), text);
      }
      return files;
    }
  }
  throw std::invalid_argument("unknown report format");
}

std::string metric_matrix(const std::vector<metric::MetricReport>& reports,
                          const std::map<std::string, double>& baseline_ppl) {
  std::vector<std::string> methods;
  std::map<std::string, std::map<std::string, double>> cells;  // method -> proxy -> ppl
  for (const auto& r : reports) {
    const auto m = explain::to_string(r.method);
    if (std::find(methods.begin(), methods.end(), m) == methods.end()) methods.push_back(m);
    for (const auto& [p, v] : r.per_proxy_ppl) cells[m][p] = v;
  }
  for (const auto& [m, _] : baseline_ppl) {
    if (std::find(methods.begin(), methods.end(), m) == methods.end()) methods.push_back(m);
  }
  for (auto& [m, row] : cells) {
    if (row.contains("FN") && row.contains("RN") && row.contains("SA")) {
      row["Comb"] = std::min({row["FN"], row["RN"], row["SA"]});
    }
  }
  std::ostringstream out;
  out << "metric";
  for (const auto& m : methods) out << ',' << m;
  out << '\n';
  auto emit_row = [&](const std::string& name, auto lookup) {
    bool any = false;
    std::ostringstream row;
    row << name;
    for (const auto& m : methods) {
      const auto v = lookup(m);
      row << ',' << (v ? num(*v) : "-");
      any = any || v.has_value();
    }
    if (any) out << row.str() << '\n';
  };
  emit_row("Base", [&](const std::string& m) -> std::optional<double> {
    auto it = baseline_ppl.find(m);
    return it == baseline_ppl.end() ? std::nullopt : std::optional<double>(it->second);
  });
  for (const char* proxy : {"FN", "RN", "SA", "Comb"}) {
    emit_row(proxy, [&](const std::string& m) -> std::optional<double> {
      auto row = cells.find(m);
      if (row == cells.end()) return std::nullopt;
      auto it = row->second.find(proxy);
      return it == row->second.end() ? std::nullopt : std::optional<double>(it->second);
    });
  }
  return out.str();
}

std::string density_table(const std::vector<std::pair<std::string, rules::DensityHistogram>>& rows) {
  std::ostringstream out;
  out << "method,total,B1,B2,B3,B4,B5\n";
  for (const auto& [method, h] : rows) {
    out << method << ',' << h.total;
    for (auto b : h.bins) out << ',' << b;
    out << '\n';
  }
  return out.str();
}

std::string stability_csv(const StabilityTable& table) {
  std::ostringstream out;
  out << "fraction";
  for (const auto& c : table.columns) out << ',' << c;
  out << '\n';
  for (std::size_t f = 0; f < table.fractions.size(); ++f) {
    out << num(table.fractions[f]);
    for (double rate : table.rates[f]) out << ',' << fixed(rate, 1);
    out << '\n';
  }
  return out.str();
}

std::string rank_comparison(const std::vector<RankRow>& rows) {
  std::vector<double> ppl, aer;
  for (const auto& r : rows) {
    ppl.push_back(r.ppl);
    aer.push_back(r.aer);
  }
  const auto ppl_rank = ranks(ppl);
  const auto aer_rank = ranks(aer);
  std::ostringstream out;
  out << "method,ppl,ppl_rank,aer,aer_rank\n";
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const char* mark = ppl_rank[i] == aer_rank[i] ? "" : "*";
    out << rows[i].method << ',' << num(rows[i].ppl) << ',' << ppl_rank[i] << mark << ',' << num(rows[i].aer) << ','
        << aer_rank[i] << mark << '\n';
  }
  return out.str();
}

}  // namespace fidelity::analysis
