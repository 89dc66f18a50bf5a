#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dualnet/metrics.hpp"

namespace dualnet {

/// Shortest text that parses back to the same double.
inline std::string exact(double v) {
  char buf[32];
  for (int precision = 15; precision <= 17; ++precision) {
    std::snprintf(buf, sizeof buf, "%.*g", precision, v);
    if (std::stod(buf) == v) break;
  }
  return buf;
}

/// Row i = after task i; column j = task j; entries above the diagonal empty.
inline std::string matrix_csv(const AccuracyMatrix& m) {
  std::ostringstream os;
  os << "after_task";
  for (std::size_t j = 0; j < m.tasks(); ++j) os << ",task_" << j;
  os << '\n';
  for (std::size_t i = 0; i < m.tasks(); ++i) {
    os << i;
    for (std::size_t j = 0; j < m.tasks(); ++j) {
      os << ',';
      if (j <= i && m.defined(i, j)) os << exact(m.at(i, j));
    }
    os << '\n';
  }
  return os.str();
}

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline std::string slurp(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

}  // namespace detail

inline AccuracyMatrix parse_matrix_csv(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  std::getline(is, line);
  std::vector<std::vector<double>> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto cells = detail::split_csv_line(line);
    const std::size_t i = rows.size();
    if (cells.size() < i + 2) throw std::invalid_argument("accuracy CSV row " + std::to_string(i) + " is short");
    std::vector<double> row;
    for (std::size_t j = 0; j <= i; ++j) row.push_back(std::stod(cells[j + 1]));
    rows.push_back(std::move(row));
  }
  return AccuracyMatrix::from_rows(rows);
}

struct MetricRow {
  std::string method;
  std::string stream;
  std::uint64_t seed = 0;
  Metrics metrics;
};

inline constexpr const char* kMetricsHeader = "method,stream,seed,acc,fm,bwt,la";

inline std::string metrics_csv(const std::vector<MetricRow>& rows) {
  std::ostringstream os;
  os << kMetricsHeader << '\n';
  for (const auto& r : rows) {
    os << r.method << ',' << r.stream << ',' << r.seed << ',' << exact(r.metrics.acc) << ',' << exact(r.metrics.fm)
       << ',' << exact(r.metrics.bwt) << ',' << exact(r.metrics.la) << '\n';
  }
  return os.str();
}

inline std::vector<MetricRow> parse_metrics_csv(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  std::getline(is, line);
  if (line != kMetricsHeader) throw std::invalid_argument("metrics CSV must start with '" + std::string(kMetricsHeader) + "'");
  std::vector<MetricRow> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto c = detail::split_csv_line(line);
    if (c.size() != 7) throw std::invalid_argument("metrics CSV line has " + std::to_string(c.size()) + " fields: " + line);
    rows.push_back({c[0], c[1], std::stoull(c[2]), {std::stod(c[3]), std::stod(c[4]), std::stod(c[5]), std::stod(c[6])}});
  }
  return rows;
}

/// One (method, stream) group of a comparison.
struct ComparisonRow {
  std::string method;
  std::string stream;
  MetricReport report;
};

/// Groups per-seed rows by (method, stream). Sorted by stream, then by mean
/// ACC descending.
inline std::vector<ComparisonRow> compare(const std::vector<MetricRow>& rows) {
  std::map<std::pair<std::string, std::string>, std::vector<Metrics>> groups;
  for (const auto& r : rows) groups[{r.stream, r.method}].push_back(r.metrics);
  std::vector<ComparisonRow> out;
  for (const auto& [key, ms] : groups) out.push_back({key.second, key.first, MetricReport::of(ms)});
  std::stable_sort(out.begin(), out.end(), [](const ComparisonRow& a, const ComparisonRow& b) {
    if (a.stream != b.stream) return a.stream < b.stream;
    return a.report.acc.mean > b.report.acc.mean;
  });
  return out;
}

inline std::string pm(const Summary& s, double scale = 100.0) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f ± %.2f", s.mean * scale, s.stddev * scale);
  return buf;
}

/// Markdown table; accuracies in percent.
inline std::string comparison_markdown(const std::vector<ComparisonRow>& rows) {
  std::ostringstream os;
  os << "| Stream | Method | Seeds | ACC | FM | BWT | LA |\n";
  os << "|---|---|---|---|---|---|---|\n";
  for (const auto& r : rows) {
    os << "| " << r.stream << " | " << r.method << " | " << r.report.per_seed.size() << " | " << pm(r.report.acc)
       << " | " << pm(r.report.fm) << " | " << pm(r.report.bwt) << " | " << pm(r.report.la) << " |\n";
  }
  return os.str();
}

inline std::string comparison_csv(const std::vector<ComparisonRow>& rows) {
  std::ostringstream os;
  os << "stream,method,seeds,acc_mean,acc_std,fm_mean,fm_std,bwt_mean,bwt_std,la_mean,la_std\n";
  for (const auto& r : rows) {
    const auto& p = r.report;
    os << r.stream << ',' << r.method << ',' << p.per_seed.size() << ',' << exact(p.acc.mean) << ','
       << exact(p.acc.stddev) << ',' << exact(p.fm.mean) << ',' << exact(p.fm.stddev) << ',' << exact(p.bwt.mean)
       << ',' << exact(p.bwt.stddev) << ',' << exact(p.la.mean) << ',' << exact(p.la.stddev) << '\n';
  }
  return os.str();
}

/// Reads metrics.csv from each run directory and merges them. Warns when the
/// directories cover different streams; their rows stay in separate groups.
inline std::vector<ComparisonRow> report_runs(const std::vector<std::filesystem::path>& dirs, std::ostream& warn = std::cerr) {
  if (dirs.empty()) throw std::invalid_argument("report needs at least one run directory");
  std::vector<MetricRow> all;
  std::vector<std::string> streams;
  for (const auto& d : dirs) {
    const auto path = d / "metrics.csv";
    if (!std::filesystem::exists(path)) throw std::runtime_error(d.string() + " is not a completed run (no metrics.csv)");
    for (auto& r : parse_metrics_csv(detail::slurp(path))) {
      if (std::find(streams.begin(), streams.end(), r.stream) == streams.end()) streams.push_back(r.stream);
      all.push_back(std::move(r));
    }
  }
  if (streams.size() > 1) {
    warn << "warning: runs cover different stream kinds (";
    for (std::size_t i = 0; i < streams.size(); ++i) warn << (i ? ", " : "") << streams[i];
    warn << "); rows are kept separate\n";
  }
  return compare(all);
}

}  // namespace dualnet
