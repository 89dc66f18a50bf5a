#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace dualnet {

/// Lower-triangular grid: at(i, j) is the accuracy on task j measured right
/// after training on task i, defined for j <= i.
class AccuracyMatrix {
 public:
  AccuracyMatrix() = default;
  explicit AccuracyMatrix(std::size_t tasks) : rows_(tasks) {
    for (std::size_t i = 0; i < tasks; ++i) rows_[i].assign(i + 1, kMissing);
  }

  static AccuracyMatrix from_rows(const std::vector<std::vector<double>>& rows) {
    AccuracyMatrix m(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (rows[i].size() < i + 1) throw std::invalid_argument("row " + std::to_string(i) + " is incomplete");
      for (std::size_t j = 0; j <= i; ++j) m.set(i, j, rows[i][j]);
    }
    return m;
  }

  std::size_t tasks() const { return rows_.size(); }

  double at(std::size_t i, std::size_t j) const {
    if (j > i || i >= rows_.size()) throw std::out_of_range("accuracy entry (" + std::to_string(i) + ", " +
                                                            std::to_string(j) + ") is above the diagonal");
    return rows_[i][j];
  }
  bool defined(std::size_t i, std::size_t j) const {
    return i < rows_.size() && j <= i && !std::isnan(rows_[i][j]);
  }

  void set(std::size_t i, std::size_t j, double value) {
    if (j > i || i >= rows_.size()) throw std::out_of_range("accuracy entry above the diagonal");
    if (!(value >= 0.0 && value <= 1.0)) throw std::invalid_argument("accuracy must lie in [0, 1]");
    rows_[i][j] = value;
  }

  bool row_complete(std::size_t i) const {
    return i < rows_.size() && std::none_of(rows_[i].begin(), rows_[i].end(), [](double v) { return std::isnan(v); });
  }
  bool complete() const {
    for (std::size_t i = 0; i < rows_.size(); ++i)
      if (!row_complete(i)) return false;
    return !rows_.empty();
  }

  const std::vector<std::vector<double>>& rows() const { return rows_; }
  friend bool operator==(const AccuracyMatrix& a, const AccuracyMatrix& b) { return a.rows_ == b.rows_; }

 private:
  static constexpr double kMissing = std::numeric_limits<double>::quiet_NaN();
  std::vector<std::vector<double>> rows_;
};

namespace detail {

inline void require_complete(const AccuracyMatrix& m, const char* metric) {
  if (!m.complete()) throw std::invalid_argument(std::string(metric) + ": accuracy matrix is incomplete");
}
inline void require_two(const AccuracyMatrix& m, const char* metric) {
  require_complete(m, metric);
  if (m.tasks() < 2) throw std::invalid_argument(std::string(metric) + " is undefined for a single task");
}

}  // namespace detail

/// Mean of the final row.
inline double acc(const AccuracyMatrix& m) {
  if (m.tasks() == 0 || !m.row_complete(m.tasks() - 1)) throw std::invalid_argument("acc: final row is incomplete");
  const auto& row = m.rows().back();
  double s = 0;
  for (double v : row) s += v;
  return s / static_cast<double>(row.size());
}

/// Mean over the first T-1 tasks of (best accuracy ever seen - final).
inline double fm(const AccuracyMatrix& m) {
  detail::require_two(m, "fm");
  const std::size_t t = m.tasks();
  double s = 0;
  for (std::size_t j = 0; j + 1 < t; ++j) {
    double best = m.at(j, j);
    for (std::size_t l = j + 1; l + 1 < t; ++l) best = std::max(best, m.at(l, j));
    s += best - m.at(t - 1, j);
  }
  return s / static_cast<double>(t - 1);
}

/// Mean over the first T-1 tasks of (final accuracy - accuracy just after learning).
inline double bwt(const AccuracyMatrix& m) {
  detail::require_two(m, "bwt");
  const std::size_t t = m.tasks();
  double s = 0;
  for (std::size_t j = 0; j + 1 < t; ++j) s += m.at(t - 1, j) - m.at(j, j);
  return s / static_cast<double>(t - 1);
}

/// Mean of the diagonal.
inline double la(const AccuracyMatrix& m) {
  detail::require_complete(m, "la");
  double s = 0;
  for (std::size_t i = 0; i < m.tasks(); ++i) s += m.at(i, i);
  return s / static_cast<double>(m.tasks());
}

struct Metrics {
  double acc = 0, fm = 0, bwt = 0, la = 0;
};

/// fm and bwt are reported as 0 for single-task runs.
inline Metrics compute_metrics(const AccuracyMatrix& m) {
  Metrics r;
  r.acc = acc(m);
  r.la = la(m);
  if (m.tasks() >= 2) {
    r.fm = fm(m);
    r.bwt = bwt(m);
  }
  return r;
}

struct Summary {
  double mean = 0;
  double stddev = 0;  ///< sample standard deviation; 0 for one value
};

inline Summary summarize(const std::vector<double>& xs) {
  if (xs.empty()) throw std::invalid_argument("summarize: no values");
  Summary s;
  for (double x : xs) s.mean += x;
  s.mean /= static_cast<double>(xs.size());
  if (xs.size() > 1) {
    double ss = 0;
    for (double x : xs) ss += (x - s.mean) * (x - s.mean);
    s.stddev = std::sqrt(ss / static_cast<double>(xs.size() - 1));
  }
  return s;
}

/// Metrics of several seeds of one configuration.
struct MetricReport {
  std::vector<Metrics> per_seed;
  Summary acc, fm, bwt, la;

  static MetricReport of(const std::vector<Metrics>& runs) {
    MetricReport r;
    r.per_seed = runs;
    std::vector<double> a, f, b, l;
    for (const auto& m : runs) {
      a.push_back(m.acc);
      f.push_back(m.fm);
      b.push_back(m.bwt);
      l.push_back(m.la);
    }
    r.acc = summarize(a);
    r.fm = summarize(f);
    r.bwt = summarize(b);
    r.la = summarize(l);
    return r;
  }
};

}  // namespace dualnet
