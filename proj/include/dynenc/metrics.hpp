#pragma once
// Forecast scoring: RMSE, MAE, MAPE, prefix truncation, incidence proportion
// and the constant-last-value baseline.

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "dynenc/io.hpp"

namespace dynenc {

inline constexpr double kMapeMask = 1e-8;

class MetricError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {
inline void same_length(const std::vector<double>& a, const std::vector<double>& b, const char* op) {
  if (a.size() != b.size() || a.empty())
    throw std::invalid_argument(std::string(op) + ": need equal non-empty lengths (got " +
                                std::to_string(a.size()) + " and " + std::to_string(b.size()) + ")");
}
}  // namespace detail

inline double rmse(const std::vector<double>& pred, const std::vector<double>& truth) {
  detail::same_length(pred, truth, "rmse");
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) s += (pred[i] - truth[i]) * (pred[i] - truth[i]);
  return std::sqrt(s / static_cast<double>(pred.size()));
}

inline double mae(const std::vector<double>& pred, const std::vector<double>& truth) {
  detail::same_length(pred, truth, "mae");
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) s += std::abs(pred[i] - truth[i]);
  return s / static_cast<double>(pred.size());
}

struct MapeResult {
  double value = 0.0;  // percent
  std::size_t masked = 0;
};

// Entries with |truth| < 1e-8 are skipped and counted.
inline MapeResult mape_detail(const std::vector<double>& pred, const std::vector<double>& truth) {
  detail::same_length(pred, truth, "mape");
  MapeResult r;
  double s = 0.0;
  std::size_t used = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (std::abs(truth[i]) < kMapeMask) {
      ++r.masked;
      continue;
    }
    s += std::abs((pred[i] - truth[i]) / truth[i]);
    ++used;
  }
  if (used == 0) throw MetricError("mape: every truth entry is below the mask threshold");
  r.value = 100.0 * s / static_cast<double>(used);
  return r;
}

inline double mape(const std::vector<double>& pred, const std::vector<double>& truth) {
  return mape_detail(pred, truth).value;
}

struct ReportRow {
  double ratio = 0.0;  // NaN marks the average row
  std::size_t length = 0;
  double rmse = 0.0;
  double mae = 0.0;
  double mape = 0.0;
  std::size_t masked = 0;
  bool is_average() const { return std::isnan(ratio); }
};

struct ForecastReport {
  std::vector<ReportRow> rows;  // one per ratio, then the average row

  const ReportRow& average() const { return rows.back(); }
};

inline const std::vector<double>& default_ratios() {
  static const std::vector<double> r{0.1, 0.2, 0.5, 0.7, 0.8, 1.0};
  return r;
}

// pred and truth are [T_test][K] row-major with `width` = K values per step;
// each ratio scores the first ceil(ratio * T_test) steps.
inline ForecastReport truncated_eval(const std::vector<double>& pred, const std::vector<double>& truth,
                                     const std::vector<double>& ratios = default_ratios(),
                                     std::size_t width = 1) {
  detail::same_length(pred, truth, "truncated_eval");
  if (width == 0 || pred.size() % width != 0)
    throw std::invalid_argument("truncated_eval: length is not a multiple of the row width");
  if (ratios.empty()) throw std::invalid_argument("truncated_eval: no ratios");
  const std::size_t steps = pred.size() / width;
  ForecastReport rep;
  ReportRow avg;
  avg.ratio = std::nan("");
  for (double r : ratios) {
    if (!(r > 0 && r <= 1)) throw std::invalid_argument("truncated_eval: ratio must be in (0, 1]");
    // Guard against 0.7 * 10 = 7.000000000000001 rounding up.
    auto len = static_cast<std::size_t>(std::ceil(r * static_cast<double>(steps) - 1e-9));
    if (len < 1) len = 1;
    std::vector<double> p(pred.begin(), pred.begin() + static_cast<std::ptrdiff_t>(len * width));
    std::vector<double> t(truth.begin(), truth.begin() + static_cast<std::ptrdiff_t>(len * width));
    auto m = mape_detail(p, t);
    ReportRow row{r, len, rmse(p, t), mae(p, t), m.value, m.masked};
    avg.rmse += row.rmse;
    avg.mae += row.mae;
    avg.mape += row.mape;
    avg.masked += row.masked;
    rep.rows.push_back(row);
  }
  const double n = static_cast<double>(ratios.size());
  avg.rmse /= n;
  avg.mae /= n;
  avg.mape /= n;
  avg.length = steps;
  rep.rows.push_back(avg);
  return rep;
}

// flows [N][T] row-major; each column divided by its total.
inline std::vector<double> incidence_proportion(const std::vector<double>& flows, std::size_t n,
                                                std::size_t t) {
  if (flows.size() != n * t || n == 0 || t == 0)
    throw std::invalid_argument("incidence_proportion: flows is not [N][T]");
  std::vector<double> out(flows.size());
  for (std::size_t c = 0; c < t; ++c) {
    double total = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
      if (flows[r * t + c] < 0) throw std::invalid_argument("incidence_proportion: negative flow");
      total += flows[r * t + c];
    }
    if (!(total > 0))
      throw MetricError("incidence_proportion: column " + std::to_string(c) + " sums to zero");
    for (std::size_t r = 0; r < n; ++r) out[r * t + c] = flows[r * t + c] / total;
  }
  return out;
}

inline std::vector<double> persistence_baseline(double last, std::size_t horizon) {
  if (horizon < 1) throw std::invalid_argument("persistence_baseline: horizon must be >= 1");
  return std::vector<double>(horizon, last);
}

// Header: system,ratio,rmse,mae,mape (the average row has ratio "avg").
inline void write_report_csv(const fs::path& path,
                             const std::vector<std::pair<std::string, ForecastReport>>& reports) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out.precision(10);
  out << "system,ratio,rmse,mae,mape\n";
  for (const auto& [name, rep] : reports)
    for (const auto& r : rep.rows) {
      out << name << ',';
      if (r.is_average())
        out << "avg";
      else
        out << r.ratio;
      out << ',' << r.rmse << ',' << r.mae << ',' << r.mape << '\n';
    }
}

}  // namespace dynenc
