#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <fstream>

#include "dynenc/metrics.hpp"
#include "dynenc/rng.hpp"
#include "test_util.hpp"

using namespace dynenc;

TEST(PointMetrics, PerfectForecastIsZero) {
  std::vector<double> x{1, -2, 3};
  EXPECT_EQ(rmse(x, x), 0.0);
  EXPECT_EQ(mae(x, x), 0.0);
  EXPECT_EQ(mape(x, x), 0.0);
}

TEST(PointMetrics, HandExamples) {
  EXPECT_DOUBLE_EQ(mape({1}, {2}), 50.0);
  EXPECT_NEAR(rmse({0, 0}, {3, 4}), 3.5355, 1e-4);
  EXPECT_DOUBLE_EQ(mae({0, 0}, {3, 4}), 3.5);
}

TEST(PointMetrics, MapeMasksTinyTruths) {
  auto r = mape_detail({1, 5}, {0.0, 4.0});
  EXPECT_EQ(r.masked, 1u);
  EXPECT_DOUBLE_EQ(r.value, 25.0);
  EXPECT_THROW(mape({1, 2}, {0, 1e-9}), MetricError);
  EXPECT_THROW(rmse({1}, {1, 2}), std::invalid_argument);
  EXPECT_THROW(mae({}, {}), std::invalid_argument);
}

TEST(PointMetrics, PermutationInvariantAndScaleCovariant) {
  Rng rng = make_stream(1, "test.metrics");
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> p(17), t(17);
    for (std::size_t i = 0; i < 17; ++i) p[i] = uniform(rng, -3, 3), t[i] = uniform(rng, 1, 4);
    std::vector<std::size_t> idx(17);
    for (std::size_t i = 0; i < 17; ++i) idx[i] = (i * 5 + 3) % 17;
    std::vector<double> pp, tp, ps, ts;
    for (auto i : idx) pp.push_back(p[i]), tp.push_back(t[i]);
    const double c = uniform(rng, 0.1, 10);
    for (std::size_t i = 0; i < 17; ++i) ps.push_back(c * p[i]), ts.push_back(c * t[i]);
    EXPECT_NEAR(rmse(pp, tp), rmse(p, t), 1e-12);
    EXPECT_NEAR(mae(pp, tp), mae(p, t), 1e-12);
    EXPECT_NEAR(mape(pp, tp), mape(p, t), 1e-10);
    EXPECT_NEAR(rmse(ps, ts), c * rmse(p, t), 1e-10);
    EXPECT_NEAR(mae(ps, ts), c * mae(p, t), 1e-10);
    EXPECT_NEAR(mape(ps, ts), mape(p, t), 1e-9);
  }
}

TEST(TruncatedEval, PrefixLengthsAndFullRow) {
  std::vector<double> truth(10), pred(10);
  for (std::size_t i = 0; i < 10; ++i) truth[i] = 1.0 + static_cast<double>(i), pred[i] = truth[i] + 0.5;
  auto rep = truncated_eval(pred, truth);
  ASSERT_EQ(rep.rows.size(), 7u);
  std::vector<std::size_t> lens;
  for (std::size_t k = 0; k < 6; ++k) lens.push_back(rep.rows[k].length);
  EXPECT_EQ(lens, (std::vector<std::size_t>{1, 2, 5, 7, 8, 10}));
  EXPECT_DOUBLE_EQ(rep.rows[5].rmse, rmse(pred, truth));
  EXPECT_DOUBLE_EQ(rep.rows[5].mape, mape(pred, truth));
  EXPECT_TRUE(rep.average().is_average());
}

TEST(TruncatedEval, AverageRowIsMeanOfRatioRows) {
  Rng rng = make_stream(2, "test.metrics");
  std::vector<double> p(60), t(60);
  for (std::size_t i = 0; i < 60; ++i) p[i] = uniform(rng, -1, 1), t[i] = uniform(rng, 1, 2);
  auto rep = truncated_eval(p, t, default_ratios(), 3);
  double r = 0, a = 0, m = 0;
  for (std::size_t k = 0; k < 6; ++k) {
    r += rep.rows[k].rmse;
    a += rep.rows[k].mae;
    m += rep.rows[k].mape;
    EXPECT_GE(rep.rows[k].rmse, 0.0);
  }
  EXPECT_NEAR(rep.average().rmse, r / 6, 1e-12);
  EXPECT_NEAR(rep.average().mae, a / 6, 1e-12);
  EXPECT_NEAR(rep.average().mape, m / 6, 1e-12);
  EXPECT_EQ(rep.rows[0].length, 2u);  // ceil(0.1 * 20)
}

TEST(TruncatedEval, ConstantSeriesScoreZero) {
  auto rep = truncated_eval(std::vector<double>(8, 2.0), std::vector<double>(8, 2.0));
  for (const auto& row : rep.rows) {
    EXPECT_EQ(row.rmse, 0.0);
    EXPECT_EQ(row.mape, 0.0);
  }
}

TEST(TruncatedEval, GrowingErrorGivesNonDecreasingMape) {
  std::vector<double> truth(50, 10.0), pred(50);
  for (std::size_t i = 0; i < 50; ++i) pred[i] = 10.0 + 0.1 * static_cast<double>(i);
  auto rep = truncated_eval(pred, truth);
  for (std::size_t k = 1; k < 6; ++k) EXPECT_GE(rep.rows[k].mape, rep.rows[k - 1].mape);
}

TEST(TruncatedEval, RejectsBadRatios) {
  std::vector<double> x(4, 1.0);
  EXPECT_THROW(truncated_eval(x, x, {0.0}), std::invalid_argument);
  EXPECT_THROW(truncated_eval(x, x, {1.5}), std::invalid_argument);
  EXPECT_THROW(truncated_eval(x, x, {0.5}, 3), std::invalid_argument);
}

TEST(IncidenceProportion, ColumnsNormalize) {
  auto ip = incidence_proportion({30, 5, 70, 15}, 2, 2);  // [N=2][T=2]
  EXPECT_DOUBLE_EQ(ip[0], 0.3);
  EXPECT_DOUBLE_EQ(ip[2], 0.7);
  EXPECT_DOUBLE_EQ(ip[1], 0.25);
  Rng rng = make_stream(3, "test.ip");
  std::vector<double> f(5 * 7);
  for (auto& v : f) v = uniform(rng, 0, 100);
  auto q = incidence_proportion(f, 5, 7);
  for (std::size_t c = 0; c < 7; ++c) {
    double s = 0;
    for (std::size_t r = 0; r < 5; ++r) s += q[r * 7 + c];
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
  EXPECT_THROW(incidence_proportion({0, 1, 0, 1}, 2, 2), MetricError);
  EXPECT_THROW(incidence_proportion({-1, 1, 2, 1}, 2, 2), std::invalid_argument);
}

TEST(IncidenceProportion, MapeOnToyPair) {
  // True flows [[1,3],[3,1]] -> IP [[.25,.75],[.75,.25]];
  // predicted [[2,2],[2,2]] -> IP all 0.5.
  auto t = incidence_proportion({1, 3, 3, 1}, 2, 2);
  auto p = incidence_proportion({2, 2, 2, 2}, 2, 2);
  // |0.5-0.25|/0.25 = 1, |0.5-0.75|/0.75 = 1/3; mean = 2/3.
  EXPECT_NEAR(mape(p, t), 100.0 * 2.0 / 3.0, 1e-12);
}

TEST(Persistence, RepeatsLastValue) {
  EXPECT_EQ(persistence_baseline(5, 3), (std::vector<double>{5, 5, 5}));
  EXPECT_THROW(persistence_baseline(1, 0), std::invalid_argument);
  EXPECT_EQ(mae(persistence_baseline(2, 4), std::vector<double>(4, 2.0)), 0.0);
  // Ramp history ending at 1, truth 2,3,4,5: errors 1,2,3,4.
  const double expected = 100.0 * (1.0 / 2 + 2.0 / 3 + 3.0 / 4 + 4.0 / 5) / 4;
  EXPECT_NEAR(mape(persistence_baseline(1, 4), {2, 3, 4, 5}), expected, 1e-12);
}

TEST(ReportCsv, LayoutMatchesHeader) {
  auto dir = dynenc::testing::temp_dir("report_csv");
  auto rep = truncated_eval({1, 2}, {1, 4}, {0.5, 1.0});
  write_report_csv(dir / "r.csv", {{"heat", rep}});
  std::ifstream in(dir / "r.csv");
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "system,ratio,rmse,mae,mape");
  std::getline(in, line);
  EXPECT_EQ(line.rfind("heat,0.5,0,0,0", 0), 0u);
  std::getline(in, line);
  std::getline(in, line);
  EXPECT_EQ(line.rfind("heat,avg,", 0), 0u);
}
