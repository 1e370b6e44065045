#include <doctest.h>

#include <cmath>
#include <fstream>
#include <numeric>
#include <vector>

#include <json.hpp>

#include "sspt/backtest.hpp"
#include "support.hpp"

using namespace sspt;
using namespace sspt::backtest;

namespace {

BacktestConfig plain(std::size_t k) {
  BacktestConfig c;
  c.k = k;
  c.annualize = false;
  return c;
}

/// Sample-std Sharpe ratio computed inline.
double oracle_sharpe(const std::vector<double>& r, double rf) {
  const double n = static_cast<double>(r.size());
  const double mean = std::accumulate(r.begin(), r.end(), 0.0) / n;
  double ss = 0;
  for (auto v : r) ss += (v - mean) * (v - mean);
  return (mean - rf) / std::sqrt(ss / (n - 1));
}

}  // namespace

TEST_CASE("top-k selection") {
  const std::vector<double> p = {0.3, 0.1, 0.5};
  CHECK(select_topk(p, 1) == std::vector<std::size_t>{2});
  auto all = select_topk(p, 3);
  std::sort(all.begin(), all.end());
  CHECK(all == std::vector<std::size_t>{0, 1, 2});
  const std::vector<double> tie = {0.2, 0.2, 0.1};
  CHECK(select_topk(tie, 1) == std::vector<std::size_t>{0});
  CHECK_THROWS_AS(select_topk(p, 4), BacktestError);
  CHECK_THROWS_AS(select_topk(p, 0), BacktestError);
}

TEST_CASE("day return") {
  const std::vector<double> r = {0.02, -0.02, 0.5};
  const std::vector<std::size_t> one = {0}, two = {0, 1};
  CHECK(day_return(one, r) == 0.02);
  CHECK(day_return(two, r) == 0.0);
}

TEST_CASE("sharpe ratio") {
  const std::vector<double> r = {0.02, 0.0};
  CHECK(sharpe(r, 0.0, false, 252) == doctest::Approx(0.70710678).epsilon(1e-7));
  CHECK(sharpe(r, 0.0, true, 252) == doctest::Approx(0.70710678 * std::sqrt(252.0)).epsilon(1e-7));
  CHECK(sharpe(r, 0.01, false, 252) == 0.0);
  const std::vector<double> flat = {0.01, 0.01, 0.01};
  CHECK_THROWS_WITH_AS(sharpe(flat, 0.0, false, 252), doctest::Contains("degenerate return series"), BacktestError);
}

TEST_CASE("toy table by hand") {
  // 3 stocks x 2 days; the model picks stock 1 then stock 2.
  const std::vector<std::vector<double>> r = {{0.01, 0.03, -0.02}, {0.02, -0.01, 0.04}};
  const std::vector<std::vector<double>> p = {{0.0, 1.0, 0.5}, {0.1, 0.2, 0.3}};
  const auto rep = run_backtest(p, r, plain(1));
  CHECK(rep.selections == std::vector<std::vector<std::size_t>>{{1}, {2}});
  CHECK(rep.irr_sum == doctest::Approx(0.07).epsilon(1e-12));
  CHECK(rep.irr_mean == doctest::Approx(0.07).epsilon(1e-12));
  CHECK(rep.sharpe == doctest::Approx(oracle_sharpe({0.03, 0.04}, 0)).epsilon(1e-12));

  const auto two = run_backtest(p, r, plain(2));
  CHECK(two.irr_sum == doctest::Approx(0.03 - 0.02 + 0.04 - 0.01).epsilon(1e-12));
  CHECK(two.irr_mean == doctest::Approx((0.03 - 0.02) / 2 + (0.04 - 0.01) / 2).epsilon(1e-12));

  const auto base = market_baseline(r, plain(1));
  CHECK(base.irr_mean == doctest::Approx(0.02 / 3 + 0.05 / 3).epsilon(1e-12));
  CHECK(base.k == 3);
}

TEST_CASE("baseline properties") {
  const std::vector<std::vector<double>> single = {{0.01}, {-0.02}, {0.03}};
  const auto b = market_baseline(single, plain(1));
  CHECK(b.day_returns == std::vector<double>{0.01, -0.02, 0.03});

  Rng rng(3);
  std::vector<std::vector<double>> r(20, std::vector<double>(5));
  for (auto& d : r)
    for (auto& v : d) v = 0.02 * rng.normal();
  const auto base = market_baseline(r, plain(2));
  for (int t = 0; t < 5; ++t) {
    std::vector<std::vector<double>> p(20, std::vector<double>(5));
    for (auto& d : p)
      for (auto& v : d) v = rng.normal();
    CHECK(run_backtest(p, r, plain(5)).irr_mean == doctest::Approx(base.irr_mean).epsilon(1e-12));
  }
}

TEST_CASE("backtest properties over random tables") {
  Rng rng(8);
  for (int t = 0; t < 100; ++t) {
    const std::size_t n = 2 + rng.below(10), days = 2 + rng.below(30), k = 1 + rng.below(n);
    std::vector<std::vector<double>> p(days, std::vector<double>(n)), r = p;
    for (std::size_t d = 0; d < days; ++d) {
      for (std::size_t i = 0; i < n; ++i) p[d][i] = rng.normal(), r[d][i] = 0.02 * rng.normal();
    }
    const auto rep = run_backtest(p, r, plain(k));
    double sum = 0, mean = 0;
    std::vector<double> daily;
    for (std::size_t d = 0; d < days; ++d) {
      // Brute force: the k-th largest prediction is the entry threshold.
      auto sorted = p[d];
      std::sort(sorted.rbegin(), sorted.rend());
      double s = 0;
      std::size_t taken = 0;
      for (std::size_t i = 0; i < n; ++i) {
        if (p[d][i] >= sorted[k - 1]) s += r[d][i], ++taken;
      }
      CHECK(taken == k);
      sum += s;
      mean += s / static_cast<double>(k);
      daily.push_back(s / static_cast<double>(k));
    }
    CHECK(rep.irr_sum == doctest::Approx(sum).epsilon(1e-12));
    CHECK(rep.irr_mean == doctest::Approx(mean).epsilon(1e-12));
    CHECK(rep.sharpe == doctest::Approx(oracle_sharpe(daily, 0)).epsilon(1e-9));
    // Perfect foresight is never beaten by any other selection.
    CHECK(run_backtest(r, r, plain(k)).irr_sum >= rep.irr_sum - 1e-15);
    // The report can be rebuilt from its own selections.
    const auto again = report_from_selections(rep.selections, r, plain(k));
    CHECK(again.irr_sum == rep.irr_sum);
    CHECK(again.sharpe == rep.sharpe);
  }
}

TEST_CASE("shape mismatches are rejected") {
  const std::vector<std::vector<double>> r = {{0.01, 0.02}, {0.0, 0.01}};
  CHECK_THROWS_AS(run_backtest({{0.1, 0.2}}, r, plain(1)), BacktestError);
  CHECK_THROWS_AS(run_backtest({{0.1, 0.2}, {0.3}}, r, plain(1)), BacktestError);
}

TEST_CASE("JSON report and CSV series") {
  const std::vector<std::vector<double>> r = {{0.01, 0.03, -0.02}, {0.02, -0.01, 0.04}, {0.0, 0.01, 0.02}};
  const std::vector<std::vector<double>> p = {{0.0, 1.0, 0.5}, {0.1, 0.2, 0.3}, {0.3, 0.2, 0.1}};
  const auto rep = run_backtest(p, r, plain(2), {"2021-01-04", "2021-01-05", "2021-01-06"});
  const auto j = nlohmann::json::parse(report_json(rep));
  CHECK(j["days"] == 3);
  CHECK(j["k"] == 2);
  CHECK(j["irr_sum"].get<double>() == rep.irr_sum);
  CHECK(j["sharpe"].get<double>() == rep.sharpe);
  CHECK(j["selections"][1]["date"] == "2021-01-05");
  CHECK(j["selections"][1]["stocks"] == std::vector<std::size_t>{2, 1});

  const auto dir = testing::scratch_dir("bt");
  write_returns_csv(rep, dir / "r.csv");
  std::ifstream in(dir / "r.csv");
  std::string line;
  std::getline(in, line);
  CHECK(line == "day,portfolio_return,cumulative_irr");
  double last = 0;
  int rows = 0;
  while (std::getline(in, line)) {
    ++rows;
    last = std::stod(line.substr(line.rfind(',') + 1));
  }
  CHECK(rows == 3);
  CHECK(last == doctest::Approx(rep.irr_sum).epsilon(1e-15));
}

TEST_CASE("prediction files round trip and report bad rows") {
  const std::vector<std::string> dates = {"2021-01-04", "2021-01-05"}, tickers = {"AAA", "BBB"};
  const std::vector<std::vector<double>> p = {{0.1, -0.25}, {1e-7, 3.5}};
  const auto dir = testing::scratch_dir("bt-pred");
  write_predictions_csv(p, dates, tickers, dir / "p.csv");
  CHECK(read_predictions_csv(dir / "p.csv", dates, tickers) == p);

  {
    std::ofstream out(dir / "bad.csv");
    out << "date,ticker,prediction\n2021-01-04,AAA,0.1\n2021-01-04,ZZZ,0.2\n";
  }
  CHECK_THROWS_WITH_AS(read_predictions_csv(dir / "bad.csv", dates, tickers), doctest::Contains("bad.csv:3"),
                       BacktestError);
  {
    std::ofstream out(dir / "short.csv");
    out << "date,ticker,prediction\n2021-01-04,AAA,0.1\n";
  }
  CHECK_THROWS_WITH_AS(read_predictions_csv(dir / "short.csv", dates, tickers), doctest::Contains("missing"),
                       BacktestError);
}
