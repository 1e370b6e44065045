#include <doctest.h>

#include <cmath>
#include <sstream>
#include <vector>

#include "sspt/simlab.hpp"
#include "support.hpp"

using namespace sspt;
using namespace sspt::simlab;

namespace {

ScenarioConfig quick(std::size_t n, Mode mode) {
  ScenarioConfig c;
  c.n = n;
  c.mode = mode;
  c.steps = 400;
  c.repetitions = 2;
  c.epochs = 2;
  c.seed = 3;
  return c;
}

}  // namespace

TEST_CASE("noise-free GBM is exponential growth") {
  GbmConfig g;
  g.sigma = 0.0;
  g.mu = 0.15;
  g.steps = 500;
  const auto s = gbm_series(g);
  REQUIRE(s.size() == 501);
  for (std::size_t t = 0; t < s.size(); ++t) {
    CHECK(s[t] == doctest::Approx(g.s0 * std::exp(g.mu * g.dt * static_cast<double>(t))).epsilon(1e-12));
  }
  g.mu = 0.0;
  for (auto v : gbm_series(g)) CHECK(v == g.s0);
}

TEST_CASE("GBM log-increments have the drift-corrected mean") {
  GbmConfig g;
  g.mu = 0.1;
  g.sigma = 0.25;
  g.steps = 100000;
  g.seed = 17;
  const auto s = gbm_series(g);
  double mean = 0;
  for (std::size_t t = 0; t + 1 < s.size(); ++t) mean += std::log(s[t + 1] / s[t]);
  mean /= static_cast<double>(g.steps);
  const double expect = (g.mu - g.sigma * g.sigma / 2) * g.dt;
  const double se = g.sigma * std::sqrt(g.dt) / std::sqrt(static_cast<double>(g.steps));
  CHECK(std::abs(mean - expect) < 4 * se);
  CHECK(gbm_series(g) == s);
  g.seed = 18;
  CHECK(gbm_series(g) != s);
  g.sigma = -1;
  CHECK_THROWS_AS(gbm_series(g), SimError);
}

TEST_CASE("business days skip weekends") {
  // 2015-01-01 is a Thursday.
  CHECK(business_days("2015-01-01", 4) == std::vector<std::string>{"2015-01-01", "2015-01-02", "2015-01-05", "2015-01-06"});
  CHECK(business_days("2000-01-01", 1) == std::vector<std::string>{"2000-01-03"});
  CHECK(business_days("2024-02-28", 3) == std::vector<std::string>{"2024-02-28", "2024-02-29", "2024-03-01"});
  const auto year = business_days("2021-01-01", 261);
  CHECK(year.back() == "2021-12-31");
}

TEST_CASE("slicing into chronological splits") {
  std::vector<std::vector<double>> prices;
  for (std::uint64_t i = 0; i < 3; ++i) {
    GbmConfig g;
    g.steps = 160;  // 160 returns -> 10 slices of 16
    g.seed = i;
    prices.push_back(gbm_series(g));
  }
  const auto ft = slice_dataset(prices, 16, 0.7, 0.15);
  CHECK(ft.count(data::Split::Train) == 3 * 7);
  CHECK(ft.count(data::Split::Valid) == 3 * 1);
  CHECK(ft.count(data::Split::Test) == 3 * 2);
  CHECK(ft.feature_count == 1);
  CHECK(ft.stocks() == 3);
  for (std::size_t i = 0; i < ft.samples.size(); ++i) {
    const auto& s = ft.samples[i];
    const auto w = ft.window(i);
    const std::size_t start = s.day + 1 - 16;
    for (std::size_t t = 0; t < 16; ++t) {
      const double r = std::log(prices[s.stock][start + t + 1] / prices[s.stock][start + t]);
      CHECK(w[t] == static_cast<float>(data::apply_normalizer(r, ft.normalizer[0])));
    }
    // Non-overlapping slices start on slice boundaries.
    CHECK(start % 16 == 0);
  }
  for (auto idx : ft.indices(data::Split::Train)) {
    for (auto v : ft.window(idx)) {
      CHECK(v >= 0.0f);
      CHECK(v <= 1.0f);
    }
  }

  const auto strided = slice_dataset(prices, 16, 0.7, 0.15, 4);
  CHECK(strided.count(data::Split::Train) == 3 * ((7 * 16 - 16) / 4 + 1));
  CHECK(strided.count(data::Split::Test) == ft.count(data::Split::Test));

  CHECK_THROWS_AS(slice_dataset(prices, 80, 0.7, 0.15), SimError);
  CHECK_THROWS_AS(slice_dataset({}, 16, 0.7, 0.15), SimError);
}

TEST_CASE("a single series is always classified correctly") {
  auto c = quick(1, Mode::Differing);
  c.epochs = 1;
  c.repetitions = 1;
  const auto r = run_scenario(c);
  CHECK(r.accuracies == std::vector<double>{1.0});
  CHECK(r.mean == 1.0);
}

TEST_CASE("scenarios are reproducible and written as CSV") {
  const auto c = quick(4, Mode::Identical);
  const auto a = run_scenario(c);
  const auto b = run_scenario(c);
  CHECK(a.accuracies == b.accuracies);
  CHECK(a.accuracies.size() == 2);
  CHECK(a.mean == doctest::Approx((a.accuracies[0] + a.accuracies[1]) / 2).epsilon(1e-15));

  const auto csv = results_csv({a});
  std::istringstream in(csv);
  std::string line;
  std::getline(in, line);
  CHECK(line == "mode,N,width,rep,accuracy");
  std::getline(in, line);
  CHECK(line.rfind("identical,4,0.19999999999999998,0,", 0) == 0);

  const auto sweep = sigma_sweep(quick(3, Mode::Identical), 0.1, {0.05, 0.2});
  REQUIRE(sweep.size() == 2);
  CHECK(sweep[0].config.mode == Mode::Differing);
  CHECK(sweep[1].config.sigma_lo == 0.1);
  CHECK(sweep[1].config.sigma_hi == doctest::Approx(0.3));
  CHECK(sweep[1].config.mu_hi == sweep[1].config.mu_lo);
}

TEST_CASE("mode names and validation") {
  CHECK(parse_mode("identical") == Mode::Identical);
  CHECK(parse_mode(mode_name(Mode::Differing)) == Mode::Differing);
  CHECK_THROWS_AS(parse_mode("same"), SimError);
  auto c = quick(4, Mode::Differing);
  c.sigma_lo = 0.4;
  CHECK_THROWS_AS(c.validate(), SimError);
}

TEST_CASE("synthetic universe layout") {
  UniverseConfig u;
  u.n = 6;
  u.days = 300;
  u.seed = 2;
  const auto s = gbm_universe(u);
  REQUIRE(s.series.size() == 6);
  for (std::size_t i = 0; i < 6; ++i) {
    const auto& p = s.series[i];
    CHECK(p.size() == 300);
    CHECK(p.dates.front() == "2015-01-01");
    CHECK(p.open == p.close);
    CHECK(s.sectors.sector(p.ticker) == s.sectors.sector(s.series[i % 5].ticker));
  }
  const auto ft = data::build_windows(s.series, s.config, s.sectors);
  CHECK(ft.sectors() == 5);
  CHECK(ft.count(data::Split::Valid) > 0);
  CHECK(ft.count(data::Split::Test) > 0);
}
