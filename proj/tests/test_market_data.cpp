#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <tuple>
#include <vector>

#include "sspt/market_data.hpp"
#include "support.hpp"

using namespace sspt;
using namespace sspt::data;
using sspt::testing::fixture;
using sspt::testing::scratch_dir;

namespace {

/// Dates [0, 60) train, [60, 70) valid, [70, days) test.
DatasetConfig split_at_60(const std::vector<std::string>& d) {
  DatasetConfig c;
  c.train = {d[0], d[59]};
  c.valid = {d[60], d[69]};
  c.test = {d[70], d.back()};
  return c;
}

/// Anchors whose window start has 30 prior days and whose window and next day
/// share a split, enumerated directly.
std::size_t count_anchors(std::size_t lo, std::size_t hi, std::size_t lookback) {
  std::size_t n = 0;
  for (std::size_t a = 0; a <= hi; ++a) {
    if (a + 1 < lookback) continue;
    const std::size_t start = a + 1 - lookback;
    if (start >= 30 && start >= lo && a + 1 <= hi) ++n;
  }
  return n;
}

std::vector<std::tuple<std::string, std::string, Split, std::vector<float>>> sample_set(const FeatureTensor& ft) {
  std::vector<std::tuple<std::string, std::string, Split, std::vector<float>>> out;
  for (std::size_t i = 0; i < ft.samples.size(); ++i) {
    const auto w = ft.window(i);
    out.emplace_back(ft.tickers[ft.samples[i].stock], ft.dates[ft.samples[i].day], ft.samples[i].split,
                     std::vector<float>(w.begin(), w.end()));
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

TEST_CASE("moving_average") {
  const std::vector<double> run = {1, 2, 3, 4, 5};
  auto ma = moving_average(run, 5);
  CHECK(ma.back().value() == 3.0);
  const std::vector<double> flat(12, 7.25);
  for (std::size_t w : {1, 5, 12}) {
    for (const auto& v : moving_average(flat, w)) {
      if (v) CHECK(*v == 7.25);
    }
  }
  const std::vector<double> x = {2, 4, 6};
  ma = moving_average(x, 2);
  CHECK(!ma[0].has_value());
  CHECK(*ma[1] == 3.0);
  CHECK(*ma[2] == 5.0);
  CHECK_THROWS_AS(moving_average(x, 4), DataError);
}

TEST_CASE("compute_return") {
  CHECK(compute_return(100, 110) == doctest::Approx(0.10));
  CHECK(compute_return(100, 100) == 0.0);
  CHECK(compute_return(80, 76) == doctest::Approx(-0.05));
  CHECK_THROWS_AS(compute_return(0, 1), DataError);
  CHECK_THROWS_AS(compute_return(-3, 1), DataError);
}

TEST_CASE("normalizer") {
  const std::vector<double> col = {2, 4, 6};
  auto s = fit_normalizer(col, 1);
  CHECK(s[0].min == 2);
  CHECK(s[0].max == 6);
  const std::vector<double> flat = {5, 5};
  s = fit_normalizer(flat, 1);
  CHECK(s[0].degenerate());
  CHECK(apply_normalizer(7, s[0]) == 0.0);
  CHECK(apply_normalizer(5, {0, 10}) == 0.5);
  CHECK(apply_normalizer(-2, {0, 10}) == doctest::Approx(-0.2));

  // Row permutation leaves per-column statistics unchanged.
  Rng rng(3);
  std::vector<double> rows(3 * 20);
  for (auto& v : rows) v = rng.normal();
  const auto base = fit_normalizer(rows, 3);
  for (int t = 0; t < 20; ++t) {
    std::vector<std::size_t> order(20);
    for (std::size_t i = 0; i < 20; ++i) order[i] = i;
    rng.shuffle(order);
    std::vector<double> shuffled;
    for (auto r : order) shuffled.insert(shuffled.end(), rows.begin() + r * 3, rows.begin() + r * 3 + 3);
    const auto again = fit_normalizer(shuffled, 3);
    for (std::size_t c = 0; c < 3; ++c) {
      CHECK(again[c].min == base[c].min);
      CHECK(again[c].max == base[c].max);
    }
  }
}

TEST_CASE("raw feature rows carry naive moving averages") {
  const auto s = testing::random_series("X", 50, 9);
  const auto rows = raw_feature_rows(s);
  REQUIRE(rows.size() == 50 * kFeatureCount);
  for (std::size_t d = 0; d < 50; ++d) {
    CHECK(rows[d * kFeatureCount + kClose] == s.close[d]);
    CHECK(rows[d * kFeatureCount + kVolume] == s.volume[d]);
    for (std::size_t m = 0; m < kMaWindows.size(); ++m) {
      const auto w = kMaWindows[m];
      const double v = rows[d * kFeatureCount + kMa5 + m];
      if (d + 1 < w) {
        CHECK(std::isnan(v));
        continue;
      }
      double acc = 0;
      for (std::size_t i = d + 1 - w; i <= d; ++i) acc += s.close[i];
      CHECK(v == doctest::Approx(acc / static_cast<double>(w)).epsilon(1e-12));
    }
  }
}

TEST_CASE("sample count matches the anchor enumeration") {
  auto f = fixture(2, 80, 1);
  f.config = split_at_60(f.universe[0].dates);
  const auto ft = build_windows(f.universe, f.config, f.sectors);
  CHECK(ft.count(Split::Train) == 28);
  CHECK(ft.count(Split::Train) == 2 * count_anchors(0, 59, 16));
  CHECK(ft.count(Split::Valid) == 2 * count_anchors(60, 69, 16));
  CHECK(ft.count(Split::Test) == 2 * count_anchors(70, 79, 16));

  // 40 aligned days leave no train anchor.
  auto short_f = fixture(2, 40, 1);
  auto& d = short_f.universe[0].dates;
  short_f.config.train = {d[0], d[31]};
  short_f.config.valid = {d[32], d[35]};
  short_f.config.test = {d[36], d[39]};
  CHECK_THROWS_AS(build_windows(short_f.universe, short_f.config, short_f.sectors), DataError);

  for (std::size_t days : {120, 200, 333}) {
    auto g = fixture(3, days, days);
    const auto fg = build_windows(g.universe, g.config, g.sectors);
    const std::size_t a = days * 3 / 5, b = days * 4 / 5;
    CHECK(fg.count(Split::Train) == 3 * count_anchors(0, a - 1, 16));
    CHECK(fg.count(Split::Valid) == 3 * count_anchors(a, b - 1, 16));
    CHECK(fg.count(Split::Test) == 3 * count_anchors(b, days - 1, 16));
  }
}

TEST_CASE("windows never reach past the anchor or across splits") {
  const auto f = fixture(3, 240, 4);
  const auto ft = build_windows(f.universe, f.config, f.sectors);
  for (std::size_t i = 0; i < ft.samples.size(); ++i) {
    const auto& s = ft.samples[i];
    const auto& range = ft.config.range(s.split);
    CHECK(range.contains(ft.dates[s.day]));
    CHECK(range.contains(ft.dates[s.day + 1 - ft.lookback()]));
    CHECK(range.contains(ft.dates[s.day + 1]));
    const auto& series = f.universe[s.stock];
    CHECK(s.label == static_cast<float>((series.close[s.day + 1] - series.close[s.day]) / series.close[s.day]));
    // The last window row is the anchor day's normalized features.
    const auto w = ft.window(i);
    const auto rows = raw_feature_rows(series);
    for (std::size_t c = 0; c < kFeatureCount; ++c) {
      const auto& st = ft.normalizer[c];
      const double expect = (rows[s.day * kFeatureCount + c] - st.min) / (st.max - st.min);
      CHECK(w[(ft.lookback() - 1) * kFeatureCount + c] == static_cast<float>(expect));
    }
  }
  // Train windows are inside [0, 1] by construction of the normalizer.
  for (auto idx : ft.indices(Split::Train)) {
    for (auto v : ft.window(idx)) {
      CHECK(v >= 0.0f);
      CHECK(v <= 1.0f);
    }
  }
}

TEST_CASE("day batches hold one sample per stock in stock order") {
  const auto f = fixture(4, 200, 5);
  const auto ft = build_windows(f.universe, f.config, f.sectors);
  for (Split s : {Split::Train, Split::Valid, Split::Test}) {
    const auto batches = ft.day_batches(s);
    std::size_t total = 0;
    for (std::size_t b = 0; b < batches.size(); ++b) {
      if (b) CHECK(batches[b].day > batches[b - 1].day);
      REQUIRE(batches[b].samples.size() == 4);
      for (std::size_t i = 0; i < 4; ++i) CHECK(ft.samples[batches[b].samples[i]].stock == i);
      total += 4;
    }
    CHECK(total == ft.count(s));
  }
}

TEST_CASE("input order does not change the sample set") {
  auto f = fixture(5, 150, 6);
  const auto base = build_windows(f.universe, f.config, f.sectors);
  Rng rng(1);
  for (int t = 0; t < 5; ++t) {
    auto u = f.universe;
    rng.shuffle(u);
    const auto again = build_windows(u, f.config, f.sectors);
    CHECK(sample_set(again) == sample_set(base));
    CHECK(again.content_hash == base.content_hash);
    CHECK(manifest_text(again) == manifest_text(base));
  }
}

TEST_CASE("calendar alignment drops non-shared days and rejects disjoint calendars") {
  auto f = fixture(3, 150, 2);
  auto& s = f.universe[1];
  for (auto* col : {&s.open, &s.high, &s.low, &s.close, &s.volume}) col->erase(col->begin() + 100);
  s.dates.erase(s.dates.begin() + 100);
  const auto ft = build_windows(f.universe, f.config, f.sectors);
  CHECK(ft.days_dropped == 1);
  CHECK(ft.dates.size() == 149);

  auto g = fixture(2, 60, 3);
  g.universe[1] = testing::random_series("STK1", 60, 4, "2024-01-01");
  try {
    align_calendars(g.universe);
    FAIL("expected misaligned calendars");
  } catch (const DataError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("misaligned") != std::string::npos);
    CHECK(msg.find("STK0") != std::string::npos);
    CHECK(msg.find("STK1") != std::string::npos);
  }
}

TEST_CASE("missing sector and malformed CSV rows are named") {
  auto f = fixture(2, 120, 2);
  f.sectors = SectorMap(std::map<std::string, std::string>{{"STK0", "A"}});
  try {
    build_windows(f.universe, f.config, f.sectors);
    FAIL("expected missing sector");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("STK1") != std::string::npos);
  }

  const auto dir = scratch_dir("md-csv");
  {
    std::ofstream out(dir / "BAD.csv");
    out << "date,open,high,low,close,volume\n2020-01-01,1,1,1,1,10\n2020-01-02,1,1,x,1,10\n";
  }
  try {
    read_price_csv(dir / "BAD.csv", "BAD");
    FAIL("expected parse error");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("BAD.csv:3") != std::string::npos);
  }
  {
    std::ofstream out(dir / "SHORT.csv");
    out << "date,open,high,low,close,volume\n2020-01-01,1,1,1\n";
  }
  CHECK_THROWS_WITH_AS(read_price_csv(dir / "SHORT.csv", "SHORT"), doctest::Contains("SHORT.csv:2"), DataError);
}

TEST_CASE("lookback must be 16 or 32 unless explicitly widened") {
  auto f = fixture(2, 200, 2);
  f.config.lookback = 20;
  CHECK_THROWS_AS(build_windows(f.universe, f.config, f.sectors), DataError);
  f.config.allow_any_lookback = true;
  const auto ft = build_windows(f.universe, f.config, f.sectors);
  CHECK(ft.lookback() == 20);
  CHECK(ft.window_size() == 20 * kFeatureCount);
}

TEST_CASE("dataset save/load round trip is exact") {
  const auto f = fixture(3, 160, 8);
  const auto ft = build_windows(f.universe, f.config, f.sectors);
  const auto dir = scratch_dir("md-save");
  save_dataset(ft, dir / "d.bin");
  const auto back = load_dataset(dir / "d.bin");
  CHECK(back.tickers == ft.tickers);
  CHECK(back.dates == ft.dates);
  CHECK(back.windows == ft.windows);
  CHECK(back.content_hash == ft.content_hash);
  CHECK(manifest_text(back) == manifest_text(ft));
  REQUIRE(back.samples.size() == ft.samples.size());
  for (std::size_t i = 0; i < ft.samples.size(); ++i) {
    CHECK(back.samples[i].label == ft.samples[i].label);
    CHECK(back.samples[i].day == ft.samples[i].day);
    CHECK(back.samples[i].split == ft.samples[i].split);
  }
  CHECK_THROWS_AS(load_dataset(dir / "missing.bin"), DataError);
}
