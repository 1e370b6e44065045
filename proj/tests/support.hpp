#pragma once

// Shared test helpers: a finite-difference gradient checker, synthetic price
// fixtures, and scratch directories.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <map>
#include <string>
#include <vector>

#include "sspt/market_data.hpp"
#include "sspt/ndgrad/graph.hpp"
#include "sspt/rng.hpp"
#include "sspt/simlab.hpp"

namespace sspt::testing {

using ndgrad::Graph;
using ndgrad::NodeId;
using ndgrad::Shape;
using ndgrad::Tensor;

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  std::string worst;  // "param[index]" of the worst element
};

/// |a - n| / max(|a|, |n|, floor).
inline double rel_error(double a, double n, double floor = 1e-6) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
}

/// Compares reverse-mode gradients of `build` against central differences.
/// `per_tensor` caps how many elements of each parameter are perturbed
/// (0 = all); sampled elements are drawn with `seed`.
inline GradCheckReport grad_check(std::vector<Tensor<double>>& params,
                                  const std::function<NodeId(Graph<double>&)>& build, double h = 1e-5,
                                  std::size_t per_tensor = 0, std::uint64_t seed = 0,
                                  const std::vector<std::string>& names = {}) {
  std::vector<Tensor<double>> analytic;
  {
    Graph<double> g(params);
    analytic = g.backward(build(g));
  }
  auto eval = [&] {
    Graph<double> g(params);
    return g.value(build(g)).item();
  };
  GradCheckReport rep;
  Rng rng(seed);
  for (std::size_t p = 0; p < params.size(); ++p) {
    std::vector<std::size_t> idx(params[p].size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    if (per_tensor != 0 && idx.size() > per_tensor) {
      rng.shuffle(idx);
      idx.resize(per_tensor);
    }
    for (auto i : idx) {
      const double saved = params[p][i];
      params[p][i] = saved + h;
      const double up = eval();
      params[p][i] = saved - h;
      const double down = eval();
      params[p][i] = saved;
      const double numeric = (up - down) / (2 * h);
      const double e = rel_error(analytic[p][i], numeric);
      ++rep.checked;
      if (e > rep.max_rel_error) {
        rep.max_rel_error = e;
        rep.worst = (p < names.size() ? names[p] : "param" + std::to_string(p)) + "[" + std::to_string(i) + "]";
      }
    }
  }
  return rep;
}

inline Tensor<double> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.storage()) v = rng.uniform(lo, hi);
  return t;
}

/// Random-walk OHLCV series on a weekday calendar.
inline data::PriceSeries random_series(const std::string& ticker, std::size_t days, std::uint64_t seed,
                                       const std::string& start = "2020-01-01") {
  Rng rng(seed);
  data::PriceSeries s;
  s.ticker = ticker;
  s.dates = simlab::business_days(start, days);
  double p = 50.0 + 50.0 * rng.uniform();
  for (std::size_t d = 0; d < days; ++d) {
    p *= std::exp(0.02 * rng.normal());
    s.close.push_back(p);
    s.open.push_back(p * (1.0 + 0.005 * rng.normal()));
    s.high.push_back(std::max(p, s.open.back()) * (1.0 + 0.01 * rng.uniform()));
    s.low.push_back(std::min(p, s.open.back()) * (1.0 - 0.01 * rng.uniform()));
    s.volume.push_back(std::floor(1000.0 + 9000.0 * rng.uniform()));
  }
  return s;
}

struct Fixture {
  std::vector<data::PriceSeries> universe;
  data::SectorMap sectors;
  data::DatasetConfig config;
};

/// `stocks` random walks over `days` weekdays split 60/20/20 by date.
inline Fixture fixture(std::size_t stocks, std::size_t days, std::uint64_t seed = 7, std::size_t sectors = 2) {
  Fixture f;
  std::map<std::string, std::string> sec;
  for (std::size_t i = 0; i < stocks; ++i) {
    const std::string t = "STK" + std::to_string(i);
    f.universe.push_back(random_series(t, days, derive_seed(seed, i)));
    sec[t] = "SEC" + std::to_string(i % sectors);
  }
  f.sectors = data::SectorMap(sec);
  const auto& d = f.universe.front().dates;
  const std::size_t a = days * 3 / 5, b = days * 4 / 5;
  f.config.train = {d[0], d[a - 1]};
  f.config.valid = {d[a], d[b - 1]};
  f.config.test = {d[b], d.back()};
  return f;
}

inline void write_series_csv(const data::PriceSeries& s, const std::filesystem::path& file) {
  std::ofstream out(file);
  out.precision(17);
  out << "date,open,high,low,close,volume\n";
  for (std::size_t i = 0; i < s.size(); ++i) {
    out << s.dates[i] << ',' << s.open[i] << ',' << s.high[i] << ',' << s.low[i] << ',' << s.close[i] << ','
        << s.volume[i] << '\n';
  }
}

/// Writes the fixture as a price directory plus sector file under `dir`.
inline void write_fixture(const Fixture& f, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "prices");
  for (const auto& s : f.universe) write_series_csv(s, dir / "prices" / (s.ticker + ".csv"));
  std::ofstream sec(dir / "sectors.csv");
  sec << "ticker,sector\n";
  for (const auto& [t, s] : f.sectors.entries()) sec << t << ',' << s << '\n';
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() / ("sspt-test-" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

inline std::string slurp(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace sspt::testing
