#include "sspt/simlab.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "sspt/binary_io.hpp"
#include "sspt/format.hpp"
#include "sspt/model.hpp"
#include "sspt/rng.hpp"

namespace sspt::simlab {

namespace {

// Days since 1970-01-01 for a proleptic Gregorian date.
long days_from_civil(long y, unsigned m, unsigned d) {
  y -= m <= 2;
  const long era = (y >= 0 ? y : y - 399) / 400;
  const unsigned yoe = static_cast<unsigned>(y - era * 400);
  const unsigned doy = (153 * (m > 2 ? m - 3 : m + 9) + 2) / 5 + d - 1;
  const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
  return era * 146097 + static_cast<long>(doe) - 719468;
}

std::string civil_from_days(long z) {
  z += 719468;
  const long era = (z >= 0 ? z : z - 146096) / 146097;
  const unsigned doe = static_cast<unsigned>(z - era * 146097);
  const unsigned yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
  const long y = static_cast<long>(yoe) + era * 400;
  const unsigned doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
  const unsigned mp = (5 * doy + 2) / 153;
  const unsigned d = doy - (153 * mp + 2) / 5 + 1;
  const unsigned m = mp < 10 ? mp + 3 : mp - 9;
  char buf[32];
  std::snprintf(buf, sizeof buf, "%04ld-%02u-%02u", y + (m <= 2), m, d);
  return buf;
}

void check_interval(double lo, double hi, const char* what) {
  if (!(lo <= hi) || !std::isfinite(lo) || !std::isfinite(hi)) {
    throw SimError(std::string(what) + " range (" + std::to_string(lo) + ", " + std::to_string(hi) +
                   ") is not an interval");
  }
}

std::string series_name(std::size_t i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "SIM%04zu", i);
  return buf;
}

}  // namespace

void GbmConfig::validate() const {
  if (!(s0 > 0.0)) throw SimError("gbm: S0 must be positive");
  if (!(sigma >= 0.0)) throw SimError("gbm: sigma must be non-negative");
  if (!(dt > 0.0)) throw SimError("gbm: dt must be positive");
}

std::vector<double> gbm_series(const GbmConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  std::vector<double> s(cfg.steps + 1);
  s[0] = cfg.s0;
  const double drift = (cfg.mu - 0.5 * cfg.sigma * cfg.sigma) * cfg.dt;
  const double vol = cfg.sigma * std::sqrt(cfg.dt);
  for (std::size_t t = 1; t <= cfg.steps; ++t) s[t] = s[t - 1] * std::exp(drift + vol * rng.normal());
  return s;
}

const char* mode_name(Mode m) { return m == Mode::Identical ? "identical" : "differing"; }

Mode parse_mode(const std::string& name) {
  if (name == "identical") return Mode::Identical;
  if (name == "differing") return Mode::Differing;
  throw SimError("unknown scenario mode '" + name + "' (expected identical or differing)");
}

void ScenarioConfig::validate() const {
  if (n == 0) throw SimError("scenario: N must be positive");
  check_interval(mu_lo, mu_hi, "mu");
  check_interval(sigma_lo, sigma_hi, "sigma");
  if (sigma_lo < 0.0) throw SimError("scenario: sigma range must be non-negative");
  if (repetitions == 0) throw SimError("scenario: repetitions must be at least 1");
  if (slice == 0 || slice > steps) {
    throw SimError("scenario: slice length " + std::to_string(slice) + " does not fit " + std::to_string(steps) +
                   " steps");
  }
  if (!(train_fraction > 0.0) || !(valid_fraction > 0.0) || train_fraction + valid_fraction >= 1.0) {
    throw SimError("scenario: train and valid fractions must be positive and leave room for a test split");
  }
  GbmConfig{s0, 0.0, sigma_lo, dt, steps, 0}.validate();
}

data::FeatureTensor slice_dataset(const std::vector<std::vector<double>>& prices, std::size_t slice,
                                  double train_fraction, double valid_fraction, std::size_t train_stride) {
  if (prices.empty()) throw SimError("slice_dataset: no series");
  if (slice == 0) throw SimError("slice_dataset: slice length must be positive");
  if (train_stride == 0) train_stride = slice;
  const std::size_t len = prices.front().size();
  for (const auto& p : prices) {
    if (p.size() != len) throw SimError("slice_dataset: series lengths differ");
    for (double v : p) {
      if (!(v > 0.0) || !std::isfinite(v)) throw SimError("slice_dataset: prices must be positive and finite");
    }
  }
  const std::size_t slices = len > 0 ? (len - 1) / slice : 0;
  const auto n_train = static_cast<std::size_t>(std::floor(static_cast<double>(slices) * train_fraction));
  const auto n_valid = static_cast<std::size_t>(std::floor(static_cast<double>(slices) * valid_fraction));
  if (n_train == 0 || n_valid == 0 || n_train + n_valid >= slices) {
    throw SimError("slice_dataset: " + std::to_string(slices) + " slices of length " + std::to_string(slice) +
                   " cannot fill train, valid, and test splits");
  }

  data::FeatureTensor ft;
  ft.feature_count = 1;
  ft.close_column = 0;
  ft.config.lookback = slice;
  ft.config.allow_any_lookback = true;
  // One date per log return; a sample's day is the last return in its window.
  ft.dates = business_days("2000-01-03", slices * slice);
  auto last_day = [&](std::size_t j) { return (j + 1) * slice - 1; };
  ft.config.train = {ft.dates[0], ft.dates[last_day(n_train - 1)]};
  ft.config.valid = {ft.dates[last_day(n_train - 1) + 1], ft.dates[last_day(n_train + n_valid - 1)]};
  ft.config.test = {ft.dates[last_day(n_train + n_valid - 1) + 1], ft.dates[last_day(slices - 1)]};
  ft.sector_labels = {"sim"};
  for (std::size_t i = 0; i < prices.size(); ++i) {
    ft.tickers.push_back(series_name(i));
    ft.sector_of_stock.push_back(0);
  }

  auto increment = [&](std::size_t series, std::size_t t) { return std::log(prices[series][t + 1] / prices[series][t]); };
  std::vector<double> train_values;
  for (std::size_t i = 0; i < prices.size(); ++i) {
    for (std::size_t t = 0; t < n_train * slice; ++t) train_values.push_back(increment(i, t));
  }
  ft.normalizer = data::fit_normalizer(train_values, 1);

  io::Fnv1a hash;
  for (const auto& p : prices) hash.update(p.data(), p.size() * sizeof(double));
  ft.content_hash = hash.digest();

  auto emit = [&](std::size_t start, data::Split split) {
    for (std::size_t i = 0; i < prices.size(); ++i) {
      ft.samples.push_back({static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(start + slice - 1), 0.0f, split});
      for (std::size_t t = start; t < start + slice; ++t) {
        ft.windows.push_back(static_cast<float>(data::apply_normalizer(increment(i, t), ft.normalizer[0])));
      }
    }
  };
  for (std::size_t start = 0; start + slice <= n_train * slice; start += train_stride) emit(start, data::Split::Train);
  for (std::size_t j = n_train; j < slices; ++j) {
    emit(j * slice, j < n_train + n_valid ? data::Split::Valid : data::Split::Test);
  }
  return ft;
}

ScenarioResult run_scenario(const ScenarioConfig& cfg) {
  cfg.validate();
  ScenarioResult res;
  res.config = cfg;
  for (std::size_t rep = 0; rep < cfg.repetitions; ++rep) {
    const std::uint64_t rep_seed = derive_seed(cfg.seed, rep);
    Rng prng(derive_seed(rep_seed, 1));
    const double shared_mu = prng.uniform(cfg.mu_lo, cfg.mu_hi);
    const double shared_sigma = prng.uniform(cfg.sigma_lo, cfg.sigma_hi);
    std::vector<std::vector<double>> prices;
    for (std::size_t i = 0; i < cfg.n; ++i) {
      GbmConfig g;
      g.s0 = cfg.s0;
      g.dt = cfg.dt;
      g.steps = cfg.steps;
      g.seed = derive_seed(rep_seed, 100 + i);
      if (cfg.mode == Mode::Identical) {
        g.mu = shared_mu;
        g.sigma = shared_sigma;
      } else {
        g.mu = prng.uniform(cfg.mu_lo, cfg.mu_hi);
        g.sigma = prng.uniform(cfg.sigma_lo, cfg.sigma_hi);
      }
      prices.push_back(gbm_series(g));
    }
    const auto ft = slice_dataset(prices, cfg.slice, cfg.train_fraction, cfg.valid_fraction, cfg.train_stride);
    auto params = model::init_params<float>(derive_seed(rep_seed, 2), pretrain::model_config_for(ft),
                                            {{"scc", cfg.n}});
    pretrain::PretrainConfig pc;
    pc.alpha = 1.0;
    pc.lr = cfg.lr;
    pc.epochs = cfg.epochs;
    pc.seed = derive_seed(rep_seed, 3);
    const auto run = pretrain::run_pretraining(ft, pc, std::move(params));
    const auto m = pretrain::evaluate(run.best_params, ft, data::Split::Test, pc, 0);
    res.accuracies.push_back(*m.scc_accuracy);
  }
  double sum = 0.0;
  for (double a : res.accuracies) sum += a;
  res.mean = sum / static_cast<double>(res.accuracies.size());
  return res;
}

std::vector<ScenarioResult> sigma_sweep(const ScenarioConfig& base, double sigma_min,
                                        const std::vector<double>& widths) {
  if (widths.empty()) throw SimError("sigma sweep: no widths");
  for (std::size_t i = 0; i < widths.size(); ++i) {
    if (!(widths[i] > 0.0) || (i > 0 && !(widths[i] > widths[i - 1]))) {
      throw SimError("sigma sweep: widths must be positive and increasing");
    }
  }
  std::vector<ScenarioResult> out;
  for (double w : widths) {
    ScenarioConfig c = base;
    c.mode = Mode::Differing;
    c.mu_hi = c.mu_lo;
    c.sigma_lo = sigma_min;
    c.sigma_hi = sigma_min + w;
    out.push_back(run_scenario(c));
  }
  return out;
}

std::string results_csv(const std::vector<ScenarioResult>& results) {
  std::ostringstream os;
  os << "mode,N,width,rep,accuracy\n";
  for (const auto& r : results) {
    for (std::size_t rep = 0; rep < r.accuracies.size(); ++rep) {
      os << mode_name(r.config.mode) << ',' << r.config.n << ',' << shortest(r.config.width()) << ',' << rep << ','
         << shortest(r.accuracies[rep]) << '\n';
    }
  }
  return os.str();
}

void write_results_csv(const std::vector<ScenarioResult>& results, const std::filesystem::path& file) {
  std::ofstream out(file, std::ios::binary);
  if (!out) throw SimError("cannot write " + file.string());
  out << results_csv(results);
}

std::vector<std::string> business_days(const std::string& start, std::size_t count) {
  unsigned y = 0, m = 0, d = 0;
  if (start.size() != 10 || std::sscanf(start.c_str(), "%4u-%2u-%2u", &y, &m, &d) != 3 || m < 1 || m > 12 ||
      d < 1 || d > 31) {
    throw SimError("bad start date '" + start + "'");
  }
  std::vector<std::string> out;
  for (long z = days_from_civil(static_cast<long>(y), m, d); out.size() < count; ++z) {
    const long wd = ((z % 7) + 10) % 7;  // 0 = Monday; day 0 was a Thursday
    if (wd < 5) out.push_back(civil_from_days(z));
  }
  return out;
}

SyntheticUniverse gbm_universe(const UniverseConfig& cfg) {
  if (cfg.n == 0 || cfg.sectors == 0) throw SimError("universe: counts must be positive");
  if (cfg.days < 5) throw SimError("universe: too few days for a 3:1:1 split");
  check_interval(cfg.mu_lo, cfg.mu_hi, "mu");
  check_interval(cfg.sigma_lo, cfg.sigma_hi, "sigma");
  SyntheticUniverse u;
  const auto dates = business_days(cfg.start, cfg.days);
  Rng prng(derive_seed(cfg.seed, 1));
  std::map<std::string, std::string> sector_of;
  for (std::size_t i = 0; i < cfg.n; ++i) {
    GbmConfig g;
    g.s0 = cfg.s0;
    g.mu = prng.uniform(cfg.mu_lo, cfg.mu_hi);
    g.sigma = prng.uniform(cfg.sigma_lo, cfg.sigma_hi);
    g.steps = cfg.days - 1;
    g.seed = derive_seed(cfg.seed, 100 + i);
    data::PriceSeries s;
    s.ticker = series_name(i);
    s.dates = dates;
    s.close = gbm_series(g);
    s.open = s.high = s.low = s.close;
    s.volume.assign(cfg.days, 1.0e6);
    sector_of[s.ticker] = "SECTOR" + std::to_string(i % cfg.sectors);
    u.series.push_back(std::move(s));
  }
  u.sectors = data::SectorMap(std::move(sector_of));
  const std::size_t n_train = cfg.days * 3 / 5, n_valid = cfg.days / 5;
  u.config.lookback = 16;
  u.config.train = {dates[0], dates[n_train - 1]};
  u.config.valid = {dates[n_train], dates[n_train + n_valid - 1]};
  u.config.test = {dates[n_train + n_valid], dates.back()};
  return u;
}

}  // namespace sspt::simlab
