#pragma once

// Geometric Brownian motion simulation and the source-series classification
// experiments built on it.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "sspt/market_data.hpp"
#include "sspt/pretrain.hpp"

namespace sspt::simlab {

class SimError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct GbmConfig {
  double s0 = 100.0;
  double mu = 0.1;
  double sigma = 0.2;
  double dt = 1.0 / 252.0;
  std::size_t steps = 1260;
  std::uint64_t seed = 0;

  void validate() const;
};

/// steps + 1 prices starting at s0:
/// S(t + dt) = S(t) exp((mu - sigma^2 / 2) dt + sigma sqrt(dt) Z).
std::vector<double> gbm_series(const GbmConfig& cfg);

enum class Mode { Identical, Differing };
const char* mode_name(Mode m);
Mode parse_mode(const std::string& name);  // identical | differing

struct ScenarioConfig {
  std::size_t n = 10;
  Mode mode = Mode::Differing;
  double mu_lo = 0.0, mu_hi = 0.2;
  double sigma_lo = 0.1, sigma_hi = 0.3;
  double s0 = 100.0;
  double dt = 1.0 / 252.0;
  std::size_t steps = 1260;
  std::size_t slice = 16;
  std::size_t repetitions = 5;
  std::size_t epochs = 20;
  double lr = 1e-3;
  double train_fraction = 0.7;
  double valid_fraction = 0.15;
  std::size_t train_stride = 0;  // 0: slice length (no overlap)
  std::uint64_t seed = 0;

  void validate() const;
  double width() const { return sigma_hi - sigma_lo; }
};

/// Cuts every series into consecutive non-overlapping slices of `slice` log
/// returns. Slices split chronologically into train/valid/test by position;
/// the single feature is min-max normalized on the train slices. Labels are
/// the source series index. A `train_stride` below `slice` adds overlapping
/// windows inside the train region only; 0 means `slice`.
data::FeatureTensor slice_dataset(const std::vector<std::vector<double>>& prices, std::size_t slice,
                                  double train_fraction, double valid_fraction, std::size_t train_stride = 0);

struct ScenarioResult {
  ScenarioConfig config;
  std::vector<double> accuracies;  // held-out test accuracy per repetition
  double mean = 0.0;
};

/// Draws parameters, simulates, and trains an scc classifier per repetition;
/// the validation split picks the epoch, the test split is scored.
ScenarioResult run_scenario(const ScenarioConfig& cfg);

/// Differing-parameter scenarios with sigma drawn from (sigma_min, sigma_min + width)
/// and mu fixed at `base.mu_lo`.
std::vector<ScenarioResult> sigma_sweep(const ScenarioConfig& base, double sigma_min, const std::vector<double>& widths);

/// `mode,N,width,rep,accuracy` rows.
void write_results_csv(const std::vector<ScenarioResult>& results, const std::filesystem::path& file);
std::string results_csv(const std::vector<ScenarioResult>& results);

/// Synthetic OHLCV universe of GBM closes on a weekday calendar: open, high,
/// and low equal the close, volume is constant, sectors are assigned
/// round-robin. The dataset config splits the days 3:1:1.
struct SyntheticUniverse {
  std::vector<data::PriceSeries> series;
  data::SectorMap sectors;
  data::DatasetConfig config;
};

struct UniverseConfig {
  std::size_t n = 50;
  std::size_t days = 1260;
  std::size_t sectors = 5;
  double mu_lo = 0.0, mu_hi = 0.2;
  double sigma_lo = 0.1, sigma_hi = 0.3;
  double s0 = 100.0;
  std::string start = "2015-01-01";
  std::uint64_t seed = 0;
};

SyntheticUniverse gbm_universe(const UniverseConfig& cfg);

/// Weekdays starting on or after `start` (ISO date).
std::vector<std::string> business_days(const std::string& start, std::size_t count);

}  // namespace sspt::simlab
