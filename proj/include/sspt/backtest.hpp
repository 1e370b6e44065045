#pragma once

// Daily top-k buy-hold-sell evaluation: buy the k highest-predicted stocks at
// the close, sell at the next close.

#include <cstddef>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "sspt/market_data.hpp"

namespace sspt::backtest {

class BacktestError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct BacktestConfig {
  std::size_t k = 5;
  double risk_free = 0.0;  // daily ratio
  bool annualize = true;
  double trading_days = 252.0;
};

/// `irr_sum` adds each day's unnormalized sum of selected returns;
/// `irr_mean` adds each day's equal-weight portfolio return. The Sharpe ratio
/// uses the equal-weight series.
struct BacktestReport {
  std::size_t k = 0;
  std::vector<std::string> dates;                  // may be empty
  std::vector<std::vector<std::size_t>> selections;
  std::vector<double> day_sums;
  std::vector<double> day_returns;
  double irr_sum = 0.0;
  double irr_mean = 0.0;
  double sharpe = 0.0;
  bool annualized = true;

  std::size_t days() const noexcept { return day_returns.size(); }
};

/// Indices of the k largest predictions, best first; ties go to the lower index.
std::vector<std::size_t> select_topk(std::span<const double> predictions, std::size_t k);

/// Equal-weight return of the selected stocks.
double day_return(std::span<const std::size_t> selected, std::span<const double> returns);

/// (mean - risk_free) / sample std, times sqrt(trading_days) when annualized.
double sharpe(std::span<const double> day_returns, double risk_free, bool annualize, double trading_days = 252.0);

/// Report from stored selections; reproduces the metrics of the run that made them.
BacktestReport report_from_selections(std::vector<std::vector<std::size_t>> selections,
                                      const std::vector<std::vector<double>>& returns, const BacktestConfig& cfg,
                                      std::vector<std::string> dates = {});

/// predictions[d][i] and returns[d][i] for day d and stock i.
BacktestReport run_backtest(const std::vector<std::vector<double>>& predictions,
                            const std::vector<std::vector<double>>& returns, const BacktestConfig& cfg,
                            std::vector<std::string> dates = {});

/// Equal weight over every stock each day.
BacktestReport market_baseline(const std::vector<std::vector<double>>& returns, const BacktestConfig& cfg,
                               std::vector<std::string> dates = {});

/// Next-day returns of every stock on each day of a split, plus the anchor dates.
struct SplitReturns {
  std::vector<std::string> dates;
  std::vector<std::vector<double>> returns;
  std::vector<std::vector<std::size_t>> samples;  // sample index per (day, stock)
};
SplitReturns split_returns(const data::FeatureTensor& ft, data::Split split);

/// JSON with days, k, irr_sum, irr_mean, sharpe, annualized, selections.
std::string report_json(const BacktestReport& r);
void write_report(const BacktestReport& r, const std::filesystem::path& json_file);
/// `day,portfolio_return,cumulative_irr` using the unnormalized daily sums.
void write_returns_csv(const BacktestReport& r, const std::filesystem::path& csv_file);

/// `date,ticker,prediction` rows; reading arranges them as predictions[day][stock]
/// in the order of `dates` and `tickers`.
void write_predictions_csv(const std::vector<std::vector<double>>& predictions, const std::vector<std::string>& dates,
                           const std::vector<std::string>& tickers, const std::filesystem::path& file);
std::vector<std::vector<double>> read_predictions_csv(const std::filesystem::path& file,
                                                      const std::vector<std::string>& dates,
                                                      const std::vector<std::string>& tickers);

}  // namespace sspt::backtest
