#include "sspt/backtest.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "sspt/format.hpp"

namespace sspt::backtest {

namespace {

void check_shape(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b) {
  if (a.size() != b.size()) {
    throw BacktestError("backtest: " + std::to_string(a.size()) + " prediction days for " +
                        std::to_string(b.size()) + " return days");
  }
  for (std::size_t d = 0; d < a.size(); ++d) {
    if (a[d].size() != b[d].size()) {
      throw BacktestError("backtest: day " + std::to_string(d) + " has " + std::to_string(a[d].size()) +
                          " predictions for " + std::to_string(b[d].size()) + " stocks");
    }
  }
}

}  // namespace

std::vector<std::size_t> select_topk(std::span<const double> predictions, std::size_t k) {
  if (k == 0 || k > predictions.size()) {
    throw BacktestError("select_topk: k=" + std::to_string(k) + " outside [1, " +
                        std::to_string(predictions.size()) + "]");
  }
  std::vector<std::size_t> idx(predictions.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                    [&](std::size_t a, std::size_t b) {
                      return predictions[a] != predictions[b] ? predictions[a] > predictions[b] : a < b;
                    });
  idx.resize(k);
  return idx;
}

double day_return(std::span<const std::size_t> selected, std::span<const double> returns) {
  if (selected.empty()) throw BacktestError("day_return: empty selection");
  double s = 0.0;
  for (auto i : selected) s += returns[i];
  return s / static_cast<double>(selected.size());
}

double sharpe(std::span<const double> r, double risk_free, bool annualize, double trading_days) {
  if (r.size() < 2) throw BacktestError("sharpe: needs at least 2 days, got " + std::to_string(r.size()));
  double mean = 0.0;
  for (auto v : r) mean += v;
  mean /= static_cast<double>(r.size());
  double ss = 0.0;
  for (auto v : r) ss += (v - mean) * (v - mean);
  const double sd = std::sqrt(ss / static_cast<double>(r.size() - 1));
  if (sd == 0.0) throw BacktestError("sharpe: degenerate return series");
  const double sr = (mean - risk_free) / sd;
  return annualize ? sr * std::sqrt(trading_days) : sr;
}

BacktestReport report_from_selections(std::vector<std::vector<std::size_t>> selections,
                                      const std::vector<std::vector<double>>& returns, const BacktestConfig& cfg,
                                      std::vector<std::string> dates) {
  if (selections.size() != returns.size()) {
    throw BacktestError("backtest: " + std::to_string(selections.size()) + " selection days for " +
                        std::to_string(returns.size()) + " return days");
  }
  if (!dates.empty() && dates.size() != returns.size()) {
    throw BacktestError("backtest: " + std::to_string(dates.size()) + " dates for " +
                        std::to_string(returns.size()) + " days");
  }
  BacktestReport r;
  r.k = cfg.k;
  r.annualized = cfg.annualize;
  r.dates = std::move(dates);
  for (std::size_t d = 0; d < returns.size(); ++d) {
    const auto& sel = selections[d];
    for (auto i : sel) {
      if (i >= returns[d].size()) throw BacktestError("backtest: selected stock " + std::to_string(i) + " out of range");
    }
    double sum = 0.0;
    for (auto i : sel) sum += returns[d][i];
    r.day_sums.push_back(sum);
    r.day_returns.push_back(day_return(sel, returns[d]));
    r.irr_sum += sum;
    r.irr_mean += r.day_returns.back();
  }
  r.selections = std::move(selections);
  r.sharpe = sharpe(r.day_returns, cfg.risk_free, cfg.annualize, cfg.trading_days);
  return r;
}

BacktestReport run_backtest(const std::vector<std::vector<double>>& predictions,
                            const std::vector<std::vector<double>>& returns, const BacktestConfig& cfg,
                            std::vector<std::string> dates) {
  check_shape(predictions, returns);
  std::vector<std::vector<std::size_t>> sel;
  sel.reserve(predictions.size());
  for (const auto& p : predictions) sel.push_back(select_topk(p, cfg.k));
  return report_from_selections(std::move(sel), returns, cfg, std::move(dates));
}

BacktestReport market_baseline(const std::vector<std::vector<double>>& returns, const BacktestConfig& cfg,
                               std::vector<std::string> dates) {
  if (returns.empty() || returns.front().empty()) throw BacktestError("market baseline: empty split");
  std::vector<std::vector<std::size_t>> sel;
  for (const auto& day : returns) {
    sel.emplace_back(day.size());
    std::iota(sel.back().begin(), sel.back().end(), std::size_t{0});
  }
  BacktestConfig all = cfg;
  all.k = returns.front().size();
  return report_from_selections(std::move(sel), returns, all, std::move(dates));
}

SplitReturns split_returns(const data::FeatureTensor& ft, data::Split split) {
  SplitReturns out;
  for (const auto& batch : ft.day_batches(split)) {
    if (batch.samples.size() != ft.stocks()) {
      throw BacktestError("split " + std::string(data::split_name(split)) + ": day " + ft.dates[batch.day] +
                          " lacks samples for some stocks");
    }
    out.dates.push_back(ft.dates[batch.day]);
    std::vector<double> r;
    for (auto s : batch.samples) r.push_back(ft.samples[s].label);
    out.returns.push_back(std::move(r));
    out.samples.push_back(batch.samples);
  }
  return out;
}

std::string report_json(const BacktestReport& r) {
  nlohmann::ordered_json j;
  j["days"] = r.days();
  j["k"] = r.k;
  j["irr_sum"] = r.irr_sum;
  j["irr_mean"] = r.irr_mean;
  j["sharpe"] = r.sharpe;
  j["annualized"] = r.annualized;
  auto sel = nlohmann::ordered_json::array();
  for (std::size_t d = 0; d < r.selections.size(); ++d) {
    nlohmann::ordered_json day;
    if (!r.dates.empty()) day["date"] = r.dates[d];
    day["stocks"] = r.selections[d];
    day["return"] = r.day_returns[d];
    sel.push_back(std::move(day));
  }
  j["selections"] = std::move(sel);
  return j.dump(2) + "\n";
}

void write_report(const BacktestReport& r, const std::filesystem::path& json_file) {
  std::ofstream out(json_file, std::ios::binary);
  if (!out) throw BacktestError("cannot write " + json_file.string());
  out << report_json(r);
}

void write_returns_csv(const BacktestReport& r, const std::filesystem::path& csv_file) {
  std::ofstream out(csv_file, std::ios::binary);
  if (!out) throw BacktestError("cannot write " + csv_file.string());
  out << "day,portfolio_return,cumulative_irr\n";
  double cum = 0.0;
  for (std::size_t d = 0; d < r.day_sums.size(); ++d) {
    cum += r.day_sums[d];
    out << (r.dates.empty() ? std::to_string(d) : r.dates[d]) << ',' << shortest(r.day_sums[d]) << ',' << shortest(cum) << '\n';
  }
}

void write_predictions_csv(const std::vector<std::vector<double>>& predictions, const std::vector<std::string>& dates,
                           const std::vector<std::string>& tickers, const std::filesystem::path& file) {
  if (predictions.size() != dates.size()) throw BacktestError("predictions: day count does not match dates");
  std::ofstream out(file, std::ios::binary);
  if (!out) throw BacktestError("cannot write " + file.string());
  out << "date,ticker,prediction\n";
  for (std::size_t d = 0; d < dates.size(); ++d) {
    if (predictions[d].size() != tickers.size()) throw BacktestError("predictions: stock count does not match tickers");
    for (std::size_t i = 0; i < tickers.size(); ++i) out << dates[d] << ',' << tickers[i] << ',' << shortest(predictions[d][i]) << '\n';
  }
}

std::vector<std::vector<double>> read_predictions_csv(const std::filesystem::path& file,
                                                      const std::vector<std::string>& dates,
                                                      const std::vector<std::string>& tickers) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw BacktestError("cannot read predictions file " + file.string());
  std::map<std::string, std::size_t> day_of, stock_of;
  for (std::size_t d = 0; d < dates.size(); ++d) day_of[dates[d]] = d;
  for (std::size_t i = 0; i < tickers.size(); ++i) stock_of[tickers[i]] = i;
  std::vector<std::vector<double>> out(dates.size(), std::vector<double>(tickers.size()));
  std::vector<std::vector<bool>> seen(dates.size(), std::vector<bool>(tickers.size(), false));
  std::string line;
  std::size_t lineno = 0;
  auto fail = [&](const std::string& what) {
    throw BacktestError(file.string() + ":" + std::to_string(lineno) + ": " + what);
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (lineno == 1) {
      if (line != "date,ticker,prediction") fail("expected header 'date,ticker,prediction'");
      continue;
    }
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string date, ticker, value;
    if (!std::getline(ss, date, ',') || !std::getline(ss, ticker, ',') || !std::getline(ss, value)) {
      fail("expected 3 fields");
    }
    const auto d = day_of.find(date);
    const auto s = stock_of.find(ticker);
    if (d == day_of.end()) fail("date " + date + " is not in the evaluated split");
    if (s == stock_of.end()) fail("unknown ticker " + ticker);
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(value, &used);
    } catch (const std::exception&) {
      fail("bad prediction '" + value + "'");
    }
    if (used != value.size() || !std::isfinite(v)) fail("bad prediction '" + value + "'");
    if (seen[d->second][s->second]) fail("duplicate prediction for " + date + "," + ticker);
    out[d->second][s->second] = v;
    seen[d->second][s->second] = true;
  }
  for (std::size_t d = 0; d < dates.size(); ++d) {
    for (std::size_t i = 0; i < tickers.size(); ++i) {
      if (!seen[d][i]) throw BacktestError(file.string() + ": missing prediction for " + dates[d] + "," + tickers[i]);
    }
  }
  return out;
}

}  // namespace sspt::backtest
