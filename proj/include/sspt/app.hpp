#pragma once

// Command implementations behind the `sspt` executable. Each command echoes
// the resolved config into its output directory before doing any work.

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "sspt/backtest.hpp"
#include "sspt/config.hpp"
#include "sspt/finetune.hpp"
#include "sspt/market_data.hpp"
#include "sspt/model.hpp"
#include "sspt/pretrain.hpp"
#include "sspt/simlab.hpp"

namespace sspt::cli {

/// Exit codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitData = 2;

// Config -> library settings.
data::DatasetConfig dataset_config(const Config& c);
model::ModelConfig model_config(const Config& c, const data::FeatureTensor& ft);
pretrain::PretrainConfig pretrain_config(const Config& c);
finetune::FinetuneConfig finetune_config(const Config& c);
backtest::BacktestConfig backtest_config(const Config& c);
simlab::ScenarioConfig scenario_config(const Config& c);

std::filesystem::path dataset_path(const Config& c);

/// Builds and saves the dataset; writes manifest.txt. Returns the manifest text.
std::string cmd_ingest(const Config& c);
/// Writes pretrain.ckpt and pretrain_log.csv.
pretrain::TrainRun cmd_pretrain(const Config& c);
/// Writes finetune.ckpt, finetune_log.csv, and finetune_summary.txt (tunable parameter count included).
finetune::FinetuneRun cmd_finetune(const Config& c);
/// Writes report.json, returns.csv, and baseline_report.json for `backtest_split`.
backtest::BacktestReport cmd_backtest(const Config& c);
/// Writes scenarios.csv.
std::vector<simlab::ScenarioResult> cmd_simulate(const Config& c);

struct GridRow {
  explicit GridRow(std::size_t keys = 0) : values(keys) {}
  std::vector<std::string> values;  // one per grid key
  double valid_sharpe = 0.0;
  std::size_t best_epoch = 0;
};
struct GridResult {
  std::vector<std::string> keys;
  std::vector<GridRow> rows;
  std::size_t best = 0;
  backtest::BacktestReport test_report;
};
/// Runs the Cartesian product of list-valued keys (schema order, last key
/// fastest); writes grid_table.csv, best_config.txt, test_report.json, and
/// test_returns.csv.
GridResult cmd_gridsearch(const Config& c);
/// Summarises the artifacts found in the output directory.
std::string cmd_report(const Config& c);

/// Parses argv (without the program name) and dispatches; returns the exit code.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace sspt::cli
