#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "sspt/app.hpp"
#include "sspt/backtest.hpp"
#include "sspt/config.hpp"
#include "support.hpp"

using namespace sspt;
using namespace sspt::cli;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code = 0;
  std::string out, err;
};

Result run(std::vector<std::string> args) {
  std::ostringstream out, err;
  Result r;
  r.code = run_cli(args, out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

/// Price fixture plus a config file for it; returns the config path.
fs::path workspace(const std::string& name, std::size_t stocks = 4, std::size_t days = 170) {
  const auto dir = testing::scratch_dir(name);
  const auto f = testing::fixture(stocks, days, 21);
  testing::write_fixture(f, dir);
  std::ofstream cfg(dir / "run.cfg");
  cfg << "data_dir = " << (dir / "prices").string() << "\n"
      << "sector_file = " << (dir / "sectors.csv").string() << "\n"
      << "out_dir = " << (dir / "out").string() << "\n"
      << "train_start = " << f.config.train.first << "\ntrain_end = " << f.config.train.last << "\n"
      << "valid_start = " << f.config.valid.first << "\nvalid_end = " << f.config.valid.last << "\n"
      << "test_start = " << f.config.test.first << "\ntest_end = " << f.config.test.last << "\n"
      << "pretrain_epochs = 1\nfinetune_epochs = 1\nk = 2\n";
  return dir / "run.cfg";
}

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

}  // namespace

TEST_CASE("config parse and echo round trip") {
  auto c = Config::parse("seed = 7\n# comment\nk = 3  # trailing\nsigma_widths = 0.05\nsigma_widths = 0.4\n", "t.cfg");
  CHECK(c.integer("seed") == 7);
  CHECK(c.count("k") == 3);
  CHECK(c.reals("sigma_widths") == std::vector<double>{0.05, 0.4});
  CHECK(c.grid_keys().empty());
  const auto back = Config::parse(c.echo(), "echo");
  CHECK(back == c);
  CHECK(Config::parse(Config().echo(), "defaults") == Config());
}

TEST_CASE("config errors name the file and line") {
  CHECK_THROWS_WITH_AS(Config::parse("seed = 1\nbogus = 2\n", "x.cfg"), doctest::Contains("x.cfg:2"), UsageError);
  CHECK_THROWS_WITH_AS(Config::parse("k = many\n", "x.cfg"), doctest::Contains("x.cfg:1"), UsageError);
  CHECK_THROWS_WITH_AS(Config::parse("strategy = most\n", "x.cfg"), doctest::Contains("none|embedding"), UsageError);
  CHECK_THROWS_AS(Config::parse("just words\n", "x.cfg"), UsageError);

  auto c = Config::parse("finetune_lr = 0.001\nfinetune_lr = 0.0001\n", "g.cfg");
  CHECK(c.grid_keys() == std::vector<std::string>{"finetune_lr"});
  CHECK_THROWS_AS(c.require_scalars(), UsageError);
  CHECK_THROWS_AS(c.real("finetune_lr"), UsageError);
  c.apply_overrides({"epsilon=1", "epsilon=5", "k=4"});
  CHECK(c.values("epsilon") == std::vector<std::string>{"1", "5"});
  CHECK(c.count("k") == 4);
  CHECK_THROWS_AS(c.apply_overrides({"nonsense"}), UsageError);
}

TEST_CASE("exit codes") {
  CHECK(run({}).code == kExitUsage);
  CHECK(run({"frobnicate"}).code == kExitUsage);
  const auto dir = testing::scratch_dir("cli-codes");
  auto r = run({"--set", "bogus=1", "report"});
  CHECK(r.code == kExitUsage);
  CHECK(r.err.find("bogus") != std::string::npos);
  r = run({"--out", (dir / "none").string(), "pretrain"});
  CHECK(r.code == kExitData);
  CHECK(r.err.find((dir / "none" / "dataset.bin").string()) != std::string::npos);
  r = run({"--out", dir.string(), "--set", "finetune_lr=0.1", "--set", "finetune_lr=0.2", "finetune"});
  CHECK(r.code == kExitUsage);
  CHECK(r.err.find("gridsearch") != std::string::npos);
  CHECK(run({"--config", (dir / "missing.cfg").string(), "report"}).code == kExitUsage);
}

TEST_CASE("ingest is deterministic and matches the counting oracle") {
  const auto dir = testing::scratch_dir("cli-ingest");
  const auto f = testing::fixture(2, 80, 3);
  testing::write_fixture(f, dir);
  const auto& d = f.universe[0].dates;
  const std::vector<std::string> base = {"--set", "data_dir=" + (dir / "prices").string(),
                                         "--set", "sector_file=" + (dir / "sectors.csv").string(),
                                         "--set", "train_start=" + d[0], "--set", "train_end=" + d[59],
                                         "--set", "valid_start=" + d[60], "--set", "valid_end=" + d[69],
                                         "--set", "test_start=" + d[70], "--set", "test_end=" + d[79]};
  auto args = base;
  args.insert(args.end(), {"--out", (dir / "a").string(), "ingest"});
  REQUIRE(run(args).code == kExitOk);
  args = base;
  args.insert(args.end(), {"--out", (dir / "b").string(), "ingest"});
  REQUIRE(run(args).code == kExitOk);
  const auto manifest = testing::slurp(dir / "a" / "manifest.txt");
  CHECK(manifest == testing::slurp(dir / "b" / "manifest.txt"));
  CHECK(manifest.find("train_samples = 28\n") != std::string::npos);
  CHECK(manifest.find("content_hash = ") != std::string::npos);
  CHECK(fs::exists(dir / "a" / "resolved_config.txt"));

  // A ticker without a sector is a named data error.
  std::ofstream(dir / "sectors.csv") << "ticker,sector\nSTK0,SEC0\n";
  args = base;
  args.insert(args.end(), {"--out", (dir / "c").string(), "ingest"});
  const auto r = run(args);
  CHECK(r.code == kExitData);
  CHECK(r.err.find("STK1") != std::string::npos);
}

TEST_CASE("pipeline: pretrain, finetune, backtest, report") {
  const auto cfg = workspace("cli-pipeline").string();
  const auto out = fs::path(cfg).parent_path() / "out";
  REQUIRE(run({"--config", cfg, "ingest"}).code == kExitOk);
  REQUIRE(run({"--config", cfg, "--set", "beta=1", "--set", "gamma=1", "pretrain"}).code == kExitOk);
  CHECK(fs::exists(out / "pretrain.ckpt"));
  CHECK(fs::exists(out / "pretrain_log.csv"));

  auto r = run({"--config", cfg, "--set", "strategy=full-extractor", "finetune"});
  REQUIRE(r.code == kExitOk);
  const auto summary = testing::slurp(out / "finetune_summary.txt");
  CHECK(summary.find("tunable_parameters = 33\n") != std::string::npos);

  r = run({"--config", cfg, "backtest"});
  REQUIRE(r.code == kExitOk);
  const auto rep = nlohmann::json::parse(testing::slurp(out / "report.json"));
  CHECK(rep["k"] == 2);
  CHECK(fs::exists(out / "baseline_report.json"));
  CHECK(fs::exists(out / "returns.csv"));

  r = run({"--config", cfg, "report"});
  REQUIRE(r.code == kExitOk);
  CHECK(r.out.find("[report.json]") != std::string::npos);

  // Fine-tuning from a missing checkpoint names the expected path.
  r = run({"--config", cfg, "--set", "checkpoint_in=" + (out / "nope.ckpt").string(), "finetune"});
  CHECK(r.code == kExitData);
  CHECK(r.err.find("nope.ckpt") != std::string::npos);
}

TEST_CASE("backtest of a perfect-foresight prediction file reproduces the oracle") {
  const auto cfg = workspace("cli-foresight").string();
  const auto out = fs::path(cfg).parent_path() / "out";
  REQUIRE(run({"--config", cfg, "ingest"}).code == kExitOk);
  const auto ft = data::load_dataset(out / "dataset.bin");
  const auto split = backtest::split_returns(ft, data::Split::Test);
  backtest::write_predictions_csv(split.returns, split.dates, ft.tickers, out / "oracle.csv");

  const auto r = run({"--config", cfg, "--set", "predictions=" + (out / "oracle.csv").string(), "--set", "k=1",
                      "--set", "annualize=false", "backtest"});
  REQUIRE(r.code == kExitOk);
  double best_sum = 0;
  std::vector<double> daily;
  for (const auto& day : split.returns) {
    daily.push_back(*std::max_element(day.begin(), day.end()));
    best_sum += daily.back();
  }
  const auto rep = nlohmann::json::parse(testing::slurp(out / "report.json"));
  CHECK(rep["irr_sum"].get<double>() == doctest::Approx(best_sum).epsilon(1e-12));
  CHECK(rep["irr_mean"].get<double>() == doctest::Approx(best_sum).epsilon(1e-12));
  CHECK(rep["days"].get<std::size_t>() == daily.size());
}

TEST_CASE("gridsearch enumerates the Cartesian product and selects on validation only") {
  const auto cfg = workspace("cli-grid").string();
  const auto out = fs::path(cfg).parent_path() / "out";
  REQUIRE(run({"--config", cfg, "ingest"}).code == kExitOk);
  const std::vector<std::string> grid = {"--config", cfg, "--set", "init=fresh",
                                         "--set", "finetune_lr=0.001", "--set", "finetune_lr=0.0001",
                                         "--set", "finetune_lr=0.00001", "--set", "epsilon=1",
                                         "--set", "epsilon=5", "--set", "epsilon=10"};
  auto args = grid;
  args.push_back("gridsearch");
  REQUIRE(run(args).code == kExitOk);
  const auto table = lines_of(testing::slurp(out / "grid_table.csv"));
  REQUIRE(table.size() == 10);
  CHECK(table[0] == "config,epsilon,finetune_lr,valid_sharpe,best_epoch");
  CHECK(table[1].rfind("0,1,0.001,", 0) == 0);
  CHECK(table[2].rfind("1,1,0.0001,", 0) == 0);
  CHECK(table[9].rfind("8,10,0.00001,", 0) == 0);
  const auto best = testing::slurp(out / "best_config.txt");

  // Scrambling test labels changes neither the table nor the selection.
  auto ft = data::load_dataset(out / "dataset.bin");
  Rng rng(1);
  for (auto& s : ft.samples) {
    if (s.split == data::Split::Test) s.label = static_cast<float>(0.05 * rng.normal());
  }
  data::save_dataset(ft, out / "scrambled.bin");
  args = grid;
  args.insert(args.end(), {"--set", "dataset=" + (out / "scrambled.bin").string(), "--out",
                           (out / "scrambled").string(), "gridsearch"});
  REQUIRE(run(args).code == kExitOk);
  CHECK(testing::slurp(out / "scrambled" / "best_config.txt") == best);
  CHECK(lines_of(testing::slurp(out / "scrambled" / "grid_table.csv")) == table);
}

TEST_CASE("a grid of singletons is a single run") {
  const auto cfg = workspace("cli-single").string();
  const auto out = fs::path(cfg).parent_path() / "out";
  REQUIRE(run({"--config", cfg, "ingest"}).code == kExitOk);
  REQUIRE(run({"--config", cfg, "--set", "init=fresh", "gridsearch"}).code == kExitOk);
  const auto table = lines_of(testing::slurp(out / "grid_table.csv"));
  REQUIRE(table.size() == 2);
  REQUIRE(run({"--config", cfg, "--set", "init=fresh", "finetune"}).code == kExitOk);
  const auto summary = testing::slurp(out / "finetune_summary.txt");
  const auto sharpe = table[1].substr(2, table[1].rfind(',') - 2);
  CHECK(summary.find("valid_sharpe = " + sharpe + "\n") != std::string::npos);
}

TEST_CASE("simulate writes one row per repetition") {
  const auto dir = testing::scratch_dir("cli-sim");
  const auto r = run({"--out", dir.string(), "--set", "sim_n=3", "--set", "sim_steps=300", "--set", "repetitions=2",
                      "--set", "sim_epochs=1", "simulate"});
  REQUIRE(r.code == kExitOk);
  const auto rows = lines_of(testing::slurp(dir / "scenarios.csv"));
  CHECK(rows.size() == 3);
  CHECK(rows[0] == "mode,N,width,rep,accuracy");
}
