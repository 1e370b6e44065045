#include "sspt/app.hpp"

#include <algorithm>
#include <chrono>
#include <ctime>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "sspt/binary_io.hpp"
#include "sspt/checkpoint.hpp"
#include "sspt/format.hpp"

namespace sspt::cli {

namespace fs = std::filesystem;

namespace {

// Seed streams derived from the global seed.
constexpr std::uint64_t kInitStream = 1;
constexpr std::uint64_t kPretrainStream = 2;
constexpr std::uint64_t kFinetuneStream = 3;
constexpr std::uint64_t kSimulateStream = 4;

fs::path out_dir(const Config& c) { return c.path("out_dir"); }

void write_text(const fs::path& file, const std::string& text) {
  std::ofstream out(file, std::ios::binary);
  if (!out) throw data::DataError("cannot write " + file.string());
  out << text;
}

std::string read_text(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) return {};
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// Timestamps go only to the sidecar log so every other output is reproducible.
void sidecar(const Config& c, const std::string& command, const std::string& event) {
  std::ofstream log(out_dir(c) / (command + ".log"), std::ios::app);
  log << timestamp() << ' ' << event << '\n';
}

void prepare_out(const Config& c, const std::string& command) {
  fs::create_directories(out_dir(c));
  write_text(out_dir(c) / "resolved_config.txt", c.echo());
  sidecar(c, command, "start");
}

fs::path require_file(const fs::path& p, const std::string& what) {
  if (!fs::exists(p)) throw data::DataError(what + " not found at expected path " + p.string());
  return p;
}

data::FeatureTensor load_ft(const Config& c) {
  return data::load_dataset(require_file(dataset_path(c), "dataset"));
}

std::string digest_of(const data::FeatureTensor& ft) { return io::hex64(ft.content_hash); }

Checkpoint load_matching(const fs::path& file, const data::FeatureTensor& ft, const std::string& what) {
  auto ck = load_checkpoint(require_file(file, what));
  if (ck.dataset_digest != digest_of(ft)) {
    throw data::DataError(what + " " + file.string() + " was trained on dataset " + ck.dataset_digest +
                          ", not " + digest_of(ft));
  }
  const auto& mc = ck.params.config;
  if (mc.lookback != ft.lookback() || mc.input_width != ft.feature_count + 1) {
    throw data::DataError(what + " " + file.string() + " does not match the dataset's window shape");
  }
  return ck;
}

fs::path checkpoint_in(const Config& c, const char* fallback) {
  const auto p = c.path("checkpoint_in");
  return p.empty() ? out_dir(c) / fallback : p;
}

finetune::FinetuneRun finetune_from(const Config& c, const data::FeatureTensor& ft,
                                    model::ParamSet<float> params) {
  const auto seed = static_cast<std::uint64_t>(c.integer("seed"));
  params = finetune::with_select_head(std::move(params), derive_seed(seed, kFinetuneStream));
  return finetune::run_finetuning(ft, finetune_config(c), std::move(params));
}

model::ParamSet<float> initial_params(const Config& c, const data::FeatureTensor& ft,
                                      const std::vector<model::HeadSpec>& heads) {
  const auto seed = static_cast<std::uint64_t>(c.integer("seed"));
  return model::init_params<float>(derive_seed(seed, kInitStream), model_config(c, ft), heads);
}

pretrain::TrainRun pretrain_on(const Config& c, const data::FeatureTensor& ft) {
  const auto pc = pretrain_config(c);
  return pretrain::run_pretraining(ft, pc, initial_params(c, ft, pretrain::required_heads(ft, pc)));
}

data::Split parse_split(const std::string& s) {
  if (s == "train") return data::Split::Train;
  if (s == "valid") return data::Split::Valid;
  return data::Split::Test;
}

backtest::BacktestReport backtest_params(const Config& c, const data::FeatureTensor& ft,
                                         const model::ParamSet<float>& params, data::Split split) {
  const auto sr = backtest::split_returns(ft, split);
  const auto preds = finetune::predict_split(params, ft, split, pretrain_config(c).features);
  return backtest::run_backtest(preds, sr.returns, backtest_config(c), sr.dates);
}

std::string fmt(double v) {
  return shortest(v);
}

}  // namespace

data::DatasetConfig dataset_config(const Config& c) {
  data::DatasetConfig d;
  d.lookback = c.count("lookback");
  d.allow_any_lookback = c.flag("allow_any_lookback");
  d.train = {c.str("train_start"), c.str("train_end")};
  d.valid = {c.str("valid_start"), c.str("valid_end")};
  d.test = {c.str("test_start"), c.str("test_end")};
  return d;
}

model::ModelConfig model_config(const Config& c, const data::FeatureTensor& ft) {
  auto mc = pretrain::model_config_for(ft);
  mc.activation = c.str("activation") == "gelu" ? model::Activation::Gelu : model::Activation::Relu;
  mc.norm = c.str("norm") == "post" ? model::NormPlacement::Post : model::NormPlacement::Pre;
  mc.pooling = c.str("pooling") == "last" ? model::Pooling::Last : model::Pooling::Mean;
  return mc;
}

pretrain::PretrainConfig pretrain_config(const Config& c) {
  pretrain::PretrainConfig p;
  p.alpha = c.real("alpha");
  p.beta = c.real("beta");
  p.gamma = c.real("gamma");
  if (c.str("pretrain_lr") != "auto") p.lr = c.real("pretrain_lr");
  p.mask_rate = c.real("mask_rate");
  p.epochs = c.count("pretrain_epochs");
  p.batch_size = c.count("batch_size");
  p.seed = derive_seed(static_cast<std::uint64_t>(c.integer("seed")), kPretrainStream);
  p.features = c.str("feature_mode") == "close" ? pretrain::FeatureMode::CloseOnly : pretrain::FeatureMode::AllFeatures;
  p.masked = c.str("masked_objective") == "mvp" ? pretrain::MaskedObjective::MaskedValue
                                                 : pretrain::MaskedObjective::MovingAverage;
  return p;
}

finetune::FinetuneConfig finetune_config(const Config& c) {
  finetune::FinetuneConfig f;
  f.epsilon = c.real("epsilon");
  f.lr = c.real("finetune_lr");
  f.strategy = finetune::parse_strategy(c.str("strategy"));
  f.epochs = c.count("finetune_epochs");
  f.seed = derive_seed(static_cast<std::uint64_t>(c.integer("seed")), kFinetuneStream);
  f.features = pretrain_config(c).features;
  f.backtest = backtest_config(c);
  return f;
}

backtest::BacktestConfig backtest_config(const Config& c) {
  backtest::BacktestConfig b;
  b.k = c.count("k");
  b.risk_free = c.real("risk_free");
  b.annualize = c.flag("annualize");
  b.trading_days = c.real("trading_days");
  return b;
}

simlab::ScenarioConfig scenario_config(const Config& c) {
  simlab::ScenarioConfig s;
  s.n = c.count("sim_n");
  s.mode = simlab::parse_mode(c.str("sim_mode"));
  s.mu_lo = c.real("mu_min");
  s.mu_hi = c.real("mu_max");
  s.sigma_lo = c.real("sigma_min");
  s.sigma_hi = c.real("sigma_max");
  s.s0 = c.real("sim_s0");
  s.dt = c.real("sim_dt");
  s.steps = c.count("sim_steps");
  s.slice = c.count("slice");
  s.repetitions = c.count("repetitions");
  s.epochs = c.count("sim_epochs");
  s.lr = c.real("sim_lr");
  s.train_stride = c.count("train_stride");
  s.seed = derive_seed(static_cast<std::uint64_t>(c.integer("seed")), kSimulateStream);
  return s;
}

fs::path dataset_path(const Config& c) {
  const auto p = c.path("dataset");
  return p.empty() ? out_dir(c) / "dataset.bin" : p;
}

std::string cmd_ingest(const Config& c) {
  c.require_scalars();
  prepare_out(c, "ingest");
  if (c.path("data_dir").empty()) throw UsageError("ingest needs data_dir");
  if (c.path("sector_file").empty()) throw UsageError("ingest needs sector_file");
  auto universe = data::read_price_dir(require_file(c.path("data_dir"), "price directory"));
  const auto sectors = data::SectorMap::read_csv(require_file(c.path("sector_file"), "sector file"));
  const auto ft = data::build_windows(std::move(universe), dataset_config(c), sectors);
  data::save_dataset(ft, dataset_path(c));
  const auto manifest = data::manifest_text(ft);
  write_text(out_dir(c) / "manifest.txt", manifest);
  sidecar(c, "ingest", "done");
  return manifest;
}

pretrain::TrainRun cmd_pretrain(const Config& c) {
  c.require_scalars();
  prepare_out(c, "pretrain");
  const auto ft = load_ft(c);
  auto run = pretrain_on(c, ft);
  save_checkpoint({digest_of(ft), run.best_params, std::nullopt, run.log}, out_dir(c) / "pretrain.ckpt");
  write_metric_csv(run.log, out_dir(c) / "pretrain_log.csv");
  sidecar(c, "pretrain", "done");
  return run;
}

finetune::FinetuneRun cmd_finetune(const Config& c) {
  c.require_scalars();
  prepare_out(c, "finetune");
  const auto ft = load_ft(c);
  model::ParamSet<float> start;
  if (c.str("init") == "pretrained") {
    start = load_matching(checkpoint_in(c, "pretrain.ckpt"), ft, "pre-trained checkpoint").params;
  } else {
    start = initial_params(c, ft, {});
  }
  auto res = finetune_from(c, ft, std::move(start));
  save_checkpoint({digest_of(ft), res.run.best_params, std::nullopt, res.run.log}, out_dir(c) / "finetune.ckpt");
  write_metric_csv(res.run.log, out_dir(c) / "finetune_log.csv");
  std::ostringstream os;
  os << "strategy = " << c.str("strategy") << "\n"
     << "tunable_parameters = " << res.partition.tunable_count << "\n"
     << "frozen_parameters = " << res.partition.frozen_count << "\n"
     << "best_epoch = " << res.run.best_epoch << "\n"
     << "valid_sharpe = " << fmt(res.run.best_metric) << "\n";
  write_text(out_dir(c) / "finetune_summary.txt", os.str());
  sidecar(c, "finetune", "done");
  return res;
}

backtest::BacktestReport cmd_backtest(const Config& c) {
  c.require_scalars();
  prepare_out(c, "backtest");
  const auto ft = load_ft(c);
  const auto split = parse_split(c.str("backtest_split"));
  const auto sr = backtest::split_returns(ft, split);
  const auto cfg = backtest_config(c);
  backtest::BacktestReport report;
  if (!c.path("predictions").empty()) {
    const auto preds =
        backtest::read_predictions_csv(require_file(c.path("predictions"), "predictions file"), sr.dates, ft.tickers);
    report = backtest::run_backtest(preds, sr.returns, cfg, sr.dates);
  } else {
    const auto ck = load_matching(checkpoint_in(c, "finetune.ckpt"), ft, "fine-tuned checkpoint");
    report = backtest_params(c, ft, ck.params, split);
  }
  backtest::write_report(report, out_dir(c) / "report.json");
  backtest::write_returns_csv(report, out_dir(c) / "returns.csv");
  backtest::write_report(backtest::market_baseline(sr.returns, cfg, sr.dates), out_dir(c) / "baseline_report.json");
  sidecar(c, "backtest", "done");
  return report;
}

std::vector<simlab::ScenarioResult> cmd_simulate(const Config& c) {
  c.require_scalars();
  prepare_out(c, "simulate");
  const auto sc = scenario_config(c);
  const auto widths = c.reals("sigma_widths");
  std::vector<simlab::ScenarioResult> results;
  if (widths.empty()) {
    results.push_back(simlab::run_scenario(sc));
  } else {
    results = simlab::sigma_sweep(sc, sc.sigma_lo, widths);
  }
  simlab::write_results_csv(results, out_dir(c) / "scenarios.csv");
  sidecar(c, "simulate", "done");
  return results;
}

GridResult cmd_gridsearch(const Config& c) {
  prepare_out(c, "gridsearch");
  const auto ft = load_ft(c);
  GridResult g;
  g.keys = c.grid_keys();
  std::vector<std::vector<std::string>> lists;
  for (const auto& k : g.keys) lists.push_back(c.values(k));

  // Mixed-radix enumeration of the Cartesian product; the last key varies fastest.
  std::size_t total = 1;
  for (const auto& l : lists) total *= l.size();
  model::ParamSet<float> best_params;
  Config best_cfg;
  for (std::size_t idx = 0; idx < total; ++idx) {
    Config one = c;
    GridRow row(g.keys.size());
    for (std::size_t i = g.keys.size(), rest = idx; i-- > 0; rest /= lists[i].size()) {
      row.values[i] = lists[i][rest % lists[i].size()];
      one.set(g.keys[i], {row.values[i]});
    }
    char sub[32];
    std::snprintf(sub, sizeof sub, "config-%03zu", idx);
    one.set("out_dir", {(out_dir(c) / "grid" / sub).string()});
    fs::create_directories(out_dir(one));
    write_text(out_dir(one) / "resolved_config.txt", one.echo());

    model::ParamSet<float> start;
    if (one.flag("grid_pretrain")) {
      auto pre = pretrain_on(one, ft);
      write_metric_csv(pre.log, out_dir(one) / "pretrain_log.csv");
      start = std::move(pre.best_params);
    } else if (one.str("init") == "pretrained") {
      start = load_matching(checkpoint_in(one, "pretrain.ckpt"), ft, "pre-trained checkpoint").params;
    } else {
      start = initial_params(one, ft, {});
    }
    auto res = finetune_from(one, ft, std::move(start));
    write_metric_csv(res.run.log, out_dir(one) / "finetune_log.csv");
    row.valid_sharpe = res.run.best_metric;
    row.best_epoch = res.run.best_epoch;
    if (g.rows.empty() || row.valid_sharpe > g.rows[g.best].valid_sharpe) {
      g.best = g.rows.size();
      best_params = std::move(res.run.best_params);
      best_cfg = one;
    }
    g.rows.push_back(std::move(row));
  }

  std::ostringstream table;
  table << "config";
  for (const auto& k : g.keys) table << ',' << k;
  table << ",valid_sharpe,best_epoch\n";
  for (std::size_t r = 0; r < g.rows.size(); ++r) {
    table << r;
    for (const auto& v : g.rows[r].values) table << ',' << v;
    table << ',' << fmt(g.rows[r].valid_sharpe) << ',' << g.rows[r].best_epoch << '\n';
  }
  write_text(out_dir(c) / "grid_table.csv", table.str());

  // Test metrics only for the validation-selected configuration.
  g.test_report = backtest_params(best_cfg, ft, best_params, data::Split::Test);
  std::ostringstream best;
  best << "# selected configuration " << g.best << " by validation Sharpe ratio\n";
  for (std::size_t i = 0; i < g.keys.size(); ++i) best << g.keys[i] << " = " << g.rows[g.best].values[i] << "\n";
  write_text(out_dir(c) / "best_config.txt", best.str());
  backtest::write_report(g.test_report, out_dir(c) / "test_report.json");
  backtest::write_returns_csv(g.test_report, out_dir(c) / "test_returns.csv");
  sidecar(c, "gridsearch", "done");
  return g;
}

std::string cmd_report(const Config& c) {
  c.require_scalars();
  const auto dir = out_dir(c);
  if (!fs::is_directory(dir)) throw data::DataError("output directory not found at expected path " + dir.string());
  std::ostringstream os;
  os << "# summary of " << dir.string() << "\n";
  bool any = false;
  if (const auto m = read_text(dir / "manifest.txt"); !m.empty()) {
    any = true;
    os << "\n[dataset]\n" << m;
  }
  for (const char* name : {"pretrain_log.csv", "finetune_log.csv"}) {
    if (!fs::exists(dir / name)) continue;
    any = true;
    os << "\n[" << name << "]\n";
    std::map<std::pair<std::string, std::string>, std::pair<std::uint32_t, double>> last;
    for (const auto& r : read_metric_csv(dir / name)) last[{r.split, r.metric}] = {r.epoch, r.value};
    for (const auto& [key, v] : last) {
      os << key.first << ' ' << key.second << " (epoch " << v.first << ") = " << fmt(v.second) << "\n";
    }
  }
  for (const char* name : {"finetune_summary.txt", "best_config.txt", "grid_table.csv", "scenarios.csv"}) {
    if (const auto t = read_text(dir / name); !t.empty()) {
      any = true;
      os << "\n[" << name << "]\n" << t;
    }
  }
  for (const char* name : {"report.json", "baseline_report.json", "test_report.json"}) {
    const auto t = read_text(dir / name);
    if (t.empty()) continue;
    any = true;
    const auto j = nlohmann::json::parse(t);
    os << "\n[" << name << "]\ndays = " << j["days"].get<std::size_t>() << "\nk = " << j["k"].get<std::size_t>()
       << "\nirr_sum = " << fmt(j["irr_sum"].get<double>()) << "\nirr_mean = " << fmt(j["irr_mean"].get<double>())
       << "\nsharpe = " << fmt(j["sharpe"].get<double>()) << "\n";
  }
  if (!any) throw data::DataError("no artifacts found in " + dir.string());
  write_text(dir / "summary.txt", os.str());
  return os.str();
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Stock-specialized pre-trained transformer toolkit", "sspt"};
  app.require_subcommand(1);
  std::string config_file, out_override;
  std::uint64_t seed = 0;
  std::vector<std::string> sets;
  app.add_option("--config", config_file, "config file (key = value lines)");
  auto* seed_opt = app.add_option("--seed", seed, "global seed");
  app.add_option("--out", out_override, "output directory");
  app.add_option("--set", sets, "override key=value (repeatable)")
      ->expected(1)
      ->multi_option_policy(CLI::MultiOptionPolicy::TakeAll);
  const std::vector<std::pair<const char*, const char*>> commands = {
      {"ingest", "build the windowed dataset from price files"},
      {"pretrain", "multi-task pre-training"},
      {"finetune", "stock-selection fine-tuning"},
      {"backtest", "top-k backtest of a fine-tuned model or a predictions file"},
      {"simulate", "GBM source-series classification experiments"},
      {"gridsearch", "hyper-parameter grid with validation-based selection"},
      {"report", "summarise artifacts in the output directory"},
  };
  for (const auto& [name, help] : commands) app.add_subcommand(name, help)->fallthrough();

  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }
  const std::string command = app.get_subcommands().front()->get_name();

  try {
    Config c = config_file.empty() ? Config() : Config::load(config_file);
    c.apply_overrides(sets);
    if (seed_opt->count() > 0) c.set("seed", {std::to_string(seed)});
    if (!out_override.empty()) c.set("out_dir", {out_override});
    if (command == "ingest") {
      out << cmd_ingest(c);
    } else if (command == "pretrain") {
      const auto run = cmd_pretrain(c);
      out << "best epoch " << run.best_epoch << ": valid " << run.selection_metric << " = " << fmt(run.best_metric)
          << "\n";
    } else if (command == "finetune") {
      const auto res = cmd_finetune(c);
      out << "tunable parameters " << res.partition.tunable_count << ", frozen " << res.partition.frozen_count
          << "\nbest epoch " << res.run.best_epoch << ": valid sharpe = " << fmt(res.run.best_metric) << "\n";
    } else if (command == "backtest") {
      const auto r = cmd_backtest(c);
      out << "days " << r.days() << ", irr_sum " << fmt(r.irr_sum) << ", irr_mean " << fmt(r.irr_mean) << ", sharpe "
          << fmt(r.sharpe) << "\n";
    } else if (command == "simulate") {
      for (const auto& r : cmd_simulate(c)) {
        out << simlab::mode_name(r.config.mode) << " N=" << r.config.n << " width=" << fmt(r.config.width())
            << " mean accuracy " << fmt(r.mean) << "\n";
      }
    } else if (command == "gridsearch") {
      const auto g = cmd_gridsearch(c);
      out << read_text(out_dir(c) / "grid_table.csv") << "selected config " << g.best << "; test sharpe "
          << fmt(g.test_report.sharpe) << "\n";
    } else {
      out << cmd_report(c);
    }
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitData;
  }
  return kExitOk;
}

}  // namespace sspt::cli
