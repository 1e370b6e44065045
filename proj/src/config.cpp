#include "sspt/config.hpp"

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <sstream>

namespace sspt::cli {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

bool parse_real(const std::string& v, double* out) {
  if (v.empty()) return false;
  errno = 0;
  char* end = nullptr;
  const double d = std::strtod(v.c_str(), &end);
  if (errno != 0 || end != v.c_str() + v.size() || !std::isfinite(d)) return false;
  *out = d;
  return true;
}

bool parse_int(const std::string& v, std::int64_t* out) {
  if (v.empty()) return false;
  errno = 0;
  char* end = nullptr;
  const long long x = std::strtoll(v.c_str(), &end, 10);
  if (errno != 0 || end != v.c_str() + v.size()) return false;
  *out = x;
  return true;
}

bool parse_bool(const std::string& v, bool* out) {
  if (v == "true" || v == "yes" || v == "1") {
    *out = true;
    return true;
  }
  if (v == "false" || v == "no" || v == "0") {
    *out = false;
    return true;
  }
  return false;
}

std::vector<std::string> split_choices(const char* c) {
  std::vector<std::string> out;
  std::stringstream ss(c);
  std::string item;
  while (std::getline(ss, item, '|')) out.push_back(item);
  return out;
}

}  // namespace

const std::vector<KeySpec>& schema() {
  using K = KeyKind;
  static const std::vector<KeySpec> keys = {
      {"seed", K::Int, "0", "global seed; every random stream derives from it"},
      {"out_dir", K::Path, "out", "output directory"},
      {"data_dir", K::Path, "", "directory of per-stock price files (ingest)"},
      {"sector_file", K::Path, "", "ticker,sector file (ingest)"},
      {"dataset", K::Path, "", "dataset file; default <out_dir>/dataset.bin"},
      {"checkpoint_in", K::Path, "", "checkpoint to start from; default depends on the command"},
      {"predictions", K::Path, "", "date,ticker,prediction file for backtest; default: predict from checkpoint"},

      {"lookback", K::Int, "16", "look-back window length in trading days"},
      {"allow_any_lookback", K::Bool, "false", "permit look-back lengths other than 16 and 32"},
      {"train_start", K::String, "", "first train date (ISO)"},
      {"train_end", K::String, "", "last train date (ISO)"},
      {"valid_start", K::String, "", "first validation date (ISO)"},
      {"valid_end", K::String, "", "last validation date (ISO)"},
      {"test_start", K::String, "", "first test date (ISO)"},
      {"test_end", K::String, "", "last test date (ISO)"},

      {"activation", K::Choice, "relu", "feed-forward activation", "relu|gelu"},
      {"norm", K::Choice, "pre", "layer-norm placement", "pre|post"},
      {"pooling", K::Choice, "mean", "sequence pooling", "mean|last"},

      {"alpha", K::Real, "1", "stock code classification weight"},
      {"beta", K::Real, "0", "sector classification weight"},
      {"gamma", K::Real, "0", "masked prediction weight"},
      {"pretrain_lr", K::String, "auto", "pre-training learning rate; auto picks the per-task default"},
      {"mask_rate", K::Real, "0.3", "fraction of window steps masked"},
      {"pretrain_epochs", K::Int, "100", "pre-training epochs"},
      {"batch_size", K::Int, "0", "pre-training batch size; 0 means the number of stocks"},
      {"feature_mode", K::Choice, "all", "input features", "all|close"},
      {"masked_objective", K::Choice, "map", "masked task: window-average or per-step values", "map|mvp"},

      {"init", K::Choice, "pretrained", "fine-tuning start point", "pretrained|fresh"},
      {"epsilon", K::Real, "1", "ranking loss weight"},
      {"finetune_lr", K::Real, "0.001", "fine-tuning learning rate"},
      {"strategy", K::Choice, "none", "frozen parameter groups",
       "none|embedding|embedding+attention|full-extractor"},
      {"finetune_epochs", K::Int, "100", "fine-tuning epochs"},

      {"k", K::Int, "5", "stocks bought per day"},
      {"risk_free", K::Real, "0", "daily risk-free return"},
      {"annualize", K::Bool, "true", "scale the Sharpe ratio by sqrt(trading_days)"},
      {"trading_days", K::Real, "252", "trading days per year"},
      {"backtest_split", K::Choice, "test", "split the backtest command evaluates", "train|valid|test"},

      {"sim_n", K::Int, "10", "simulated series"},
      {"sim_mode", K::Choice, "differing", "per-series or shared GBM parameters", "differing|identical"},
      {"mu_min", K::Real, "0", "lower end of the drift range"},
      {"mu_max", K::Real, "0.2", "upper end of the drift range"},
      {"sigma_min", K::Real, "0.1", "lower end of the volatility range"},
      {"sigma_max", K::Real, "0.3", "upper end of the volatility range"},
      {"sim_s0", K::Real, "100", "initial price"},
      {"sim_dt", K::Real, "0.003968253968253968", "time step in years"},
      {"sim_steps", K::Int, "1260", "simulated steps per series"},
      {"slice", K::Int, "16", "slice length"},
      {"repetitions", K::Int, "5", "repetitions per scenario"},
      {"sim_epochs", K::Int, "20", "classifier training epochs per repetition"},
      {"sim_lr", K::Real, "0.001", "classifier learning rate"},
      {"train_stride", K::Int, "0", "stride of training slices; 0 means the slice length"},
      {"sigma_widths", K::Real, "", "volatility range widths for a sweep (repeat the key)", "", true},

      {"grid_pretrain", K::Bool, "false", "grid search pre-trains each configuration before fine-tuning"},
  };
  return keys;
}

const KeySpec& key_spec(const std::string& key) {
  for (const auto& k : schema()) {
    if (key == k.name) return k;
  }
  throw UsageError("unknown config key '" + key + "'");
}

void check_value(const KeySpec& spec, const std::string& v) {
  auto bad = [&](const std::string& want) {
    throw UsageError("config key '" + std::string(spec.name) + "': '" + v + "' is not " + want);
  };
  switch (spec.kind) {
    case KeyKind::String:
    case KeyKind::Path:
      return;
    case KeyKind::Int: {
      std::int64_t x = 0;
      if (!parse_int(v, &x)) bad("an integer");
      return;
    }
    case KeyKind::Real: {
      double d = 0;
      if (!parse_real(v, &d)) bad("a finite number");
      return;
    }
    case KeyKind::Bool: {
      bool b = false;
      if (!parse_bool(v, &b)) bad("true or false");
      return;
    }
    case KeyKind::Choice: {
      const auto c = split_choices(spec.choices);
      if (std::find(c.begin(), c.end(), v) == c.end()) bad(std::string("one of ") + spec.choices);
      return;
    }
  }
}

Config::Config() {
  for (const auto& k : schema()) {
    if (k.list) {
      values_[k.name] = {};
    } else {
      values_[k.name] = {k.fallback};
    }
  }
}

Config Config::parse(const std::string& text, const std::string& origin) {
  Config c;
  std::map<std::string, std::vector<std::string>> seen;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw UsageError(origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
    }
    const auto key = trim(line.substr(0, eq));
    const auto value = trim(line.substr(eq + 1));
    try {
      check_value(key_spec(key), value);
    } catch (const UsageError& e) {
      throw UsageError(origin + ":" + std::to_string(lineno) + ": " + e.what());
    }
    seen[key].push_back(value);
  }
  for (auto& [k, v] : seen) c.values_[k] = std::move(v);
  return c;
}

Config Config::load(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw UsageError("cannot read config file " + file.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), file.string());
}

void Config::set(const std::string& key, std::vector<std::string> values) {
  const auto& spec = key_spec(key);
  for (const auto& v : values) check_value(spec, v);
  values_[key] = std::move(values);
}

void Config::apply_overrides(const std::vector<std::string>& assignments) {
  std::map<std::string, std::vector<std::string>> grouped;
  std::vector<std::string> order;
  for (const auto& a : assignments) {
    const auto eq = a.find('=');
    if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + a + "'");
    const auto key = trim(a.substr(0, eq));
    key_spec(key);
    if (!grouped.count(key)) order.push_back(key);
    grouped[key].push_back(trim(a.substr(eq + 1)));
  }
  for (const auto& k : order) set(k, grouped[k]);
}

const std::vector<std::string>& Config::values(const std::string& key) const {
  key_spec(key);
  return values_.at(key);
}

std::vector<std::string> Config::grid_keys() const {
  std::vector<std::string> out;
  for (const auto& k : schema()) {
    if (!k.list && values_.at(k.name).size() > 1) out.push_back(k.name);
  }
  return out;
}

const std::string& Config::single(const std::string& key) const {
  const auto& v = values(key);
  if (v.size() != 1) {
    throw UsageError("config key '" + key + "' has " + std::to_string(v.size()) + " values; expected one");
  }
  return v.front();
}

std::string Config::str(const std::string& key) const { return single(key); }

std::filesystem::path Config::path(const std::string& key) const { return single(key); }

std::int64_t Config::integer(const std::string& key) const {
  std::int64_t x = 0;
  if (!parse_int(single(key), &x)) throw UsageError("config key '" + key + "' is not an integer");
  return x;
}

std::size_t Config::count(const std::string& key) const {
  const auto x = integer(key);
  if (x < 0) throw UsageError("config key '" + key + "' must be non-negative");
  return static_cast<std::size_t>(x);
}

double Config::real(const std::string& key) const {
  double d = 0;
  if (!parse_real(single(key), &d)) throw UsageError("config key '" + key + "' is not a number");
  return d;
}

bool Config::flag(const std::string& key) const {
  bool b = false;
  if (!parse_bool(single(key), &b)) throw UsageError("config key '" + key + "' is not a boolean");
  return b;
}

std::vector<double> Config::reals(const std::string& key) const {
  std::vector<double> out;
  for (const auto& v : values(key)) {
    double d = 0;
    if (!parse_real(v, &d)) throw UsageError("config key '" + key + "' has non-numeric value '" + v + "'");
    out.push_back(d);
  }
  return out;
}

std::string Config::echo() const {
  std::ostringstream os;
  for (const auto& k : schema()) {
    os << "# " << k.doc << "\n";
    const auto& v = values_.at(k.name);
    if (v.empty()) os << "# " << k.name << " = (unset)\n";
    for (const auto& x : v) os << k.name << " = " << x << "\n";
  }
  return os.str();
}

void Config::require_scalars() const {
  const auto g = grid_keys();
  if (!g.empty()) {
    throw UsageError("config key '" + g.front() + "' has several values; value lists are only accepted by gridsearch");
  }
}

}  // namespace sspt::cli
