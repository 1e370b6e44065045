#include "sspt/market_data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <set>
#include <sstream>
#include <unordered_map>

#include "sspt/binary_io.hpp"
#include "sspt/format.hpp"

namespace sspt::data {

namespace {

std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(',', start);
    out.push_back(trim(std::string_view(line).substr(start, pos == std::string::npos ? std::string::npos : pos - start)));
    if (pos == std::string::npos) break;
    start = pos + 1;
  }
  return out;
}

bool is_iso_date(const std::string& s) {
  if (s.size() != 10 || s[4] != '-' || s[7] != '-') return false;
  for (std::size_t i : {0, 1, 2, 3, 5, 6, 8, 9}) {
    if (!std::isdigit(static_cast<unsigned char>(s[i]))) return false;
  }
  return true;
}

double parse_number(const std::string& field, const std::string& where) {
  double v = 0.0;
  const char* b = field.data();
  const char* e = field.data() + field.size();
  auto [ptr, ec] = std::from_chars(b, e, v);
  if (ec != std::errc() || ptr != e || !std::isfinite(v)) {
    throw DataError(where + ": cannot parse number '" + field + "'");
  }
  return v;
}

std::string fmt_double(double v) { return shortest(v); }

}  // namespace

void PriceSeries::validate() const {
  const auto n = dates.size();
  if (open.size() != n || high.size() != n || low.size() != n || close.size() != n || volume.size() != n) {
    throw DataError(ticker + ": column lengths differ");
  }
  if (n < kLongestMa + 1) {
    throw DataError(ticker + ": " + std::to_string(n) + " days, need at least " + std::to_string(kLongestMa + 1));
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (i > 0 && !(dates[i - 1] < dates[i])) {
      throw DataError(ticker + ": dates not strictly increasing at " + dates[i]);
    }
    if (!(open[i] > 0 && high[i] > 0 && low[i] > 0 && close[i] > 0)) {
      throw DataError(ticker + ": non-positive price on " + dates[i]);
    }
    if (!(volume[i] >= 0)) throw DataError(ticker + ": negative volume on " + dates[i]);
  }
}

PriceSeries read_price_csv(const std::filesystem::path& file, const std::string& ticker) {
  std::ifstream in(file);
  if (!in) throw DataError("cannot open price file " + file.string());
  PriceSeries s;
  s.ticker = ticker;
  std::string line;
  std::size_t lineno = 0;
  bool header = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (lineno == 1 && line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF) line = line.substr(3);
    if (trim(line).empty()) continue;
    const std::string where = file.string() + ":" + std::to_string(lineno);
    auto fields = split_csv(line);
    if (!header) {
      if (fields != std::vector<std::string>{"date", "open", "high", "low", "close", "volume"}) {
        throw DataError(where + ": expected header date,open,high,low,close,volume");
      }
      header = true;
      continue;
    }
    if (fields.size() != 6) {
      throw DataError(where + ": expected 6 fields, got " + std::to_string(fields.size()));
    }
    if (!is_iso_date(fields[0])) throw DataError(where + ": bad date '" + fields[0] + "'");
    s.dates.push_back(fields[0]);
    s.open.push_back(parse_number(fields[1], where));
    s.high.push_back(parse_number(fields[2], where));
    s.low.push_back(parse_number(fields[3], where));
    s.close.push_back(parse_number(fields[4], where));
    s.volume.push_back(parse_number(fields[5], where));
  }
  if (!header) throw DataError(file.string() + ": empty file");
  return s;
}

std::vector<PriceSeries> read_price_dir(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw DataError("data directory not found: " + dir.string());
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".csv") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<PriceSeries> out;
  for (const auto& f : files) out.push_back(read_price_csv(f, f.stem().string()));
  if (out.empty()) throw DataError("no *.csv price files in " + dir.string());
  return out;
}

SectorMap::SectorMap(std::map<std::string, std::string> sector_of) : sector_of_(std::move(sector_of)) {
  std::set<std::string> labels;
  for (const auto& [ticker, sector] : sector_of_) labels.insert(sector);
  labels_.assign(labels.begin(), labels.end());
}

SectorMap SectorMap::read_csv(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw DataError("cannot open sector file " + file.string());
  std::map<std::string, std::string> m;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    const std::string where = file.string() + ":" + std::to_string(lineno);
    auto fields = split_csv(line);
    if (fields.size() != 2 || fields[0].empty() || fields[1].empty()) {
      throw DataError(where + ": expected ticker,sector");
    }
    if (m.empty() && fields[0] == "ticker" && fields[1] == "sector") continue;
    if (!m.emplace(fields[0], fields[1]).second) throw DataError(where + ": duplicate ticker " + fields[0]);
  }
  return SectorMap(std::move(m));
}

const std::string& SectorMap::sector(const std::string& ticker) const {
  auto it = sector_of_.find(ticker);
  if (it == sector_of_.end()) throw DataError("ticker '" + ticker + "' has no sector");
  return it->second;
}

std::size_t SectorMap::class_of(const std::string& ticker) const {
  const auto& s = sector(ticker);
  return static_cast<std::size_t>(std::lower_bound(labels_.begin(), labels_.end(), s) - labels_.begin());
}

std::vector<std::optional<double>> moving_average(std::span<const double> series, std::size_t window) {
  if (window == 0) throw DataError("moving_average: window must be >= 1");
  if (series.size() < window) {
    throw DataError("moving_average: series of length " + std::to_string(series.size()) + " shorter than window " +
                    std::to_string(window));
  }
  std::vector<std::optional<double>> out(series.size());
  for (std::size_t t = window - 1; t < series.size(); ++t) {
    double s = 0.0;
    for (std::size_t j = t + 1 - window; j <= t; ++j) s += series[j];
    out[t] = s / static_cast<double>(window);
  }
  return out;
}

double compute_return(double p_t, double p_next) {
  if (!(p_t > 0.0)) throw DataError("compute_return: price must be positive, got " + fmt_double(p_t));
  return (p_next - p_t) / p_t;
}

std::vector<ColumnStats> fit_normalizer(std::span<const double> rows, std::size_t columns) {
  if (columns == 0 || rows.empty() || rows.size() % columns != 0) {
    throw DataError("fit_normalizer: need a non-empty row-major block");
  }
  std::vector<ColumnStats> stats(columns, {std::numeric_limits<double>::infinity(),
                                           -std::numeric_limits<double>::infinity()});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    auto& st = stats[i % columns];
    st.min = std::min(st.min, rows[i]);
    st.max = std::max(st.max, rows[i]);
  }
  return stats;
}

double apply_normalizer(double x, const ColumnStats& stats) {
  if (stats.degenerate()) return 0.0;
  return (x - stats.min) / (stats.max - stats.min);
}

const char* split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Valid: return "valid";
    case Split::Test: return "test";
  }
  return "?";
}

void DatasetConfig::validate() const {
  if (lookback == 0) throw DataError("lookback must be positive");
  if (!allow_any_lookback && lookback != 16 && lookback != 32) {
    throw DataError("lookback " + std::to_string(lookback) + " not in {16, 32}");
  }
  for (Split s : {Split::Train, Split::Valid, Split::Test}) {
    const auto& r = range(s);
    if (!is_iso_date(r.first) || !is_iso_date(r.last) || r.first > r.last) {
      throw DataError(std::string(split_name(s)) + " range '" + r.first + ".." + r.last + "' is not a valid date range");
    }
  }
  if (!(train.last < valid.first && valid.last < test.first)) {
    throw DataError("splits must be chronological and disjoint: train < valid < test");
  }
}

const DateRange& DatasetConfig::range(Split s) const {
  switch (s) {
    case Split::Train: return train;
    case Split::Valid: return valid;
    case Split::Test: return test;
  }
  return train;
}

std::vector<std::size_t> FeatureTensor::indices(Split s) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].split == s) out.push_back(i);
  }
  return out;
}

std::size_t FeatureTensor::count(Split s) const {
  return static_cast<std::size_t>(
      std::count_if(samples.begin(), samples.end(), [s](const Sample& x) { return x.split == s; }));
}

std::vector<DayBatch> FeatureTensor::day_batches(Split s) const {
  std::vector<DayBatch> out;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].split != s) continue;
    if (out.empty() || out.back().day != samples[i].day) out.push_back({samples[i].day, {}});
    out.back().samples.push_back(i);
  }
  return out;
}

std::uint64_t content_hash(const std::vector<PriceSeries>& universe, const SectorMap& sectors) {
  std::vector<const PriceSeries*> sorted;
  for (const auto& s : universe) sorted.push_back(&s);
  std::sort(sorted.begin(), sorted.end(), [](auto* a, auto* b) { return a->ticker < b->ticker; });
  io::Fnv1a h;
  for (const auto* s : sorted) {
    h.update(s->ticker);
    for (std::size_t i = 0; i < s->size(); ++i) {
      h.update(s->dates[i]);
      for (double v : {s->open[i], s->high[i], s->low[i], s->close[i], s->volume[i]}) h.update_value(v);
    }
  }
  for (const auto& [ticker, sector] : sectors.entries()) {
    h.update(ticker);
    h.update(sector);
  }
  return h.digest();
}

std::vector<PriceSeries> align_calendars(std::vector<PriceSeries> universe, std::size_t* dropped) {
  if (universe.empty()) throw DataError("empty universe");
  std::sort(universe.begin(), universe.end(), [](const auto& a, const auto& b) { return a.ticker < b.ticker; });
  for (std::size_t i = 1; i < universe.size(); ++i) {
    if (universe[i].ticker == universe[i - 1].ticker) throw DataError("duplicate ticker " + universe[i].ticker);
  }
  std::map<std::string, std::size_t> seen;
  for (const auto& s : universe) {
    for (const auto& d : s.dates) ++seen[d];
  }
  std::set<std::string> shared;
  for (const auto& [d, n] : seen) {
    if (n == universe.size()) shared.insert(d);
  }
  if (dropped) *dropped = seen.size() - shared.size();
  if (shared.size() < kLongestMa + 1) {
    std::vector<std::pair<std::size_t, std::string>> missing;
    for (const auto& s : universe) missing.emplace_back(seen.size() - s.size(), s.ticker);
    std::sort(missing.rbegin(), missing.rend());
    std::string names;
    for (std::size_t i = 0; i < std::min<std::size_t>(5, missing.size()); ++i) {
      names += (i ? ", " : "") + missing[i].second + " (" + std::to_string(missing[i].first) + " missing days)";
    }
    throw DataError("misaligned calendars: only " + std::to_string(shared.size()) + " shared trading days; " + names);
  }
  std::vector<PriceSeries> out;
  for (const auto& s : universe) {
    PriceSeries a;
    a.ticker = s.ticker;
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (!shared.count(s.dates[i])) continue;
      a.dates.push_back(s.dates[i]);
      a.open.push_back(s.open[i]);
      a.high.push_back(s.high[i]);
      a.low.push_back(s.low[i]);
      a.close.push_back(s.close[i]);
      a.volume.push_back(s.volume[i]);
    }
    out.push_back(std::move(a));
  }
  return out;
}

std::vector<double> raw_feature_rows(const PriceSeries& s) {
  const std::size_t n = s.size();
  std::vector<double> rows(n * kFeatureCount, std::numeric_limits<double>::quiet_NaN());
  for (std::size_t t = 0; t < n; ++t) {
    double* r = rows.data() + t * kFeatureCount;
    r[kOpen] = s.open[t];
    r[kHigh] = s.high[t];
    r[kLow] = s.low[t];
    r[kClose] = s.close[t];
    r[kVolume] = s.volume[t];
  }
  for (std::size_t m = 0; m < kMaWindows.size(); ++m) {
    if (n < kMaWindows[m]) continue;
    auto ma = moving_average(s.close, kMaWindows[m]);
    for (std::size_t t = 0; t < n; ++t) {
      if (ma[t]) rows[t * kFeatureCount + kMa5 + m] = *ma[t];
    }
  }
  return rows;
}

FeatureTensor build_windows(std::vector<PriceSeries> universe, const DatasetConfig& cfg, const SectorMap& sectors) {
  cfg.validate();
  for (const auto& s : universe) {
    s.validate();
    if (!sectors.contains(s.ticker)) throw DataError("ticker '" + s.ticker + "' has no sector");
  }
  FeatureTensor ft;
  ft.config = cfg;
  ft.content_hash = content_hash(universe, sectors);
  auto aligned = align_calendars(std::move(universe), &ft.days_dropped);
  ft.dates = aligned.front().dates;

  // Sector classes are indexed over the universe actually present.
  std::set<std::string> used;
  for (const auto& s : aligned) used.insert(sectors.sector(s.ticker));
  ft.sector_labels.assign(used.begin(), used.end());
  for (const auto& s : aligned) {
    ft.tickers.push_back(s.ticker);
    const auto& sec = sectors.sector(s.ticker);
    ft.sector_of_stock.push_back(static_cast<std::uint32_t>(
        std::lower_bound(ft.sector_labels.begin(), ft.sector_labels.end(), sec) - ft.sector_labels.begin()));
  }

  const std::size_t T = cfg.lookback;
  const std::size_t first_anchor = T - 1 + kLongestMa;  // window start has kLongestMa prior days
  std::array<std::vector<std::size_t>, 3> anchors;
  for (Split sp : {Split::Train, Split::Valid, Split::Test}) {
    const auto& r = cfg.range(sp);
    std::size_t lo = ft.dates.size(), hi = 0;
    for (std::size_t i = 0; i < ft.dates.size(); ++i) {
      if (r.contains(ft.dates[i])) {
        lo = std::min(lo, i);
        hi = std::max(hi, i);
      }
    }
    if (lo == ft.dates.size()) {
      throw DataError(std::string(split_name(sp)) + " split " + r.first + ".." + r.last + " covers no trading days");
    }
    for (std::size_t a = std::max(lo + T - 1, first_anchor); a + 1 <= hi; ++a) {
      anchors[static_cast<std::size_t>(sp)].push_back(a);
    }
  }
  const auto& train_anchors = anchors[0];
  if (train_anchors.empty()) {
    throw DataError("train split has no usable anchor day (needs " + std::to_string(first_anchor + 2) +
                    " aligned days before its end)");
  }

  std::vector<std::vector<double>> raw;
  for (const auto& s : aligned) raw.push_back(raw_feature_rows(s));

  // Normalizer rows: every (stock, day) some train window covers.
  const std::size_t row_lo = train_anchors.front() + 1 - T, row_hi = train_anchors.back();
  std::vector<double> train_rows;
  for (const auto& r : raw) {
    train_rows.insert(train_rows.end(), r.begin() + static_cast<std::ptrdiff_t>(row_lo * kFeatureCount),
                      r.begin() + static_cast<std::ptrdiff_t>((row_hi + 1) * kFeatureCount));
  }
  ft.normalizer = fit_normalizer(train_rows, kFeatureCount);

  for (Split sp : {Split::Train, Split::Valid, Split::Test}) {
    for (auto a : anchors[static_cast<std::size_t>(sp)]) {
      for (std::size_t st = 0; st < aligned.size(); ++st) {
        Sample smp;
        smp.stock = static_cast<std::uint32_t>(st);
        smp.day = static_cast<std::uint32_t>(a);
        smp.split = sp;
        smp.label = static_cast<float>(compute_return(aligned[st].close[a], aligned[st].close[a + 1]));
        ft.samples.push_back(smp);
        for (std::size_t d = a + 1 - T; d <= a; ++d) {
          for (std::size_t c = 0; c < kFeatureCount; ++c) {
            ft.windows.push_back(static_cast<float>(apply_normalizer(raw[st][d * kFeatureCount + c], ft.normalizer[c])));
          }
        }
      }
    }
  }
  return ft;
}

std::string manifest_text(const FeatureTensor& ft) {
  std::ostringstream os;
  os << "format = sspt-dataset-1\n";
  os << "stocks = " << ft.stocks() << "\n";
  os << "features = " << ft.feature_count << "\n";
  os << "lookback = " << ft.lookback() << "\n";
  os << "sectors = " << ft.sectors() << "\n";
  for (Split s : {Split::Train, Split::Valid, Split::Test}) {
    const auto& r = ft.config.range(s);
    os << split_name(s) << "_range = " << r.first << ".." << r.last << "\n";
  }
  os << "aligned_days = " << ft.dates.size() << "\n";
  os << "dropped_days = " << ft.days_dropped << "\n";
  for (Split s : {Split::Train, Split::Valid, Split::Test}) {
    os << split_name(s) << "_samples = " << ft.count(s) << "\n";
  }
  static const char* names[kFeatureCount] = {"open", "high", "low", "close", "volume", "ma5", "ma10", "ma20", "ma30"};
  for (std::size_t c = 0; c < ft.normalizer.size(); ++c) {
    os << "norm_" << (ft.feature_count == kFeatureCount ? std::string(names[c]) : std::to_string(c)) << " = " << fmt_double(ft.normalizer[c].min) << " " << fmt_double(ft.normalizer[c].max)
       << (ft.normalizer[c].degenerate() ? " degenerate" : "") << "\n";
  }
  os << "content_hash = " << io::hex64(ft.content_hash) << "\n";
  return os.str();
}

namespace {
constexpr char kDatasetMagic[4] = {'S', 'S', 'D', 'S'};
constexpr std::uint32_t kDatasetVersion = 1;
}  // namespace

void save_dataset(const FeatureTensor& ft, const std::filesystem::path& file) {
  std::ofstream os(file, std::ios::binary);
  if (!os) throw DataError("cannot write dataset file " + file.string());
  os.write(kDatasetMagic, 4);
  io::put(os, kDatasetVersion);
  io::put_string(os, manifest_text(ft));
  io::put<std::uint64_t>(os, ft.config.lookback);
  io::put<std::uint8_t>(os, ft.config.allow_any_lookback ? 1 : 0);
  io::put<std::uint64_t>(os, ft.feature_count);
  io::put<std::uint64_t>(os, ft.close_column);
  for (Split s : {Split::Train, Split::Valid, Split::Test}) {
    io::put_string(os, ft.config.range(s).first);
    io::put_string(os, ft.config.range(s).last);
  }
  auto put_strings = [&](const std::vector<std::string>& v) {
    io::put<std::uint64_t>(os, v.size());
    for (const auto& s : v) io::put_string(os, s);
  };
  put_strings(ft.tickers);
  io::put_array(os, ft.sector_of_stock);
  put_strings(ft.sector_labels);
  put_strings(ft.dates);
  io::put<std::uint64_t>(os, ft.days_dropped);
  std::vector<double> norm;
  for (const auto& c : ft.normalizer) {
    norm.push_back(c.min);
    norm.push_back(c.max);
  }
  io::put_array(os, norm);
  io::put_array(os, ft.windows);
  std::vector<std::uint32_t> stock, day;
  std::vector<float> label;
  std::vector<std::uint8_t> split;
  for (const auto& s : ft.samples) {
    stock.push_back(s.stock);
    day.push_back(s.day);
    label.push_back(s.label);
    split.push_back(static_cast<std::uint8_t>(s.split));
  }
  io::put_array(os, stock);
  io::put_array(os, day);
  io::put_array(os, label);
  io::put_array(os, split);
  io::put<std::uint64_t>(os, ft.content_hash);
  if (!os) throw DataError("failed writing dataset file " + file.string());
}

FeatureTensor load_dataset(const std::filesystem::path& file) {
  std::ifstream is(file, std::ios::binary);
  if (!is) throw DataError("dataset file not found: " + file.string());
  try {
    char magic[4];
    is.read(magic, 4);
    if (!is || !std::equal(magic, magic + 4, kDatasetMagic)) throw DataError(file.string() + ": not a dataset file");
    const auto version = io::get<std::uint32_t>(is);
    if (version != kDatasetVersion) throw DataError(file.string() + ": unsupported version " + std::to_string(version));
    (void)io::get_string(is);
    FeatureTensor ft;
    ft.config.lookback = io::get<std::uint64_t>(is);
    ft.config.allow_any_lookback = io::get<std::uint8_t>(is) != 0;
    ft.feature_count = io::get<std::uint64_t>(is);
    ft.close_column = io::get<std::uint64_t>(is);
    if (ft.feature_count == 0 || ft.close_column >= ft.feature_count) throw DataError(file.string() + ": bad feature layout");
    for (auto* r : {&ft.config.train, &ft.config.valid, &ft.config.test}) {
      r->first = io::get_string(is);
      r->last = io::get_string(is);
    }
    auto get_strings = [&]() {
      std::vector<std::string> v(io::get<std::uint64_t>(is));
      for (auto& s : v) s = io::get_string(is);
      return v;
    };
    ft.tickers = get_strings();
    ft.sector_of_stock = io::get_array<std::uint32_t>(is);
    ft.sector_labels = get_strings();
    ft.dates = get_strings();
    ft.days_dropped = io::get<std::uint64_t>(is);
    auto norm = io::get_array<double>(is);
    for (std::size_t i = 0; i + 1 < norm.size(); i += 2) ft.normalizer.push_back({norm[i], norm[i + 1]});
    ft.windows = io::get_array<float>(is);
    auto stock = io::get_array<std::uint32_t>(is);
    auto day = io::get_array<std::uint32_t>(is);
    auto label = io::get_array<float>(is);
    auto split = io::get_array<std::uint8_t>(is);
    if (day.size() != stock.size() || label.size() != stock.size() || split.size() != stock.size() ||
        ft.windows.size() != stock.size() * ft.window_size() || ft.sector_of_stock.size() != ft.tickers.size()) {
      throw DataError(file.string() + ": inconsistent array lengths");
    }
    for (std::size_t i = 0; i < stock.size(); ++i) {
      if (split[i] > 2) throw DataError(file.string() + ": bad split tag");
      ft.samples.push_back({stock[i], day[i], label[i], static_cast<Split>(split[i])});
    }
    ft.content_hash = io::get<std::uint64_t>(is);
    return ft;
  } catch (const io::FormatError& e) {
    throw DataError(file.string() + ": " + e.what());
  }
}

}  // namespace sspt::data
