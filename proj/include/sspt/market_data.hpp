#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace sspt::data {

/// Malformed or inconsistent input data.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::size_t kFeatureCount = 9;
inline constexpr std::array<std::size_t, 4> kMaWindows = {5, 10, 20, 30};
inline constexpr std::size_t kLongestMa = 30;

/// Column order of every feature row.
enum Feature : std::size_t { kOpen, kHigh, kLow, kClose, kVolume, kMa5, kMa10, kMa20, kMa30 };

struct PriceSeries {
  std::string ticker;
  std::vector<std::string> dates;  // ISO-8601, strictly increasing
  std::vector<double> open, high, low, close, volume;

  std::size_t size() const noexcept { return dates.size(); }
  void validate() const;
};

/// Reads `date,open,high,low,close,volume`. Errors carry file and line.
PriceSeries read_price_csv(const std::filesystem::path& file, const std::string& ticker);

/// Every *.csv in `dir` (ticker = file stem), sorted by ticker.
std::vector<PriceSeries> read_price_dir(const std::filesystem::path& dir);

class SectorMap {
 public:
  SectorMap() = default;
  explicit SectorMap(std::map<std::string, std::string> sector_of);

  static SectorMap read_csv(const std::filesystem::path& file);

  bool contains(const std::string& ticker) const { return sector_of_.count(ticker) != 0; }
  const std::string& sector(const std::string& ticker) const;
  /// Contiguous class index; sector labels are ordered lexicographically.
  std::size_t class_of(const std::string& ticker) const;
  const std::vector<std::string>& labels() const noexcept { return labels_; }
  std::size_t count() const noexcept { return labels_.size(); }
  const std::map<std::string, std::string>& entries() const noexcept { return sector_of_; }

 private:
  std::map<std::string, std::string> sector_of_;
  std::vector<std::string> labels_;
};

/// Trailing mean; positions before the first full window are empty.
std::vector<std::optional<double>> moving_average(std::span<const double> series, std::size_t window);

/// (p_next - p_t) / p_t.
double compute_return(double p_t, double p_next);

struct ColumnStats {
  double min = 0.0;
  double max = 0.0;
  bool degenerate() const noexcept { return max == min; }
};

/// Per-column (min, max) over row-major `rows` with `columns` entries each.
std::vector<ColumnStats> fit_normalizer(std::span<const double> rows, std::size_t columns);

/// (x - min) / (max - min), unclamped; degenerate columns map to 0.
double apply_normalizer(double x, const ColumnStats& stats);

enum class Split : std::uint8_t { Train = 0, Valid = 1, Test = 2 };
const char* split_name(Split s);

/// Inclusive ISO date range.
struct DateRange {
  std::string first;
  std::string last;
  bool contains(const std::string& date) const { return date >= first && date <= last; }
};

struct DatasetConfig {
  std::size_t lookback = 16;
  DateRange train, valid, test;
  /// Permits look-back lengths other than 16 and 32.
  bool allow_any_lookback = false;

  void validate() const;
  const DateRange& range(Split s) const;
};

struct Sample {
  std::uint32_t stock = 0;
  std::uint32_t day = 0;  // index into the aligned calendar; the window ends here
  float label = 0.0f;     // next-day return ratio
  Split split = Split::Train;
};

/// One trading day's samples, one per stock, ordered by stock index.
struct DayBatch {
  std::uint32_t day = 0;
  std::vector<std::size_t> samples;
};

/// Normalized look-back windows with labels. Immutable once built.
struct FeatureTensor {
  DatasetConfig config;
  std::vector<std::string> tickers;  // sorted; index = stock id
  std::vector<std::uint32_t> sector_of_stock;
  std::vector<std::string> sector_labels;
  std::vector<std::string> dates;  // aligned calendar
  std::size_t days_dropped = 0;
  std::vector<ColumnStats> normalizer;
  std::size_t feature_count = kFeatureCount;
  std::size_t close_column = kClose;
  std::vector<float> windows;  // samples x lookback x feature_count
  std::vector<Sample> samples;
  std::uint64_t content_hash = 0;

  std::size_t lookback() const noexcept { return config.lookback; }
  std::size_t stocks() const noexcept { return tickers.size(); }
  std::size_t sectors() const noexcept { return sector_labels.size(); }
  std::size_t window_size() const noexcept { return config.lookback * feature_count; }

  std::span<const float> window(std::size_t sample) const {
    return {windows.data() + sample * window_size(), window_size()};
  }
  std::vector<std::size_t> indices(Split s) const;
  std::vector<DayBatch> day_batches(Split s) const;
  std::size_t count(Split s) const;
};

/// Builds one sample per (stock, trading day) whose full window, moving
/// averages, and next-day label all exist inside a single split.
FeatureTensor build_windows(std::vector<PriceSeries> universe, const DatasetConfig& cfg, const SectorMap& sectors);

/// Content hash over parsed series and sector assignments; independent of input order.
std::uint64_t content_hash(const std::vector<PriceSeries>& universe, const SectorMap& sectors);

/// key = value manifest text.
std::string manifest_text(const FeatureTensor& ft);

void save_dataset(const FeatureTensor& ft, const std::filesystem::path& file);
FeatureTensor load_dataset(const std::filesystem::path& file);

/// Raw per-day feature rows (kFeatureCount columns) for one series; rows
/// before the longest moving average is defined carry NaN in the MA columns.
std::vector<double> raw_feature_rows(const PriceSeries& s);

/// Restricts every series to the dates all of them share.
std::vector<PriceSeries> align_calendars(std::vector<PriceSeries> universe, std::size_t* dropped = nullptr);

}  // namespace sspt::data
