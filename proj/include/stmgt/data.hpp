#pragma once

#include <chrono>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "stmgt/tensor.hpp"

namespace stmgt {

/// Whole hours since 1970-01-01T00:00 (wall clock, no timezone math).
using Hour = std::int64_t;

/// Parses `YYYY-MM-DD[T ]HH:MM[:SS][Z]`; returns minutes since the epoch or
/// nullopt when malformed.
std::optional<std::int64_t> parse_timestamp_minutes(const std::string& text);
/// Parses a timestamp truncated to its hour; ConfigError when malformed.
Hour parse_hour(const std::string& text);
/// `YYYY-MM-DD`; nullopt when malformed.
std::optional<std::chrono::sys_days> parse_date(const std::string& text);

std::string format_hour(Hour h);                  // YYYY-MM-DDTHH:00:00
std::string format_date(std::chrono::sys_days d);  // YYYY-MM-DD
int hour_of_day(Hour h);
bool is_weekend(Hour h);
std::chrono::sys_days day_of(Hour h);

struct TripRecord {
  std::string zone_id;
  std::int64_t minutes = 0;  // since the epoch
};

/// Reads `zone_id,timestamp`. Malformed timestamps raise IngestionError
/// with the line number.
std::vector<TripRecord> read_trips(const std::string& path);

/// Zones x hours grid of trip-origin counts.
struct DemandMatrix {
  std::vector<std::string> zone_ids;
  Hour start = 0;
  std::size_t hours = 0;
  std::vector<double> values;  // row-major N x hours

  std::size_t n_zones() const { return zone_ids.size(); }
  double at(std::size_t zone, std::size_t t) const { return values[zone * hours + t]; }
  double& at(std::size_t zone, std::size_t t) { return values[zone * hours + t]; }
  Hour hour_at(std::size_t t) const { return start + static_cast<Hour>(t); }
  /// Columns [begin, end) as a new matrix.
  DemandMatrix slice(std::size_t begin, std::size_t end) const;
  double total() const;
};

struct IngestionSummary {
  std::size_t in_range = 0;
  std::size_t out_of_range = 0;
  std::size_t unknown_zone = 0;
  std::map<std::string, std::size_t> unknown_zone_ids;
};

struct BinnedDemand {
  DemandMatrix matrix;
  IngestionSummary summary;
};

/// Counts records per (zone, hour) over [start, end). Unknown zones and
/// out-of-range records are tallied in the summary, not dropped silently.
BinnedDemand bin_trips(const std::vector<TripRecord>& records, const std::vector<std::string>& zones, Hour start,
                       Hour end);

struct DemandSplits {
  DemandMatrix train, val, test;
  std::vector<std::string> warnings;
};

/// Chronological partition: train = [start, train_end), val = [train_end,
/// val_end), test = [val_end, end). Empty parts are allowed with a warning.
DemandSplits split_by_dates(const DemandMatrix& dm, Hour train_end, Hour val_end);

/// Per-zone mean / standard deviation (population) from the training split.
/// A zero deviation is stored as 1.
struct DemandStats {
  std::vector<double> mean;
  std::vector<double> std;
};

DemandStats compute_demand_stats(const DemandMatrix& train);
DemandMatrix normalize_demand(const DemandMatrix& dm, const DemandStats& stats);
/// y is zone-major (N x M); returns y * std + mean per zone.
std::vector<double> denormalize_predictions(const std::vector<double>& y, std::size_t horizon,
                                            const DemandStats& stats);
std::vector<double> normalize_predictions(const std::vector<double>& y, std::size_t horizon,
                                          const DemandStats& stats);

struct DailyWeather {
  std::chrono::sys_days date;
  std::vector<double> values;  // precipitation_in, avg_temp_f, avg_wind_mps
};

inline const std::vector<std::string> kWeatherColumns{"precipitation_in", "avg_temp_f", "avg_wind_mps"};

/// Reads `date,precipitation_in,avg_temp_f,avg_wind_mps`.
std::vector<DailyWeather> read_weather(const std::string& path);

/// Hourly weather aligned to a demand time index.
struct WeatherMatrix {
  Hour start = 0;
  std::size_t hours = 0;
  std::size_t features = 0;
  std::vector<double> raw;           // hours x features
  std::vector<double> standardized;  // hours x features
  std::vector<double> mean, std;     // per feature, from the training rows

  double raw_at(std::size_t t, std::size_t f) const { return raw[t * features + f]; }
  double std_at(std::size_t t, std::size_t f) const { return standardized[t * features + f]; }
  Hour hour_at(std::size_t t) const { return start + static_cast<Hour>(t); }
  std::vector<double> destandardize() const;
};

/// Broadcasts each day's record to its 24 hourly steps over the demand
/// index. Standardisation statistics use only the first `train_hours` rows.
/// A demand date without weather raises IngestionError naming the date.
WeatherMatrix join_weather(const std::vector<DailyWeather>& daily, const DemandMatrix& dm, std::size_t train_hours);

enum class SplitTag { Train, Val, Test };
const char* split_name(SplitTag tag);

struct Sample {
  std::vector<double> input;       // N x T (normalised if stats were given)
  std::vector<double> target;      // N x M (normalised if stats were given)
  std::vector<double> raw_target;  // N x M counts
  std::vector<double> weather;     // T x M_w standardised, empty without weather
  Hour anchor = 0;                 // hour of the last input column
  std::size_t anchor_index = 0;    // column of the anchor inside the split
};

struct WindowedDataset {
  std::size_t n_nodes = 0, input_len = 0, horizon = 0, weather_features = 0;
  SplitTag tag = SplitTag::Train;
  std::vector<Sample> samples;

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }
};

/// Stride-1 windows: inputs t-T+1..t, targets t+1..t+M. ContractError when
/// the split is shorter than T + M.
WindowedDataset make_windows(const DemandMatrix& split, std::size_t input_len, std::size_t horizon,
                             const DemandStats* stats = nullptr, const WeatherMatrix* weather = nullptr,
                             SplitTag tag = SplitTag::Train);

/// Stacks samples (by index) into node-major model tensors.
struct Batch {
  Tensor inputs;   // N x B x T
  Tensor weather;  // B x T x M_w, undefined without weather
  Tensor targets;  // N x B x M
};

Batch make_batch(const WindowedDataset& ds, const std::vector<std::size_t>& indices);

/// DemandMatrix CSV: zone_id then one column per hour timestamp.
std::string demand_matrix_csv(const DemandMatrix& dm);

}  // namespace stmgt
