#include "stmgt/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <unordered_map>

#include "stmgt/csv.hpp"
#include "stmgt/error.hpp"

namespace stmgt {

namespace {

using namespace std::chrono;

bool parse_int(std::string_view s, int& out) {
  if (s.empty()) return false;
  for (char c : s)
    if (c < '0' || c > '9') return false;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc() && p == s.data() + s.size();
}

std::optional<sys_days> parse_ymd(std::string_view s) {
  if (s.size() != 10 || s[4] != '-' || s[7] != '-') return std::nullopt;
  int y = 0, m = 0, d = 0;
  if (!parse_int(s.substr(0, 4), y) || !parse_int(s.substr(5, 2), m) || !parse_int(s.substr(8, 2), d))
    return std::nullopt;
  year_month_day ymd{year{y}, month{static_cast<unsigned>(m)}, day{static_cast<unsigned>(d)}};
  if (!ymd.ok()) return std::nullopt;
  return sys_days{ymd};
}

std::int64_t days_since_epoch(sys_days d) { return d.time_since_epoch().count(); }

}  // namespace

std::optional<std::int64_t> parse_timestamp_minutes(const std::string& text) {
  std::string_view s = text;
  if (!s.empty() && (s.back() == 'Z' || s.back() == 'z')) s.remove_suffix(1);
  if (s.size() < 16) return std::nullopt;
  auto date = parse_ymd(s.substr(0, 10));
  if (!date || (s[10] != 'T' && s[10] != ' ') || s[13] != ':') return std::nullopt;
  int hh = 0, mm = 0, ss = 0;
  if (!parse_int(s.substr(11, 2), hh) || !parse_int(s.substr(14, 2), mm)) return std::nullopt;
  if (s.size() > 16) {
    if (s.size() != 19 || s[16] != ':' || !parse_int(s.substr(17, 2), ss)) return std::nullopt;
  }
  if (hh > 23 || mm > 59 || ss > 60) return std::nullopt;
  return days_since_epoch(*date) * 1440 + hh * 60 + mm;
}

Hour parse_hour(const std::string& text) {
  auto m = parse_timestamp_minutes(text);
  if (!m) {
    // Bare dates are accepted as midnight.
    auto d = parse_ymd(text);
    if (!d) throw ConfigError("malformed timestamp '" + text + "'");
    return days_since_epoch(*d) * 24;
  }
  return *m >= 0 ? *m / 60 : -((-*m + 59) / 60);
}

std::optional<sys_days> parse_date(const std::string& text) { return parse_ymd(text); }

sys_days day_of(Hour h) {
  const Hour d = h >= 0 ? h / 24 : -((-h + 23) / 24);
  return sys_days{days{d}};
}

int hour_of_day(Hour h) { return static_cast<int>(((h % 24) + 24) % 24); }

bool is_weekend(Hour h) {
  const weekday wd{day_of(h)};
  return wd == Saturday || wd == Sunday;
}

std::string format_date(sys_days d) {
  const year_month_day ymd{d};
  char buf[16];
  std::snprintf(buf, sizeof buf, "%04d-%02u-%02u", static_cast<int>(ymd.year()), static_cast<unsigned>(ymd.month()),
                static_cast<unsigned>(ymd.day()));
  return buf;
}

std::string format_hour(Hour h) {
  char buf[8];
  std::snprintf(buf, sizeof buf, "T%02d:00", hour_of_day(h));
  return format_date(day_of(h)) + buf + ":00";
}

std::vector<TripRecord> read_trips(const std::string& path) {
  const auto table = csv::read(path);
  const auto zc = table.column("zone_id");
  const auto tc = table.column("timestamp");
  std::vector<TripRecord> out;
  out.reserve(table.rows.size());
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    const auto& row = table.rows[r];
    auto minutes = parse_timestamp_minutes(row[tc]);
    if (!minutes)
      throw IngestionError(table.source + ":" + std::to_string(table.line_numbers[r]) + ": malformed timestamp '" +
                           row[tc] + "'");
    if (row[zc].empty())
      throw IngestionError(table.source + ":" + std::to_string(table.line_numbers[r]) + ": empty zone_id");
    out.push_back({row[zc], *minutes});
  }
  return out;
}

DemandMatrix DemandMatrix::slice(std::size_t begin, std::size_t end) const {
  if (begin > end || end > hours)
    throw ContractError("slice [" + std::to_string(begin) + ", " + std::to_string(end) + ") outside " +
                        std::to_string(hours) + " hours");
  DemandMatrix out{zone_ids, hour_at(begin), end - begin, {}};
  out.values.resize(n_zones() * out.hours);
  for (std::size_t i = 0; i < n_zones(); ++i)
    std::copy(values.begin() + i * hours + begin, values.begin() + i * hours + end,
              out.values.begin() + i * out.hours);
  return out;
}

double DemandMatrix::total() const {
  double s = 0.0;
  for (double v : values) s += v;
  return s;
}

BinnedDemand bin_trips(const std::vector<TripRecord>& records, const std::vector<std::string>& zones, Hour start,
                       Hour end) {
  if (start >= end) throw ConfigError("bin_trips: empty time range");
  std::unordered_map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < zones.size(); ++i) index.emplace(zones[i], i);
  BinnedDemand out;
  auto& dm = out.matrix;
  dm.zone_ids = zones;
  dm.start = start;
  dm.hours = static_cast<std::size_t>(end - start);
  dm.values.assign(zones.size() * dm.hours, 0.0);
  for (const auto& rec : records) {
    const auto it = index.find(rec.zone_id);
    if (it == index.end()) {
      ++out.summary.unknown_zone;
      ++out.summary.unknown_zone_ids[rec.zone_id];
      continue;
    }
    const Hour h = rec.minutes >= 0 ? rec.minutes / 60 : -((-rec.minutes + 59) / 60);
    if (h < start || h >= end) {
      ++out.summary.out_of_range;
      continue;
    }
    ++out.summary.in_range;
    dm.at(it->second, static_cast<std::size_t>(h - start)) += 1.0;
  }
  return out;
}

DemandSplits split_by_dates(const DemandMatrix& dm, Hour train_end, Hour val_end) {
  if (train_end > val_end) throw ConfigError("split boundaries out of order: train_end after val_end");
  const Hour first = dm.start, last = dm.start + static_cast<Hour>(dm.hours);
  if (train_end < first || val_end > last)
    throw ConfigError("split boundaries outside the demand range " + format_hour(first) + " .. " + format_hour(last));
  const auto a = static_cast<std::size_t>(train_end - first);
  const auto b = static_cast<std::size_t>(val_end - first);
  DemandSplits out{dm.slice(0, a), dm.slice(a, b), dm.slice(b, dm.hours), {}};
  if (out.train.hours == 0) out.warnings.push_back("train split is empty");
  if (out.val.hours == 0) out.warnings.push_back("validation split is empty");
  if (out.test.hours == 0) out.warnings.push_back("test split is empty");
  return out;
}

DemandStats compute_demand_stats(const DemandMatrix& train) {
  if (train.hours == 0) throw ContractError("demand statistics need a non-empty training split");
  DemandStats s;
  for (std::size_t i = 0; i < train.n_zones(); ++i) {
    double mean = 0.0;
    for (std::size_t t = 0; t < train.hours; ++t) mean += train.at(i, t);
    mean /= static_cast<double>(train.hours);
    double var = 0.0;
    for (std::size_t t = 0; t < train.hours; ++t) var += (train.at(i, t) - mean) * (train.at(i, t) - mean);
    const double sd = std::sqrt(var / static_cast<double>(train.hours));
    s.mean.push_back(mean);
    s.std.push_back(sd > 0.0 ? sd : 1.0);
  }
  return s;
}

namespace {

void require_stats(const DemandStats& stats, std::size_t n) {
  if (stats.mean.size() != n || stats.std.size() != n)
    throw DimensionError("normalisation stats cover " + std::to_string(stats.mean.size()) + " zones, data has " +
                         std::to_string(n));
}

}  // namespace

DemandMatrix normalize_demand(const DemandMatrix& dm, const DemandStats& stats) {
  require_stats(stats, dm.n_zones());
  DemandMatrix out = dm;
  for (std::size_t i = 0; i < dm.n_zones(); ++i)
    for (std::size_t t = 0; t < dm.hours; ++t) out.at(i, t) = (dm.at(i, t) - stats.mean[i]) / stats.std[i];
  return out;
}

std::vector<double> denormalize_predictions(const std::vector<double>& y, std::size_t horizon,
                                            const DemandStats& stats) {
  if (horizon == 0 || y.size() % horizon != 0) throw DimensionError("prediction length not a multiple of horizon");
  require_stats(stats, y.size() / horizon);
  std::vector<double> out(y.size());
  for (std::size_t k = 0; k < y.size(); ++k) out[k] = y[k] * stats.std[k / horizon] + stats.mean[k / horizon];
  return out;
}

std::vector<double> normalize_predictions(const std::vector<double>& y, std::size_t horizon,
                                          const DemandStats& stats) {
  if (horizon == 0 || y.size() % horizon != 0) throw DimensionError("prediction length not a multiple of horizon");
  require_stats(stats, y.size() / horizon);
  std::vector<double> out(y.size());
  for (std::size_t k = 0; k < y.size(); ++k) out[k] = (y[k] - stats.mean[k / horizon]) / stats.std[k / horizon];
  return out;
}

std::vector<DailyWeather> read_weather(const std::string& path) {
  const auto table = csv::read(path);
  const auto dc = table.column("date");
  std::vector<std::size_t> cols;
  for (const auto& name : kWeatherColumns) cols.push_back(table.column(name));
  std::vector<DailyWeather> out;
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    auto d = parse_ymd(table.rows[r][dc]);
    if (!d)
      throw IngestionError(table.source + ":" + std::to_string(table.line_numbers[r]) + ": malformed date '" +
                           table.rows[r][dc] + "'");
    DailyWeather w{*d, {}};
    for (auto c : cols) w.values.push_back(csv::to_double(table.rows[r][c], table, r));
    out.push_back(std::move(w));
  }
  return out;
}

std::vector<double> WeatherMatrix::destandardize() const {
  std::vector<double> out(standardized.size());
  for (std::size_t t = 0; t < hours; ++t)
    for (std::size_t f = 0; f < features; ++f) out[t * features + f] = std_at(t, f) * std[f] + mean[f];
  return out;
}

WeatherMatrix join_weather(const std::vector<DailyWeather>& daily, const DemandMatrix& dm, std::size_t train_hours) {
  std::map<std::int64_t, const DailyWeather*> by_day;
  std::size_t features = daily.empty() ? kWeatherColumns.size() : daily.front().values.size();
  for (const auto& d : daily) {
    if (d.values.size() != features) throw DimensionError("weather rows have inconsistent feature counts");
    by_day[days_since_epoch(d.date)] = &d;
  }
  WeatherMatrix w;
  w.start = dm.start;
  w.hours = dm.hours;
  w.features = features;
  w.raw.resize(w.hours * features);
  for (std::size_t t = 0; t < dm.hours; ++t) {
    const auto day = day_of(dm.hour_at(t));
    const auto it = by_day.find(days_since_epoch(day));
    if (it == by_day.end()) throw IngestionError("no weather record for date " + format_date(day));
    std::copy(it->second->values.begin(), it->second->values.end(), w.raw.begin() + t * features);
  }
  const std::size_t rows = std::min(train_hours, w.hours);
  w.mean.assign(features, 0.0);
  w.std.assign(features, 1.0);
  if (rows > 0) {
    for (std::size_t f = 0; f < features; ++f) {
      double mean = 0.0;
      for (std::size_t t = 0; t < rows; ++t) mean += w.raw_at(t, f);
      mean /= static_cast<double>(rows);
      double var = 0.0;
      for (std::size_t t = 0; t < rows; ++t) var += (w.raw_at(t, f) - mean) * (w.raw_at(t, f) - mean);
      const double sd = std::sqrt(var / static_cast<double>(rows));
      w.mean[f] = mean;
      w.std[f] = sd > 0.0 ? sd : 1.0;
    }
  }
  w.standardized.resize(w.raw.size());
  for (std::size_t t = 0; t < w.hours; ++t)
    for (std::size_t f = 0; f < features; ++f) w.standardized[t * features + f] = (w.raw_at(t, f) - w.mean[f]) / w.std[f];
  return w;
}

const char* split_name(SplitTag tag) {
  switch (tag) {
    case SplitTag::Train: return "train";
    case SplitTag::Val: return "val";
    case SplitTag::Test: return "test";
  }
  return "?";
}

WindowedDataset make_windows(const DemandMatrix& split, std::size_t input_len, std::size_t horizon,
                             const DemandStats* stats, const WeatherMatrix* weather, SplitTag tag) {
  if (input_len == 0 || horizon == 0) throw ConfigError("window lengths must be positive");
  const std::size_t need = input_len + horizon;
  if (split.hours < need)
    throw ContractError(std::string(split_name(tag)) + " split has " + std::to_string(split.hours) +
                        " hours; windows need at least " + std::to_string(need) + " (input_len + horizon)");
  std::size_t w_offset = 0;
  if (weather) {
    if (split.start < weather->start || split.start + static_cast<Hour>(split.hours) >
                                            weather->start + static_cast<Hour>(weather->hours))
      throw ContractError("weather does not cover the " + std::string(split_name(tag)) + " split");
    w_offset = static_cast<std::size_t>(split.start - weather->start);
  }
  if (stats) require_stats(*stats, split.n_zones());
  const std::size_t n = split.n_zones();
  WindowedDataset ds;
  ds.n_nodes = n;
  ds.input_len = input_len;
  ds.horizon = horizon;
  ds.weather_features = weather ? weather->features : 0;
  ds.tag = tag;
  for (std::size_t t = input_len - 1; t + horizon < split.hours; ++t) {
    Sample s;
    s.anchor = split.hour_at(t);
    s.anchor_index = t;
    s.input.resize(n * input_len);
    s.target.resize(n * horizon);
    s.raw_target.resize(n * horizon);
    for (std::size_t i = 0; i < n; ++i) {
      const double mu = stats ? stats->mean[i] : 0.0;
      const double sd = stats ? stats->std[i] : 1.0;
      for (std::size_t j = 0; j < input_len; ++j)
        s.input[i * input_len + j] = (split.at(i, t + 1 - input_len + j) - mu) / sd;
      for (std::size_t m = 0; m < horizon; ++m) {
        const double y = split.at(i, t + 1 + m);
        s.raw_target[i * horizon + m] = y;
        s.target[i * horizon + m] = (y - mu) / sd;
      }
    }
    if (weather) {
      const std::size_t f = weather->features;
      const std::size_t first = w_offset + t + 1 - input_len;
      s.weather.assign(weather->standardized.begin() + first * f,
                       weather->standardized.begin() + (first + input_len) * f);
    }
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

Batch make_batch(const WindowedDataset& ds, const std::vector<std::size_t>& indices) {
  if (indices.empty()) throw ContractError("make_batch: no samples selected");
  const std::size_t n = ds.n_nodes, b = indices.size(), t = ds.input_len, m = ds.horizon;
  const std::size_t f = ds.weather_features;
  std::vector<double> x(n * b * t), y(n * b * m), w(b * t * f);
  for (std::size_t k = 0; k < b; ++k) {
    const auto& s = ds.samples.at(indices[k]);
    for (std::size_t i = 0; i < n; ++i) {
      std::copy_n(s.input.begin() + i * t, t, x.begin() + (i * b + k) * t);
      std::copy_n(s.target.begin() + i * m, m, y.begin() + (i * b + k) * m);
    }
    if (f) std::copy_n(s.weather.begin(), t * f, w.begin() + k * t * f);
  }
  Batch out{Tensor({n, b, t}, std::move(x)), Tensor(), Tensor({n, b, m}, std::move(y))};
  if (f) out.weather = Tensor({b, t, f}, std::move(w));
  return out;
}

std::string demand_matrix_csv(const DemandMatrix& dm) {
  std::ostringstream os;
  os << "zone_id";
  for (std::size_t t = 0; t < dm.hours; ++t) os << ',' << format_hour(dm.hour_at(t));
  os << '\n';
  for (std::size_t i = 0; i < dm.n_zones(); ++i) {
    os << dm.zone_ids[i];
    for (std::size_t t = 0; t < dm.hours; ++t) os << ',' << csv::format_double(dm.at(i, t));
    os << '\n';
  }
  return os.str();
}

}  // namespace stmgt
