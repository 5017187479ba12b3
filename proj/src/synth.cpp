#include "stmgt/synth.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

#include "stmgt/csv.hpp"
#include "stmgt/error.hpp"
#include "stmgt/random.hpp"

namespace stmgt {

namespace {

double poisson(double lambda, std::mt19937_64& rng) {
  if (lambda <= 0.0) return 0.0;
  if (lambda > 400.0) return std::max(0.0, std::round(lambda + std::sqrt(lambda) * standard_normal(rng)));
  const double limit = std::exp(-lambda);
  double p = 1.0;
  double k = -1.0;
  do {
    ++k;
    p *= uniform01(rng);
  } while (p > limit);
  return k;
}

ZoneFeatureTable clustered_features(const std::vector<std::string>& ids, const std::vector<std::size_t>& cluster,
                                    std::size_t n_clusters, std::size_t dim, double noise, std::mt19937_64& rng) {
  std::vector<double> protos(n_clusters * dim);
  for (auto& v : protos) v = standard_normal(rng);
  ZoneFeatureTable t{ids, dim, std::vector<double>(ids.size() * dim)};
  for (std::size_t i = 0; i < ids.size(); ++i)
    for (std::size_t f = 0; f < dim; ++f)
      t.values[i * dim + f] = protos[cluster[i] * dim + f] + noise * standard_normal(rng);
  return t;
}

std::string features_csv(const ZoneFeatureTable& t, const std::string& prefix) {
  std::ostringstream os;
  os << "zone_id";
  for (std::size_t f = 0; f < t.n_features; ++f) os << ',' << prefix << f;
  os << '\n';
  for (std::size_t i = 0; i < t.n_zones(); ++i) {
    os << t.zone_ids[i];
    for (double v : t.row(i)) os << ',' << csv::format_double(v);
    os << '\n';
  }
  return os.str();
}

}  // namespace

SynthCity generate_city(const SynthConfig& c) {
  if (c.n_zones < 2 || c.grid_cols == 0 || c.hours < 48) throw ConfigError("synthetic city too small");
  const auto start_day = parse_date(c.start_date);
  if (!start_day) throw ConfigError("bad synthetic start date '" + c.start_date + "'");
  std::mt19937_64 rng(derive_seed(c.seed, "synth"));
  const std::size_t n = c.n_zones;

  SynthCity city;
  for (std::size_t i = 0; i < n; ++i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "z%02zu", i);
    city.zone_ids.emplace_back(buf);
  }
  for (std::size_t i = 0; i < n; ++i) {
    if ((i + 1) % c.grid_cols != 0 && i + 1 < n) city.edges.emplace_back(city.zone_ids[i], city.zone_ids[i + 1]);
    if (i + c.grid_cols < n) city.edges.emplace_back(city.zone_ids[i], city.zone_ids[i + c.grid_cols]);
  }

  // Land-use cluster drives both POI similarity and the demand profile.
  std::vector<std::size_t> land(n), demo(n), transit(n);
  for (std::size_t i = 0; i < n; ++i) {
    land[i] = static_cast<std::size_t>(uniform01(rng) * 3.0);
    demo[i] = static_cast<std::size_t>(uniform01(rng) * 2.0);
    transit[i] = static_cast<std::size_t>(uniform01(rng) * 4.0);
  }
  city.functional = clustered_features(city.zone_ids, land, 3, c.feature_dim, 0.25, rng);
  city.demographic = clustered_features(city.zone_ids, demo, 2, c.feature_dim, 0.25, rng);
  city.transport = clustered_features(city.zone_ids, transit, 4, c.feature_dim, 0.25, rng);

  std::vector<double> base(n);
  for (auto& b : base) b = c.base_min + (c.base_max - c.base_min) * uniform01(rng);
  std::vector<double> phase(3), phase2(3), weekend(3);
  for (std::size_t k = 0; k < 3; ++k) {
    phase[k] = 2.0 * std::numbers::pi * (0.5 + 0.2 * static_cast<double>(k) + 0.05 * standard_normal(rng));
    phase2[k] = 2.0 * std::numbers::pi * uniform01(rng);
    weekend[k] = c.weekend_effect * (static_cast<double>(k) - 0.5) * 2.0;
  }

  const std::size_t days = (c.hours + 23) / 24;
  double temp_anom = 0.0;
  for (std::size_t d = 0; d < days; ++d) {
    const bool wet = uniform01(rng) < 0.3;
    const double rain = wet ? -0.4 * std::log(1.0 - uniform01(rng)) : 0.0;
    temp_anom = 0.7 * temp_anom + 7.0 * standard_normal(rng);
    const double wind = std::abs(4.0 + 1.5 * standard_normal(rng));
    city.weather.push_back({*start_day + std::chrono::days{static_cast<long>(d)}, {rain, 60.0 + temp_anom, wind}});
  }

  const auto adj = normalize(build_adjacency_graph(city.edges, city.zone_ids));
  std::vector<double> latent(n, 0.0), next(n), prior(n);
  const Hour start = static_cast<Hour>(start_day->time_since_epoch().count()) * 24;
  city.demand = {city.zone_ids, start, c.hours, std::vector<double>(n * c.hours)};
  city.expected.resize(n * c.hours);
  city.predictable.resize(n * c.hours);
  for (std::size_t t = 0; t < c.hours; ++t) {
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += adj.at(i, j) * latent[j];
      prior[i] = c.latent_rho * ((1.0 - c.latent_diffusion) * latent[i] + c.latent_diffusion * s);
      next[i] = prior[i] + c.latent_sigma * standard_normal(rng);
    }
    latent.swap(next);
    const Hour h = start + static_cast<Hour>(t);
    const double hod = 2.0 * std::numbers::pi * hour_of_day(h) / 24.0;
    const auto& w = city.weather[t / 24].values;
    const double weather_term = c.rain_effect * std::min(w[0], 1.0) + c.temp_effect * (w[1] - 60.0);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t k = land[i];
      const double profile = 1.0 + c.daily_amplitude * std::cos(hod - phase[k]);
      const double cycle = base[i] * (profile + 0.35 * c.daily_amplitude * std::cos(2.0 * hod - phase2[k]) +
                                      (is_weekend(h) ? weekend[k] : 0.0));
      double busy = profile;
      if (c.weather_peak_width > 0.0) {
        const double from_peak = std::remainder(hod - phase[k], 2.0 * std::numbers::pi) * 24.0 / (2.0 * std::numbers::pi);
        busy = c.weather_peak_gain * std::exp(-0.5 * from_peak * from_peak / (c.weather_peak_width * c.weather_peak_width));
      }
      const double rate = std::max(c.min_rate, cycle + latent[i] + busy * weather_term);
      city.expected[i * c.hours + t] = rate;
      city.predictable[i * c.hours + t] = std::max(c.min_rate, cycle + prior[i] + busy * weather_term);
      city.demand.values[i * c.hours + t] = poisson(rate, rng);
    }
  }
  return city;
}

RelationSet city_relations(const SynthCity& city, double threshold) {
  return fuse({build_adjacency_graph(city.edges, city.zone_ids),
               build_similarity_graph(city.functional, threshold, Relation::Functional),
               build_similarity_graph(city.demographic, threshold, Relation::Demographic),
               build_similarity_graph(city.transport, threshold, Relation::TransportSupply)},
              threshold);
}

void write_city(const SynthCity& city, const std::string& dir, bool with_trips) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const fs::path d(dir);
  csv::write_text((d / "demand.csv").string(), demand_matrix_csv(city.demand));
  std::ostringstream w;
  w << "date";
  for (const auto& c : kWeatherColumns) w << ',' << c;
  w << '\n';
  for (const auto& row : city.weather) {
    w << format_date(row.date);
    for (double v : row.values) w << ',' << csv::format_double(v);
    w << '\n';
  }
  csv::write_text((d / "weather.csv").string(), w.str());
  std::ostringstream e;
  e << "zone_a,zone_b\n";
  for (const auto& [a, b] : city.edges) e << a << ',' << b << '\n';
  csv::write_text((d / "edges.csv").string(), e.str());
  csv::write_text((d / "poi.csv").string(), features_csv(city.functional, "poi"));
  csv::write_text((d / "demographic.csv").string(), features_csv(city.demographic, "demo"));
  csv::write_text((d / "transport.csv").string(), features_csv(city.transport, "transit"));
  if (!with_trips) return;
  std::ofstream trips(d / "trips.csv");
  if (!trips) throw IngestionError("cannot write " + (d / "trips.csv").string());
  trips << "zone_id,timestamp\n";
  const auto& dm = city.demand;
  for (std::size_t t = 0; t < dm.hours; ++t) {
    const std::string stamp = format_hour(dm.hour_at(t)).substr(0, 14);
    for (std::size_t i = 0; i < dm.n_zones(); ++i) {
      const auto count = static_cast<std::size_t>(dm.at(i, t));
      for (std::size_t k = 0; k < count; ++k) {
        char mm[8];
        std::snprintf(mm, sizeof mm, "%02zu:00", (k * 7) % 60);
        trips << dm.zone_ids[i] << ',' << stamp << mm << '\n';
      }
    }
  }
}

DemandMatrix read_demand_matrix(const std::string& path) {
  const auto table = csv::read(path);
  if (table.header.size() < 2 || table.header[0] != "zone_id")
    throw IngestionError(path + ": demand matrix needs `zone_id` plus hour columns");
  DemandMatrix dm;
  dm.hours = table.header.size() - 1;
  for (std::size_t t = 0; t < dm.hours; ++t) {
    const auto m = parse_timestamp_minutes(table.header[t + 1]);
    if (!m) throw IngestionError(path + ": malformed hour column '" + table.header[t + 1] + "'");
    const Hour h = *m / 60;
    if (t == 0)
      dm.start = h;
    else if (h != dm.start + static_cast<Hour>(t))
      throw IngestionError(path + ": hour columns are not consecutive at '" + table.header[t + 1] + "'");
  }
  for (std::size_t r = 0; r < table.rows.size(); ++r) {
    dm.zone_ids.push_back(table.rows[r][0]);
    for (std::size_t t = 0; t < dm.hours; ++t) {
      const double v = csv::to_double(table.rows[r][t + 1], table, r);
      if (v < 0.0)
        throw IngestionError(path + ":" + std::to_string(table.line_numbers[r]) + ": negative demand");
      dm.values.push_back(v);
    }
  }
  return dm;
}

}  // namespace stmgt
