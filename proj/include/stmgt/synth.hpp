#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "stmgt/data.hpp"
#include "stmgt/graphs.hpp"

namespace stmgt {

/// Seeded synthetic city: zones on a grid, clustered zone attributes, and
/// hourly Poisson demand whose rate is the sum of a zone level, daily and
/// weekly harmonics, a graph-diffused AR(1) field, and a weather term scaled
/// by the zone's daily activity profile. Wind speed is generated but has no
/// effect on demand.
struct SynthConfig {
  std::size_t n_zones = 20;
  std::size_t grid_cols = 5;
  std::size_t hours = 2000;
  std::string start_date = "2021-03-01";
  std::uint64_t seed = 7;
  double base_min = 10.0, base_max = 25.0;  // mean hourly trips per zone
  double daily_amplitude = 0.6;             // fraction of the zone level
  double weekend_effect = 0.25;             // fraction of the zone level
  double latent_rho = 0.98;                 // persistence of the diffused field
  double latent_diffusion = 0.3;            // share of each step taken from graph neighbours
  double latent_sigma = 2.0;                // trips per hour
  double rain_effect = -20.0;               // trips per hour per inch of rain (capped at 1 inch)
  double temp_effect = 1.0;                 // trips per hour per degree F away from 60
  double weather_peak_width = 4.0;          // hours; weather scales a bump at the cluster's peak hour, 0 scales the whole profile
  double weather_peak_gain = 4.0;
  double min_rate = 0.5;
  std::size_t feature_dim = 10;
};

struct SynthCity {
  std::vector<std::string> zone_ids;
  DemandMatrix demand;
  std::vector<double> expected;     // Poisson rates, same layout as demand.values
  std::vector<double> predictable;  // rates with the current step's field innovation removed
  std::vector<DailyWeather> weather;
  ZoneFeatureTable functional, demographic, transport;
  std::vector<std::pair<std::string, std::string>> edges;
};

SynthCity generate_city(const SynthConfig& config);

/// Graphs from the city's attributes and edges at `threshold`.
RelationSet city_relations(const SynthCity& city, double threshold = kDefaultSimilarityThreshold);

/// Writes demand.csv, weather.csv, edges.csv, poi.csv, demographic.csv,
/// transport.csv and, when `with_trips`, trips.csv (one row per trip).
void write_city(const SynthCity& city, const std::string& dir, bool with_trips);

/// Reads a DemandMatrix CSV as written by demand_matrix_csv.
DemandMatrix read_demand_matrix(const std::string& path);

}  // namespace stmgt
