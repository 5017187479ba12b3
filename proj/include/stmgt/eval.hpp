#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "stmgt/data.hpp"
#include "stmgt/graphs.hpp"
#include "stmgt/model.hpp"
#include "stmgt/training.hpp"

namespace stmgt {

// ---- metrics ----

struct MetricReport {
  double mae = 0.0;
  double rmse = 0.0;
  std::optional<double> mape10;  // undefined when no truth value reaches 10
  double smape = 0.0;
  std::size_t count = 0;
  std::size_t mape10_count = 0;
};

inline constexpr double kMapeFloor = 10.0;

MetricReport metrics(std::span<const double> pred, std::span<const double> truth);

struct HourRow {
  int hour = 0;
  std::size_t count = 0;  // 0 marks an absent bucket
  double mae = 0.0, rmse = 0.0, mean_demand = 0.0;
};

/// 24 rows, one per hour of day of `timestamps`.
std::vector<HourRow> per_hour_errors(std::span<const double> pred, std::span<const double> truth,
                                     std::span<const Hour> timestamps);

/// `label,mae,rmse,mape10,smape,count,mape10_count`; undefined MAPE10 is `NA`.
std::string metrics_csv(const std::vector<std::pair<std::string, MetricReport>>& rows);
/// `hour,mae,rmse,mean_demand,count`; absent buckets leave the three
/// statistics empty.
std::string per_hour_csv(const std::vector<HourRow>& rows);

// ---- flattened views of a windowed dataset ----
// Index (s * N + i) * M + m addresses sample s, zone i, horizon step m.

std::vector<double> flat_truth(const WindowedDataset& ds);
std::vector<Hour> flat_timestamps(const WindowedDataset& ds);
std::vector<double> denormalize_flat(std::span<const double> pred, std::size_t n_nodes, std::size_t horizon,
                                     const DemandStats& stats);

// ---- historical average ----

/// Mean demand per (zone, hour of day, weekday/weekend) over a training
/// matrix. A (zone, hour, day type) never observed falls back to the
/// zone's (zone, hour) mean, then to the zone mean.
class HistoricalAverage {
 public:
  explicit HistoricalAverage(const DemandMatrix& train);
  double predict(std::size_t zone, Hour hour) const;
  /// Number of group means that had to fall back.
  std::size_t fallback_groups() const { return fallbacks_; }
  const std::vector<std::string>& zone_ids() const { return zone_ids_; }

 private:
  std::vector<std::string> zone_ids_;
  std::vector<double> table_;  // zone x 24 x 2
  std::size_t fallbacks_ = 0;
};

std::vector<double> ha_predictions(const HistoricalAverage& ha, const WindowedDataset& ds);

// ---- experiments ----

/// Everything one train/evaluate run needs, with the demand rows in the
/// relation set's zone order.
struct ExperimentData {
  RelationSet relations;
  DemandMatrix demand;  // full range
  DemandSplits splits;
  DemandStats stats;
  std::optional<WeatherMatrix> weather;
  WindowedDataset train, val, test;
};

/// Boundaries at 70% and 80% of the range.
std::pair<Hour, Hour> default_boundaries(const DemandMatrix& dm);

/// Aligns demand rows to relation zone order (ContractError naming the
/// offending ids when the zone sets differ), splits, normalises, joins
/// weather and windows each split.
ExperimentData prepare_experiment(const DemandMatrix& demand, RelationSet relations,
                                  const std::vector<DailyWeather>* weather, std::pair<Hour, Hour> boundaries,
                                  std::size_t input_len, std::size_t horizon);

/// The relations of `all` listed in `config` (canonical order).
RelationSet select_relations(const RelationSet& all, const ModelConfig& config);

/// Denormalised predictions (flat layout) for every sample of `ds`.
std::vector<double> model_predictions(StmgtModel& model, const WindowedDataset& ds, const DemandStats& stats,
                                      std::size_t batch_size = 36);

MetricReport evaluate_model(StmgtModel& model, const WindowedDataset& ds, const DemandStats& stats,
                            std::size_t batch_size = 36);

struct ExperimentResult {
  ModelConfig config;
  ModelParams params;
  TrainHistory history;
  MetricReport test;
  double seconds = 0.0;
};

ExperimentResult run_experiment(const ExperimentData& data, const ModelConfig& config, const TrainConfig& train,
                                const std::function<void(const EpochRecord&)>& on_epoch = {});

// ---- ablation ----

/// Components that can be removed: each configured relation, plus
/// `weather` when the weather path is live.
std::vector<std::string> ablation_components(const ModelConfig& config);

/// Config with one component removed. ConfigError when absent or when it
/// is the last relation.
ModelConfig ablated_config(const ModelConfig& config, const std::string& component);

struct AblationRow {
  std::string component;  // "none" for the full model
  MetricReport test;
};

struct AblationPair {
  ExperimentResult base, ablated;
};

/// Trains the full model and the model without `component` from the same
/// seed.
AblationPair ablate(const ExperimentData& data, const ModelConfig& config, const TrainConfig& train,
                    const std::string& component);

/// One row for the full model then one per component.
std::vector<AblationRow> ablation_study(const ExperimentData& data, const ModelConfig& config,
                                        const TrainConfig& train, const std::vector<std::string>& components,
                                        const std::function<void(const std::string&)>& on_component = {});

std::string ablation_csv(const std::vector<AblationRow>& rows);

// ---- permutation importance ----

struct ImportanceOptions {
  std::size_t repetitions = 5;
  std::uint64_t seed = 42;
  bool force_identity = false;
  std::size_t batch_size = 36;
};

struct ImportanceRow {
  std::string group;
  double baseline_rmse = 0.0;
  double permuted_rmse = 0.0;  // mean over repetitions
  double importance = 0.0;     // permuted_rmse - baseline_rmse
  std::size_t repetitions = 0;
  std::vector<double> per_repetition;  // permuted rmse of each repetition
};

/// Groups: relation names, `weather` (whole weather windows shuffled
/// across samples) and `weather:<column>` (one weather column shuffled).
std::vector<std::string> importance_groups(const ModelConfig& config, bool per_weather_column = false);

ImportanceRow permutation_importance(StmgtModel& model, const WindowedDataset& test, const DemandStats& stats,
                                     const std::string& group, const ImportanceOptions& options);

std::string importance_csv(const std::vector<ImportanceRow>& rows);

}  // namespace stmgt
