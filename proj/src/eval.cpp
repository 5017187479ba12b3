#include "stmgt/eval.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <set>
#include <sstream>

#include "stmgt/csv.hpp"
#include "stmgt/error.hpp"
#include "stmgt/random.hpp"

namespace stmgt {

MetricReport metrics(std::span<const double> pred, std::span<const double> truth) {
  if (pred.size() != truth.size())
    throw DimensionError("metrics: " + std::to_string(pred.size()) + " predictions vs " +
                         std::to_string(truth.size()) + " truth values");
  if (truth.empty()) throw ContractError("metrics: no samples");
  MetricReport r;
  r.count = truth.size();
  double abs_sum = 0.0, sq_sum = 0.0, smape_sum = 0.0, mape_sum = 0.0;
  for (std::size_t k = 0; k < truth.size(); ++k) {
    const double y = truth[k], e = pred[k] - y;
    if (!(y >= 0.0)) throw ContractError("metrics: negative ground truth at index " + std::to_string(k));
    abs_sum += std::abs(e);
    sq_sum += e * e;
    const double denom = std::abs(y) + std::abs(pred[k]);
    if (denom > 0.0) smape_sum += 2.0 * std::abs(e) / denom;
    if (y >= kMapeFloor) {
      mape_sum += std::abs(e) / y;
      ++r.mape10_count;
    }
  }
  const double n = static_cast<double>(r.count);
  r.mae = abs_sum / n;
  r.rmse = std::sqrt(sq_sum / n);
  r.smape = smape_sum / n;
  if (r.mape10_count > 0) r.mape10 = mape_sum / static_cast<double>(r.mape10_count);
  return r;
}

std::vector<HourRow> per_hour_errors(std::span<const double> pred, std::span<const double> truth,
                                     std::span<const Hour> timestamps) {
  if (pred.size() != truth.size() || timestamps.size() != truth.size())
    throw DimensionError("per_hour_errors: predictions, truth and timestamps differ in length");
  std::vector<HourRow> rows(24);
  std::vector<double> abs_sum(24, 0.0), sq_sum(24, 0.0), y_sum(24, 0.0);
  for (std::size_t k = 0; k < truth.size(); ++k) {
    const int h = hour_of_day(timestamps[k]);
    const double e = pred[k] - truth[k];
    ++rows[h].count;
    abs_sum[h] += std::abs(e);
    sq_sum[h] += e * e;
    y_sum[h] += truth[k];
  }
  for (int h = 0; h < 24; ++h) {
    rows[h].hour = h;
    if (rows[h].count == 0) continue;
    const double n = static_cast<double>(rows[h].count);
    rows[h].mae = abs_sum[h] / n;
    rows[h].rmse = std::sqrt(sq_sum[h] / n);
    rows[h].mean_demand = y_sum[h] / n;
  }
  return rows;
}

std::string metrics_csv(const std::vector<std::pair<std::string, MetricReport>>& rows) {
  std::ostringstream os;
  os << "label,mae,rmse,mape10,smape,count,mape10_count\n";
  for (const auto& [label, r] : rows)
    os << label << ',' << csv::format_double(r.mae) << ',' << csv::format_double(r.rmse) << ','
       << (r.mape10 ? csv::format_double(*r.mape10) : std::string("NA")) << ',' << csv::format_double(r.smape) << ','
       << r.count << ',' << r.mape10_count << '\n';
  return os.str();
}

std::string per_hour_csv(const std::vector<HourRow>& rows) {
  std::ostringstream os;
  os << "hour,mae,rmse,mean_demand,count\n";
  for (const auto& r : rows) {
    os << r.hour << ',';
    if (r.count > 0)
      os << csv::format_double(r.mae) << ',' << csv::format_double(r.rmse) << ',' << csv::format_double(r.mean_demand);
    else
      os << ",,";
    os << ',' << r.count << '\n';
  }
  return os.str();
}

std::vector<double> flat_truth(const WindowedDataset& ds) {
  std::vector<double> out;
  out.reserve(ds.size() * ds.n_nodes * ds.horizon);
  for (const auto& s : ds.samples) out.insert(out.end(), s.raw_target.begin(), s.raw_target.end());
  return out;
}

std::vector<Hour> flat_timestamps(const WindowedDataset& ds) {
  std::vector<Hour> out;
  out.reserve(ds.size() * ds.n_nodes * ds.horizon);
  for (const auto& s : ds.samples)
    for (std::size_t i = 0; i < ds.n_nodes; ++i)
      for (std::size_t m = 0; m < ds.horizon; ++m) out.push_back(s.anchor + 1 + static_cast<Hour>(m));
  return out;
}

std::vector<double> denormalize_flat(std::span<const double> pred, std::size_t n_nodes, std::size_t horizon,
                                     const DemandStats& stats) {
  if (stats.mean.size() != n_nodes) throw DimensionError("denormalize: stats do not match the zone count");
  std::vector<double> out(pred.size());
  for (std::size_t k = 0; k < pred.size(); ++k) {
    const std::size_t zone = (k / horizon) % n_nodes;
    out[k] = pred[k] * stats.std[zone] + stats.mean[zone];
  }
  return out;
}

HistoricalAverage::HistoricalAverage(const DemandMatrix& train) : zone_ids_(train.zone_ids) {
  if (train.hours == 0 || train.n_zones() == 0) throw ContractError("historical average: empty training history");
  const std::size_t n = train.n_zones();
  std::vector<double> sum(n * 48, 0.0), cnt(n * 48, 0.0);
  for (std::size_t t = 0; t < train.hours; ++t) {
    const Hour h = train.hour_at(t);
    const std::size_t slot = static_cast<std::size_t>(hour_of_day(h)) * 2 + (is_weekend(h) ? 1 : 0);
    for (std::size_t i = 0; i < n; ++i) {
      sum[i * 48 + slot] += train.at(i, t);
      cnt[i * 48 + slot] += 1.0;
    }
  }
  table_.assign(n * 48, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double zone_sum = 0.0, zone_cnt = 0.0;
    for (std::size_t s = 0; s < 48; ++s) {
      zone_sum += sum[i * 48 + s];
      zone_cnt += cnt[i * 48 + s];
    }
    for (std::size_t h = 0; h < 24; ++h) {
      const double hour_sum = sum[i * 48 + h * 2] + sum[i * 48 + h * 2 + 1];
      const double hour_cnt = cnt[i * 48 + h * 2] + cnt[i * 48 + h * 2 + 1];
      for (std::size_t d = 0; d < 2; ++d) {
        const std::size_t k = i * 48 + h * 2 + d;
        if (cnt[k] > 0.0) {
          table_[k] = sum[k] / cnt[k];
        } else {
          ++fallbacks_;
          table_[k] = hour_cnt > 0.0 ? hour_sum / hour_cnt : zone_sum / zone_cnt;
        }
      }
    }
  }
}

double HistoricalAverage::predict(std::size_t zone, Hour hour) const {
  return table_.at(zone * 48 + static_cast<std::size_t>(hour_of_day(hour)) * 2 + (is_weekend(hour) ? 1 : 0));
}

std::vector<double> ha_predictions(const HistoricalAverage& ha, const WindowedDataset& ds) {
  if (ha.zone_ids().size() != ds.n_nodes) throw DimensionError("historical average: zone count differs from data");
  std::vector<double> out;
  out.reserve(ds.size() * ds.n_nodes * ds.horizon);
  for (const auto& s : ds.samples)
    for (std::size_t i = 0; i < ds.n_nodes; ++i)
      for (std::size_t m = 0; m < ds.horizon; ++m) out.push_back(ha.predict(i, s.anchor + 1 + static_cast<Hour>(m)));
  return out;
}

std::pair<Hour, Hour> default_boundaries(const DemandMatrix& dm) {
  const auto a = static_cast<Hour>(dm.hours * 7 / 10);
  const auto b = static_cast<Hour>(dm.hours * 8 / 10);
  return {dm.start + a, dm.start + b};
}

namespace {

DemandMatrix align_zones(const DemandMatrix& dm, const std::vector<std::string>& order) {
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < dm.n_zones(); ++i) index[dm.zone_ids[i]] = i;
  std::set<std::string> wanted(order.begin(), order.end());
  std::vector<std::string> missing, extra;
  for (const auto& z : order)
    if (!index.count(z)) missing.push_back(z);
  for (const auto& z : dm.zone_ids)
    if (!wanted.count(z)) extra.push_back(z);
  if (!missing.empty() || !extra.empty()) {
    std::string msg = "zone sets differ between demand and graphs;";
    auto list = [](const std::vector<std::string>& v) {
      std::string s;
      for (std::size_t i = 0; i < v.size() && i < 10; ++i) s += (i ? " " : "") + v[i];
      if (v.size() > 10) s += " ...";
      return s;
    };
    if (!missing.empty()) msg += " missing from demand: " + list(missing) + ";";
    if (!extra.empty()) msg += " not in graphs: " + list(extra) + ";";
    throw ContractError(msg);
  }
  DemandMatrix out{order, dm.start, dm.hours, std::vector<double>(order.size() * dm.hours)};
  for (std::size_t i = 0; i < order.size(); ++i) {
    const std::size_t src = index.at(order[i]);
    std::copy_n(dm.values.begin() + src * dm.hours, dm.hours, out.values.begin() + i * dm.hours);
  }
  return out;
}

}  // namespace

ExperimentData prepare_experiment(const DemandMatrix& demand, RelationSet relations,
                                  const std::vector<DailyWeather>* weather, std::pair<Hour, Hour> boundaries,
                                  std::size_t input_len, std::size_t horizon) {
  ExperimentData d;
  d.demand = align_zones(demand, relations.zone_ids);
  d.relations = std::move(relations);
  d.splits = split_by_dates(d.demand, boundaries.first, boundaries.second);
  d.stats = compute_demand_stats(d.splits.train);
  const WeatherMatrix* w = nullptr;
  if (weather) {
    d.weather = join_weather(*weather, d.demand, d.splits.train.hours);
    w = &*d.weather;
  }
  auto window = [&](const DemandMatrix& split, SplitTag tag) {
    return split.hours >= input_len + horizon ? make_windows(split, input_len, horizon, &d.stats, w, tag)
                                              : WindowedDataset{};
  };
  d.train = make_windows(d.splits.train, input_len, horizon, &d.stats, w, SplitTag::Train);
  d.val = window(d.splits.val, SplitTag::Val);
  d.test = window(d.splits.test, SplitTag::Test);
  return d;
}

RelationSet select_relations(const RelationSet& all, const ModelConfig& config) {
  RelationSet out{all.zone_ids, {}, all.threshold};
  for (auto r : config.relations) {
    auto it = std::find_if(all.graphs.begin(), all.graphs.end(), [r](const NormalizedGraph& g) { return g.kind == r; });
    if (it == all.graphs.end())
      throw ConfigError(std::string("relation '") + relation_name(r) + "' is configured but was not built");
    out.graphs.push_back(*it);
  }
  return out;
}

std::vector<double> model_predictions(StmgtModel& model, const WindowedDataset& ds, const DemandStats& stats,
                                      std::size_t batch_size) {
  const auto raw = predict_dataset(model, ds, batch_size);
  return denormalize_flat(raw, ds.n_nodes, ds.horizon, stats);
}

MetricReport evaluate_model(StmgtModel& model, const WindowedDataset& ds, const DemandStats& stats,
                            std::size_t batch_size) {
  return metrics(model_predictions(model, ds, stats, batch_size), flat_truth(ds));
}

ExperimentResult run_experiment(const ExperimentData& data, const ModelConfig& config, const TrainConfig& tc,
                                const std::function<void(const EpochRecord&)>& on_epoch) {
  const auto t0 = std::chrono::steady_clock::now();
  StmgtModel model(config, select_relations(data.relations, config));
  ExperimentResult r;
  r.config = config;
  r.history = train(model, data.train, data.val.empty() ? nullptr : &data.val, tc, on_epoch);
  if (data.test.empty()) throw ContractError("run_experiment: the test split has no samples");
  r.test = evaluate_model(model, data.test, data.stats, tc.batch_size);
  r.params = model.params();
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

std::vector<std::string> ablation_components(const ModelConfig& config) {
  std::vector<std::string> out;
  for (auto r : config.relations) out.emplace_back(relation_name(r));
  if (config.weather_features > 0 && config.weather_enabled) out.emplace_back("weather");
  return out;
}

ModelConfig ablated_config(const ModelConfig& config, const std::string& component) {
  ModelConfig c = config;
  if (component == "weather") {
    if (config.weather_features == 0 || !config.weather_enabled)
      throw ConfigError("cannot ablate weather: the weather path is not enabled");
    c.weather_enabled = false;
    return c;
  }
  const Relation r = parse_relation(component);
  const auto it = std::find(c.relations.begin(), c.relations.end(), r);
  if (it == c.relations.end()) throw ConfigError("cannot ablate '" + component + "': relation not in the model");
  if (c.relations.size() == 1) throw ConfigError("cannot ablate '" + component + "': it is the last relation");
  c.relations.erase(it);
  return c;
}

AblationPair ablate(const ExperimentData& data, const ModelConfig& config, const TrainConfig& tc,
                    const std::string& component) {
  const auto reduced = ablated_config(config, component);
  return {run_experiment(data, config, tc), run_experiment(data, reduced, tc)};
}

std::vector<AblationRow> ablation_study(const ExperimentData& data, const ModelConfig& config, const TrainConfig& tc,
                                        const std::vector<std::string>& components,
                                        const std::function<void(const std::string&)>& on_component) {
  std::vector<ModelConfig> configs;
  for (const auto& c : components) configs.push_back(ablated_config(config, c));
  std::vector<AblationRow> rows;
  if (on_component) on_component("none");
  rows.push_back({"none", run_experiment(data, config, tc).test});
  for (std::size_t k = 0; k < components.size(); ++k) {
    if (on_component) on_component(components[k]);
    rows.push_back({components[k], run_experiment(data, configs[k], tc).test});
  }
  return rows;
}

std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << "removed,mae,rmse,mape10,smape\n";
  for (const auto& r : rows)
    os << r.component << ',' << csv::format_double(r.test.mae) << ',' << csv::format_double(r.test.rmse) << ','
       << (r.test.mape10 ? csv::format_double(*r.test.mape10) : std::string("NA")) << ','
       << csv::format_double(r.test.smape) << '\n';
  return os.str();
}

std::vector<std::string> importance_groups(const ModelConfig& config, bool per_weather_column) {
  std::vector<std::string> out;
  for (auto r : config.relations) out.emplace_back(relation_name(r));
  if (config.weather_features > 0 && config.weather_enabled) {
    out.emplace_back("weather");
    if (per_weather_column)
      for (std::size_t f = 0; f < config.weather_features; ++f)
        out.push_back("weather:" + (f < kWeatherColumns.size() ? kWeatherColumns[f] : std::to_string(f)));
  }
  return out;
}

namespace {

// Column index for `weather:<name or index>`.
std::size_t weather_column(const std::string& spec, std::size_t features) {
  for (std::size_t f = 0; f < kWeatherColumns.size() && f < features; ++f)
    if (spec == kWeatherColumns[f]) return f;
  std::size_t f = 0;
  const auto [p, ec] = std::from_chars(spec.data(), spec.data() + spec.size(), f);
  if (ec == std::errc() && p == spec.data() + spec.size() && f < features) return f;
  throw ConfigError("unknown importance group 'weather:" + spec + "'");
}

}  // namespace

ImportanceRow permutation_importance(StmgtModel& model, const WindowedDataset& test, const DemandStats& stats,
                                     const std::string& group, const ImportanceOptions& options) {
  if (options.repetitions < 1) throw ConfigError("importance needs at least one repetition");
  if (test.empty()) throw ContractError("importance: empty test set");
  const auto& config = model.config();

  enum class Kind { Relation, Weather, WeatherColumn } kind;
  std::size_t graph_index = 0, column = 0;
  if (group == "weather") {
    kind = Kind::Weather;
  } else if (group.rfind("weather:", 0) == 0) {
    kind = Kind::WeatherColumn;
    column = weather_column(group.substr(8), test.weather_features);
  } else {
    Relation r;
    try {
      r = parse_relation(group);
    } catch (const ConfigError&) {
      throw ConfigError("unknown importance group '" + group + "'");
    }
    const auto kinds = model.relations().kinds();
    const auto it = std::find(kinds.begin(), kinds.end(), r);
    if (it == kinds.end()) throw ConfigError("importance group '" + group + "' is not a relation of this model");
    kind = Kind::Relation;
    graph_index = static_cast<std::size_t>(it - kinds.begin());
  }
  if (kind != Kind::Relation && (test.weather_features == 0 || config.weather_features == 0))
    throw ConfigError("importance group '" + group + "' needs weather inputs");

  const auto truth = flat_truth(test);
  ImportanceRow row;
  row.group = group;
  row.repetitions = options.repetitions;
  row.baseline_rmse = metrics(model_predictions(model, test, stats, options.batch_size), truth).rmse;

  const std::size_t t = test.input_len, f = test.weather_features;
  double total = 0.0;
  for (std::size_t rep = 0; rep < options.repetitions; ++rep) {
    std::mt19937_64 rng(derive_seed(options.seed, "importance/" + group + "/" + std::to_string(rep)));
    double rmse = 0.0;
    if (kind == Kind::Relation) {
      const std::size_t n = test.n_nodes;
      std::vector<std::size_t> perm(n);
      for (std::size_t i = 0; i < n; ++i) perm[i] = i;
      if (!options.force_identity) perm = random_permutation(n, rng);
      const NormalizedGraph original = model.relations().graphs[graph_index];
      model.relations().graphs[graph_index] = original.permuted(perm);
      try {
        rmse = metrics(model_predictions(model, test, stats, options.batch_size), truth).rmse;
      } catch (...) {
        model.relations().graphs[graph_index] = original;
        throw;
      }
      model.relations().graphs[graph_index] = original;
    } else {
      std::vector<std::size_t> perm(test.size());
      for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
      if (!options.force_identity) perm = random_permutation(test.size(), rng);
      WindowedDataset shuffled = test;
      for (std::size_t s = 0; s < test.size(); ++s) {
        const auto& src = test.samples[perm[s]].weather;
        auto& dst = shuffled.samples[s].weather;
        if (kind == Kind::Weather) {
          dst = src;
        } else {
          for (std::size_t j = 0; j < t; ++j) dst[j * f + column] = src[j * f + column];
        }
      }
      rmse = metrics(model_predictions(model, shuffled, stats, options.batch_size), truth).rmse;
    }
    row.per_repetition.push_back(rmse);
    total += rmse - row.baseline_rmse;
  }
  row.importance = total / static_cast<double>(options.repetitions);
  row.permuted_rmse = row.baseline_rmse + row.importance;
  return row;
}

std::string importance_csv(const std::vector<ImportanceRow>& rows) {
  std::ostringstream os;
  os << "group,baseline_rmse,permuted_rmse,importance,repetitions\n";
  for (const auto& r : rows)
    os << r.group << ',' << csv::format_double(r.baseline_rmse) << ',' << csv::format_double(r.permuted_rmse) << ','
       << csv::format_double(r.importance) << ',' << r.repetitions << '\n';
  return os.str();
}

}  // namespace stmgt
