#include "cli.hpp"

#include <openssl/evp.h>

#include <CLI11.hpp>
#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "stmgt/csv.hpp"
#include "stmgt/data.hpp"
#include "stmgt/eval.hpp"
#include "stmgt/graphs.hpp"
#include "stmgt/synth.hpp"
#include "stmgt/training.hpp"

#ifndef STMGT_VERSION
#define STMGT_VERSION "0.0.0"
#endif

namespace stmgt::cli {

namespace fs = std::filesystem;
using nlohmann::json;

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Config:
    case ErrorKind::Dimension:
      return kExitConfig;
    case ErrorKind::Ingestion:
    case ErrorKind::Contract:
      return kExitIngestion;
    case ErrorKind::Numeric:
      return kExitNumeric;
  }
  return kExitConfig;
}

std::string sha256_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestionError("cannot read " + path);
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr);
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    EVP_DigestUpdate(ctx.get(), buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx.get(), digest, &len);
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i) hex << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
  return hex.str();
}

std::string default_output_dir() {
  const char* env = std::getenv("STMGT_OUTPUT_DIR");
  return env && *env ? env : "stmgt_out";
}

namespace {

// Files a command read, hashed into the run manifest. Directories hash
// every regular file inside, keyed by relative path.
class InputLog {
 public:
  void file(const std::string& role, const std::string& path) { entries_[role] = {{"path", path}, {"sha256", sha256_file(path)}}; }
  void directory(const std::string& role, const std::string& path) {
    json files = json::object();
    std::vector<fs::path> paths;
    for (const auto& e : fs::recursive_directory_iterator(path))
      if (e.is_regular_file()) paths.push_back(e.path());
    std::sort(paths.begin(), paths.end());
    for (const auto& p : paths) files[fs::relative(p, path).generic_string()] = sha256_file(p.string());
    entries_[role] = {{"path", path}, {"files", files}};
  }
  json to_json() const { return entries_; }

 private:
  json entries_ = json::object();
};

struct Context {
  std::vector<std::string> args;
  std::ostream& out;
  fs::path out_dir;
  InputLog inputs;
  json config = json::object();
  std::vector<std::string> outputs;
  std::uint64_t seed = 0;

  fs::path output(const std::string& name) {
    outputs.push_back(name);
    return out_dir / name;
  }
  void write(const std::string& name, const std::string& text) { csv::write_text(output(name).string(), text); }
};

void write_manifest(Context& ctx, const std::string& command) {
  json m = {{"tool", "stmgt"},
            {"version", STMGT_VERSION},
            {"command", command},
            {"argv", std::vector<std::string>(ctx.args.begin() + 1, ctx.args.end())},
            {"seed", ctx.seed},
            {"config", ctx.config},
            {"inputs", ctx.inputs.to_json()},
            {"outputs", ctx.outputs}};
  csv::write_text((ctx.out_dir / kManifestFile).string(), m.dump(2) + "\n");
}

json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(path + ": invalid JSON: " + e.what());
  }
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

// ---- shared data inputs ----

struct DataArgs {
  std::string graphs, trips, demand, weather;
  std::string start, end, train_end, val_end;

  void add(CLI::App* app) {
    app->add_option("--graphs", graphs, "Relation set directory written by build-graphs")->required();
    app->add_option("--trips", trips, "Trip CSV (zone_id,timestamp)");
    app->add_option("--demand", demand, "Demand matrix CSV (zone_id then one column per hour)");
    app->add_option("--weather", weather, "Daily weather CSV; omit to run without the weather path");
    app->add_option("--start", start, "First hour of the demand range (default: earliest trip)");
    app->add_option("--end", end, "End of the demand range, exclusive (default: after the latest trip)");
    app->add_option("--train-end", train_end, "First validation hour (default: 70% of the range)");
    app->add_option("--val-end", val_end, "First test hour (default: 80% of the range)");
  }
};

struct LoadedData {
  RelationSet relations;
  DemandMatrix demand;
  std::optional<std::vector<DailyWeather>> weather;
};

LoadedData load_data(const DataArgs& a, Context& ctx) {
  if (a.trips.empty() == a.demand.empty()) throw ConfigError("give exactly one of --trips or --demand");
  LoadedData d;
  d.relations = load_relation_set(a.graphs);
  ctx.inputs.directory("graphs", a.graphs);
  if (!a.trips.empty()) {
    auto trips = read_trips(a.trips);
    ctx.inputs.file("trips", a.trips);
    if (trips.empty()) throw IngestionError(a.trips + ": no trip records");
    Hour lo = std::numeric_limits<Hour>::max(), hi = std::numeric_limits<Hour>::min();
    for (const auto& t : trips) {
      const Hour h = t.minutes >= 0 ? t.minutes / 60 : -((-t.minutes + 59) / 60);
      lo = std::min(lo, h);
      hi = std::max(hi, h);
    }
    const Hour start = a.start.empty() ? lo : parse_hour(a.start);
    const Hour end = a.end.empty() ? hi + 1 : parse_hour(a.end);
    auto binned = bin_trips(trips, d.relations.zone_ids, start, end);
    const auto& s = binned.summary;
    ctx.out << "trips: " << s.in_range << " binned, " << s.out_of_range << " out of range, " << s.unknown_zone
            << " with unknown zones\n";
    for (const auto& [zone, count] : s.unknown_zone_ids) ctx.out << "  unknown zone " << zone << ": " << count << "\n";
    d.demand = std::move(binned.matrix);
  } else {
    d.demand = read_demand_matrix(a.demand);
    ctx.inputs.file("demand", a.demand);
    const Hour first = d.demand.start, last = d.demand.start + static_cast<Hour>(d.demand.hours);
    const Hour start = a.start.empty() ? first : parse_hour(a.start);
    const Hour end = a.end.empty() ? last : parse_hour(a.end);
    if (start < first || end > last || start >= end)
      throw ConfigError("--start/--end must select a non-empty range inside the demand matrix");
    if (start != first || end != last)
      d.demand = d.demand.slice(static_cast<std::size_t>(start - first), static_cast<std::size_t>(end - first));
  }
  if (!a.weather.empty()) {
    d.weather = read_weather(a.weather);
    ctx.inputs.file("weather", a.weather);
  }
  return d;
}

std::pair<Hour, Hour> boundaries(const DataArgs& a, const DemandMatrix& dm, const json& fallback = {}) {
  auto b = default_boundaries(dm);
  if (fallback.is_object()) {
    b.first = parse_hour(fallback.at("train_end").get<std::string>());
    b.second = parse_hour(fallback.at("val_end").get<std::string>());
  }
  if (!a.train_end.empty()) b.first = parse_hour(a.train_end);
  if (!a.val_end.empty()) b.second = parse_hour(a.val_end);
  return b;
}

json data_json(const DemandMatrix& dm, std::pair<Hour, Hour> b) {
  return {{"start", format_hour(dm.start)},
          {"end", format_hour(dm.start + static_cast<Hour>(dm.hours))},
          {"train_end", format_hour(b.first)},
          {"val_end", format_hour(b.second)}};
}

// ---- model and training configuration ----

struct ModelArgs {
  std::string config_file;
  std::optional<std::size_t> epochs, batch_size, input_len, horizon, blocks, d_model, heads, patience;
  std::optional<double> learning_rate;
  std::optional<std::uint64_t> seed;
  std::string relations, gcn_output;

  void add(CLI::App* app) {
    app->add_option("--config", config_file, "JSON config with optional 'model', 'train' and 'data' objects");
    app->add_option("--epochs", epochs);
    app->add_option("--batch-size", batch_size);
    app->add_option("--learning-rate", learning_rate);
    app->add_option("--seed", seed, "Seed for initialisation and shuffling");
    app->add_option("--input-len", input_len, "Input window T");
    app->add_option("--horizon", horizon, "Forecast horizon M");
    app->add_option("--blocks", blocks, "Transformer blocks k");
    app->add_option("--d-model", d_model);
    app->add_option("--heads", heads);
    app->add_option("--patience", patience, "Early stopping patience in epochs (0 disables)");
    app->add_option("--relations", relations, "Comma-separated relation names");
    app->add_option("--gcn-output", gcn_output, "softmax or linear");
  }
};

struct Resolved {
  ModelConfig model;
  TrainConfig train;
  json data;  // optional split boundaries from the config file
};

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  for (std::string item; std::getline(in, item, ',');)
    if (!item.empty()) out.push_back(item);
  return out;
}

Resolved resolve(const ModelArgs& a, bool has_weather) {
  json file = a.config_file.empty() ? json::object() : read_json(a.config_file);
  if (!file.is_object()) throw ConfigError("config file must hold a JSON object");
  for (const auto& [key, value] : file.items())
    if (key != "model" && key != "train" && key != "data") throw ConfigError("unknown config section '" + key + "'");
  Resolved r;
  r.model = model_config_from_json(file.value("model", json::object()));
  r.train = train_config_from_json(file.value("train", json::object()));
  r.data = file.value("data", json());

  json m = json::object(), t = json::object();
  if (a.input_len) m["input_len"] = *a.input_len;
  if (a.horizon) m["horizon"] = *a.horizon;
  if (a.blocks) m["blocks"] = *a.blocks;
  if (a.d_model) m["d_model"] = *a.d_model;
  if (a.heads) m["heads"] = *a.heads;
  if (!a.relations.empty()) m["relations"] = split_list(a.relations);
  if (!a.gcn_output.empty()) m["gcn_output"] = a.gcn_output;
  if (a.seed) m["seed"] = t["seed"] = *a.seed;
  if (a.epochs) t["epochs"] = *a.epochs;
  if (a.batch_size) t["batch_size"] = *a.batch_size;
  if (a.learning_rate) t["learning_rate"] = *a.learning_rate;
  if (a.patience) t["patience"] = *a.patience;
  r.model = model_config_from_json(m, r.model);
  r.train = train_config_from_json(t, r.train);
  if (!has_weather) r.model.weather_features = 0;
  r.model.validate();
  r.train.validate();
  return r;
}

// ---- checkpoint-driven data preparation ----

// Splits the data at the checkpoint's boundaries and windows it with the
// checkpoint's normalisation statistics.
ExperimentData prepare_for_checkpoint(const Checkpoint& ckpt, const LoadedData& d, const DataArgs& a) {
  if (d.relations.zone_ids != ckpt.zone_ids) {
    std::set<std::string> have(d.relations.zone_ids.begin(), d.relations.zone_ids.end());
    std::set<std::string> want(ckpt.zone_ids.begin(), ckpt.zone_ids.end());
    std::string missing, extra;
    for (const auto& z : want)
      if (!have.count(z)) missing += " " + z;
    for (const auto& z : have)
      if (!want.count(z)) extra += " " + z;
    throw ContractError("zones differ from the checkpoint (missing:" + (missing.empty() ? " none" : missing) +
                        "; unexpected:" + (extra.empty() ? " none" : extra) + ")");
  }
  const bool with_weather = ckpt.config.weather_features > 0;
  if (with_weather && !d.weather) throw ConfigError("the checkpoint uses weather; pass --weather");
  const auto& c = ckpt.config;
  auto data = prepare_experiment(d.demand, d.relations, with_weather ? &*d.weather : nullptr,
                                 boundaries(a, d.demand, ckpt.extra.value("data", json())), c.input_len, c.horizon);
  data.stats = ckpt.demand_stats;
  const WeatherMatrix* w = nullptr;
  if (data.weather) {
    auto& wm = *data.weather;
    wm.mean = ckpt.weather_mean;
    wm.std = ckpt.weather_std;
    for (std::size_t t = 0; t < wm.hours; ++t)
      for (std::size_t f = 0; f < wm.features; ++f)
        wm.standardized[t * wm.features + f] = (wm.raw_at(t, f) - wm.mean[f]) / wm.std[f];
    w = &wm;
  }
  auto window = [&](const DemandMatrix& split, SplitTag tag) {
    return split.hours >= c.input_len + c.horizon ? make_windows(split, c.input_len, c.horizon, &data.stats, w, tag)
                                                  : WindowedDataset{};
  };
  data.train = window(data.splits.train, SplitTag::Train);
  data.val = window(data.splits.val, SplitTag::Val);
  data.test = window(data.splits.test, SplitTag::Test);
  return data;
}

const WindowedDataset& pick_split(const ExperimentData& data, const std::string& name) {
  const WindowedDataset* ds = name == "train" ? &data.train : name == "val" ? &data.val : name == "test" ? &data.test : nullptr;
  if (!ds) throw ConfigError("--split must be train, val or test, got '" + name + "'");
  if (ds->empty()) throw ContractError("the " + name + " split has no complete windows");
  return *ds;
}

Checkpoint checkpoint_for(const Resolved& r, const ModelParams& params, const ExperimentData& data) {
  Checkpoint ckpt{r.model, params, data.relations.zone_ids, data.stats, {}, {}, json::object()};
  if (data.weather) {
    ckpt.weather_mean = data.weather->mean;
    ckpt.weather_std = data.weather->std;
  }
  ckpt.extra["data"] = data_json(data.demand, {data.splits.val.start, data.splits.test.start});
  ckpt.extra["train"] = to_json(r.train);
  return ckpt;
}

// ---- commands ----

int cmd_synth(Context& ctx, const SynthConfig& sc, bool trips) {
  auto city = generate_city(sc);
  fs::create_directories(ctx.out_dir);
  write_city(city, ctx.out_dir.string(), trips);
  for (const char* f : {"demand.csv", "weather.csv", "edges.csv", "poi.csv", "demographic.csv", "transport.csv"})
    ctx.outputs.push_back(f);
  if (trips) ctx.outputs.push_back("trips.csv");
  ctx.config = {{"n_zones", sc.n_zones}, {"grid_cols", sc.grid_cols}, {"hours", sc.hours},
                {"start_date", sc.start_date}, {"seed", sc.seed}};
  ctx.seed = sc.seed;
  ctx.out << "synthetic city: " << sc.n_zones << " zones, " << sc.hours << " hours -> " << ctx.out_dir.string() << "\n";
  return kExitOk;
}

void require_same_zones(const std::vector<std::pair<std::string, const ZoneFeatureTable*>>& tables) {
  const auto& [ref_name, ref] = tables.front();
  std::set<std::string> ref_ids(ref->zone_ids.begin(), ref->zone_ids.end());
  for (std::size_t k = 1; k < tables.size(); ++k) {
    const auto& [name, t] = tables[k];
    std::set<std::string> ids(t->zone_ids.begin(), t->zone_ids.end());
    if (ids == ref_ids) continue;
    std::string only_ref, only_t;
    for (const auto& z : ref_ids)
      if (!ids.count(z)) only_ref += " " + z;
    for (const auto& z : ids)
      if (!ref_ids.count(z)) only_t += " " + z;
    throw IngestionError("zone mismatch between " + ref_name + " and " + name + ": only in " + ref_name + ":" +
                         (only_ref.empty() ? " none" : only_ref) + "; only in " + name + ":" +
                         (only_t.empty() ? " none" : only_t));
  }
}

int cmd_build_graphs(Context& ctx, const std::string& poi, const std::string& demo, const std::string& transport,
                     const std::string& edges_path, double threshold) {
  auto functional = read_zone_features(poi);
  auto demographic = read_zone_features(demo);
  auto supply = read_zone_features(transport);
  ctx.inputs.file("poi", poi);
  ctx.inputs.file("demographic", demo);
  ctx.inputs.file("transport", transport);
  require_same_zones({{"poi", &functional}, {"demographic", &demographic}, {"transport", &supply}});
  auto edges = read_edge_list(edges_path);
  ctx.inputs.file("edges", edges_path);
  std::vector<ZoneGraph> graphs{build_adjacency_graph(edges, functional.zone_ids),
                                build_similarity_graph(functional, threshold, Relation::Functional),
                                build_similarity_graph(demographic, threshold, Relation::Demographic),
                                build_similarity_graph(supply, threshold, Relation::TransportSupply)};
  auto relations = fuse(graphs, threshold);
  export_relation_set(relations, ctx.out_dir.string());
  for (const auto& g : graphs) ctx.outputs.push_back(std::string(relation_name(g.kind)) + ".csv");
  ctx.outputs.push_back("manifest.json");
  ctx.config = {{"threshold", threshold}, {"zones", functional.zone_ids.size()}};
  ctx.out << "relation edges density\n";
  for (const auto& g : graphs)
    ctx.out << relation_name(g.kind) << " " << g.edge_count() << " " << fmt(g.density()) << "\n";
  return kExitOk;
}

int cmd_train(Context& ctx, const DataArgs& da, const ModelArgs& ma, std::size_t checkpoint_every, bool dry_run) {
  auto d = load_data(da, ctx);
  auto r = resolve(ma, d.weather.has_value());
  r.train.checkpoint_every = checkpoint_every;
  const auto b = boundaries(da, d.demand, r.data);
  auto data = prepare_experiment(d.demand, d.relations, d.weather ? &*d.weather : nullptr, b, r.model.input_len,
                                 r.model.horizon);
  ctx.seed = r.train.seed;
  ctx.config = {{"model", to_json(r.model)}, {"train", to_json(r.train)}, {"data", data_json(data.demand, b)}};
  ctx.out << "windows: train " << data.train.size() << ", val " << data.val.size() << ", test " << data.test.size()
          << "; parameters " << count_params(r.model) << "\n";
  fs::create_directories(ctx.out_dir);
  if (dry_run) return kExitOk;

  StmgtModel model(r.model, select_relations(data.relations, r.model));
  if (checkpoint_every > 0) {
    r.train.checkpoint_dir = (ctx.out_dir / "checkpoints").string();
    model.checkpoint_writer = [&](const std::string& dir, std::size_t) {
      save_checkpoint(checkpoint_for(r, model.params(), data), dir);
    };
  }
  auto history = train(model, data.train, data.val.empty() ? nullptr : &data.val, r.train, [&](const EpochRecord& e) {
    ctx.out << "epoch " << e.epoch << "/" << r.train.epochs << " train " << fmt(e.train_loss);
    if (!std::isnan(e.val_loss)) ctx.out << " val " << fmt(e.val_loss);
    ctx.out << " (" << std::fixed << std::setprecision(1) << e.seconds << "s)\n" << std::defaultfloat;
  });
  auto ckpt = checkpoint_for(r, model.params(), data);
  ckpt.extra["best_epoch"] = history.best_epoch;
  save_checkpoint(ckpt, ctx.output("checkpoint").string());
  ctx.write("history.csv", history_csv(history));
  std::vector<std::pair<std::string, MetricReport>> rows;
  if (!data.val.empty()) rows.emplace_back("val", evaluate_model(model, data.val, data.stats, r.train.batch_size));
  if (!data.test.empty()) rows.emplace_back("test", evaluate_model(model, data.test, data.stats, r.train.batch_size));
  ctx.write("metrics.csv", metrics_csv(rows));
  for (const auto& [label, m] : rows) ctx.out << label << " mae " << fmt(m.mae) << " rmse " << fmt(m.rmse) << "\n";
  if (history.stopped_early) ctx.out << "stopped early after epoch " << history.epochs.size() << "\n";
  return kExitOk;
}

struct Loaded {
  Checkpoint ckpt;
  ExperimentData data;
};

Loaded load_for_checkpoint(Context& ctx, const std::string& checkpoint, const DataArgs& da) {
  Loaded l{load_checkpoint(checkpoint), {}};
  ctx.inputs.directory("checkpoint", checkpoint);
  auto d = load_data(da, ctx);
  l.data = prepare_for_checkpoint(l.ckpt, d, da);
  ctx.seed = l.ckpt.config.seed;
  ctx.config = {{"model", to_json(l.ckpt.config)},
                {"data", data_json(l.data.demand, {l.data.splits.val.start, l.data.splits.test.start})}};
  return l;
}

int cmd_predict(Context& ctx, const std::string& checkpoint, const DataArgs& da, const std::string& split) {
  auto l = load_for_checkpoint(ctx, checkpoint, da);
  const auto& ds = pick_split(l.data, split);
  StmgtModel model(l.ckpt.config, select_relations(l.data.relations, l.ckpt.config), l.ckpt.params);
  const auto pred = model_predictions(model, ds, l.data.stats);
  const auto stamps = flat_timestamps(ds);
  const std::size_t n = ds.n_nodes, m = ds.horizon;
  std::ostringstream out;
  out << "zone_id,anchor,timestamp,step,prediction\n";
  for (std::size_t s = 0; s < ds.size(); ++s)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < m; ++k) {
        const std::size_t idx = (s * n + i) * m + k;
        out << l.data.relations.zone_ids[i] << "," << format_hour(ds.samples[s].anchor) << ","
            << format_hour(stamps[idx]) << "," << k + 1 << "," << csv::format_double(pred[idx]) << "\n";
      }
  fs::create_directories(ctx.out_dir);
  ctx.write("predictions.csv", out.str());
  ctx.config["split"] = split;
  ctx.out << "predictions: " << ds.size() << " windows x " << n << " zones x " << m << " steps\n";
  return kExitOk;
}

int cmd_evaluate(Context& ctx, const std::string& checkpoint, const DataArgs& da, const std::string& baseline,
                 bool per_hour, const std::string& split) {
  if (!baseline.empty() && baseline != "ha") throw ConfigError("--baseline supports only 'ha', got '" + baseline + "'");
  auto l = load_for_checkpoint(ctx, checkpoint, da);
  const auto& ds = pick_split(l.data, split);
  StmgtModel model(l.ckpt.config, select_relations(l.data.relations, l.ckpt.config), l.ckpt.params);
  const auto truth = flat_truth(ds);
  const auto stamps = flat_timestamps(ds);
  const auto pred = model_predictions(model, ds, l.data.stats);
  std::vector<std::pair<std::string, MetricReport>> rows{{"stmgt", metrics(pred, truth)}};
  std::vector<double> ha_pred;
  if (!baseline.empty()) {
    if (l.data.splits.train.hours == 0) throw ContractError("the HA baseline needs training-period demand");
    HistoricalAverage ha(l.data.splits.train);
    ha_pred = ha_predictions(ha, ds);
    rows.emplace_back("ha", metrics(ha_pred, truth));
  }
  fs::create_directories(ctx.out_dir);
  ctx.write("metrics.csv", metrics_csv(rows));
  if (per_hour) {
    ctx.write("per_hour.csv", per_hour_csv(per_hour_errors(pred, truth, stamps)));
    if (!ha_pred.empty()) ctx.write("per_hour_ha.csv", per_hour_csv(per_hour_errors(ha_pred, truth, stamps)));
  }
  ctx.config["split"] = split;
  ctx.config["baseline"] = baseline;
  ctx.config["per_hour"] = per_hour;
  for (const auto& [label, m] : rows)
    ctx.out << label << " mae " << fmt(m.mae) << " rmse " << fmt(m.rmse) << " mape10 "
            << (m.mape10 ? fmt(*m.mape10) : std::string("NA")) << " smape " << fmt(m.smape) << "\n";
  return kExitOk;
}

int cmd_ablate(Context& ctx, const DataArgs& da, const ModelArgs& ma, const std::string& components, bool dry_run) {
  auto d = load_data(da, ctx);
  auto r = resolve(ma, d.weather.has_value());
  const auto b = boundaries(da, d.demand, r.data);
  auto data = prepare_experiment(d.demand, d.relations, d.weather ? &*d.weather : nullptr, b, r.model.input_len,
                                 r.model.horizon);
  auto comps = components.empty() ? ablation_components(r.model) : split_list(components);
  for (const auto& c : comps) ablated_config(r.model, c);  // validate before any training
  ctx.seed = r.train.seed;
  ctx.config = {{"model", to_json(r.model)},
                {"train", to_json(r.train)},
                {"data", data_json(data.demand, b)},
                {"components", comps}};
  fs::create_directories(ctx.out_dir);
  if (dry_run) return kExitOk;
  auto rows = ablation_study(data, r.model, r.train, comps, [&](const std::string& c) {
    ctx.out << "training without " << c << "\n";
  });
  fs::create_directories(ctx.out_dir);
  ctx.write("ablation.csv", ablation_csv(rows));
  for (const auto& row : rows) ctx.out << row.component << " rmse " << fmt(row.test.rmse) << "\n";
  return kExitOk;
}

int cmd_importance(Context& ctx, const std::string& checkpoint, const DataArgs& da, std::size_t repetitions,
                   std::uint64_t seed, bool per_column, const std::string& groups) {
  if (repetitions < 1) throw ConfigError("--repetitions must be >= 1");
  auto l = load_for_checkpoint(ctx, checkpoint, da);
  const auto& ds = pick_split(l.data, "test");
  StmgtModel model(l.ckpt.config, select_relations(l.data.relations, l.ckpt.config), l.ckpt.params);
  ImportanceOptions opts;
  opts.repetitions = repetitions;
  opts.seed = seed;
  const auto names = groups.empty() ? importance_groups(l.ckpt.config, per_column) : split_list(groups);
  std::vector<ImportanceRow> rows;
  for (const auto& g : names) {
    rows.push_back(permutation_importance(model, ds, l.data.stats, g, opts));
    ctx.out << g << " importance " << fmt(rows.back().importance) << "\n";
  }
  fs::create_directories(ctx.out_dir);
  ctx.write("importance.csv", importance_csv(rows));
  ctx.seed = seed;
  ctx.config["repetitions"] = repetitions;
  ctx.config["importance_seed"] = seed;
  ctx.config["groups"] = names;
  return kExitOk;
}

std::string one_line(std::string s) {
  std::replace(s.begin(), s.end(), '\n', ' ');
  return s;
}

int report(std::ostream& err, const std::string& code, int exit, const std::string& detail) {
  err << "error code=" << code << " exit=" << exit << ": " << one_line(detail) << "\n";
  return exit;
}

int run_impl(const std::vector<std::string>& args, std::ostream& out, std::ostream& err, int depth);

int cmd_rerun(const std::string& manifest_path, const std::string& out_dir, std::ostream& out, std::ostream& err,
              int depth) {
  if (depth > 0) throw ConfigError("a rerun manifest cannot itself describe a rerun");
  auto m = read_json(manifest_path);
  for (const auto& [role, entry] : m.at("inputs").items()) {
    const std::string path = entry.at("path");
    if (entry.contains("sha256")) {
      if (sha256_file(path) != entry.at("sha256").get<std::string>())
        throw IngestionError("input '" + role + "' (" + path + ") changed since the recorded run");
    } else {
      for (const auto& [rel, digest] : entry.at("files").items())
        if (sha256_file((fs::path(path) / rel).string()) != digest.get<std::string>())
          throw IngestionError("input '" + role + "' file " + rel + " changed since the recorded run");
    }
  }
  std::vector<std::string> replay{"stmgt"};
  auto argv = m.at("argv").get<std::vector<std::string>>();
  for (std::size_t k = 0; k < argv.size(); ++k) {
    if (argv[k] == "--out" && k + 1 < argv.size()) {
      ++k;
      continue;
    }
    if (argv[k].starts_with("--out=")) continue;
    replay.push_back(argv[k]);
  }
  replay.push_back("--out");
  replay.push_back(out_dir);
  return run_impl(replay, out, err, depth + 1);
}

int run_impl(const std::vector<std::string>& args, std::ostream& out, std::ostream& err, int depth) {
  CLI::App app{"Spatio-temporal multi-graph transformer for zone demand forecasting", "stmgt"};
  app.require_subcommand(1);
  app.set_version_flag("--version", STMGT_VERSION);
  std::string out_dir;
  auto add_out = [&](CLI::App* sub) {
    sub->add_option("--out", out_dir, "Output directory (default $STMGT_OUTPUT_DIR or ./stmgt_out)");
  };

  SynthConfig sc;
  bool synth_trips = false;
  auto* synth = app.add_subcommand("synth", "Write a seeded synthetic city (demand, weather, zone tables)");
  synth->add_option("--seed", sc.seed);
  synth->add_option("--hours", sc.hours);
  synth->add_option("--zones", sc.n_zones);
  synth->add_option("--grid-cols", sc.grid_cols);
  synth->add_option("--start-date", sc.start_date);
  synth->add_flag("--trips", synth_trips, "Also write individual trip records");
  add_out(synth);

  std::string poi, demo, transport, edges;
  double threshold = kDefaultSimilarityThreshold;
  auto* build = app.add_subcommand("build-graphs", "Build and normalise the four zone relation graphs");
  build->add_option("--poi", poi, "Functional (POI) zone features")->required();
  build->add_option("--demographic", demo, "Demographic zone features")->required();
  build->add_option("--transport", transport, "Transport-supply zone features")->required();
  build->add_option("--edges", edges, "Spatial adjacency edge list")->required();
  build->add_option("--threshold", threshold, "Pearson threshold in (0, 1)");
  add_out(build);

  DataArgs train_data, ablate_data, ckpt_data;
  ModelArgs train_model, ablate_model;
  std::size_t checkpoint_every = 0;
  bool dry_run = false;
  auto* trn = app.add_subcommand("train", "Train a model and write a checkpoint, history and metrics");
  train_data.add(trn);
  train_model.add(trn);
  trn->add_option("--checkpoint-every", checkpoint_every, "Also checkpoint every N epochs");
  trn->add_flag("--dry-run", dry_run, "Resolve inputs and config, write the manifest, skip training");
  add_out(trn);

  std::string checkpoint, split = "test", baseline, groups;
  bool per_hour = false, per_column = false;
  std::size_t repetitions = 5;
  std::uint64_t importance_seed = 42;
  auto* pred = app.add_subcommand("predict", "Write model predictions for one split");
  pred->add_option("--checkpoint", checkpoint)->required();
  pred->add_option("--split", split, "train, val or test");
  ckpt_data.add(pred);
  add_out(pred);

  auto* evl = app.add_subcommand("evaluate", "Metrics for a checkpoint, optionally against HA");
  evl->add_option("--checkpoint", checkpoint)->required();
  evl->add_option("--split", split, "train, val or test");
  evl->add_option("--baseline", baseline, "ha");
  evl->add_flag("--per-hour", per_hour, "Also write the hour-of-day error profile");
  ckpt_data.add(evl);
  add_out(evl);

  std::string components;
  auto* abl = app.add_subcommand("ablate", "Retrain with each component removed");
  ablate_data.add(abl);
  ablate_model.add(abl);
  abl->add_option("--components", components, "Comma-separated subset (default: every enabled component)");
  abl->add_flag("--dry-run", dry_run, "Resolve inputs and config, write the manifest, skip training");
  add_out(abl);

  auto* imp = app.add_subcommand("importance", "Permutation importance of each feature group");
  imp->add_option("--checkpoint", checkpoint)->required();
  imp->add_option("--repetitions", repetitions);
  imp->add_option("--importance-seed", importance_seed);
  imp->add_flag("--per-column", per_column, "Add one group per weather column");
  imp->add_option("--groups", groups, "Comma-separated subset of groups");
  ckpt_data.add(imp);
  add_out(imp);

  std::string manifest;
  auto* rerun = app.add_subcommand("rerun", "Replay a run manifest after checking its input digests");
  rerun->add_option("manifest", manifest)->required();
  add_out(rerun);

  std::vector<std::string> reversed(args.rbegin(), args.rend() - (args.empty() ? 0 : 1));
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::CallForVersion&) {
    out << STMGT_VERSION << "\n";
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    return report(err, "usage", kExitConfig, e.what());
  }

  Context ctx{args, out, out_dir.empty() ? fs::path(default_output_dir()) : fs::path(out_dir), {}, {}, {}, 0};
  try {
    std::string command;
    int code = kExitOk;
    if (*synth) {
      command = "synth";
      code = cmd_synth(ctx, sc, synth_trips);
    } else if (*build) {
      command = "build-graphs";
      fs::create_directories(ctx.out_dir);
      code = cmd_build_graphs(ctx, poi, demo, transport, edges, threshold);
    } else if (*trn) {
      command = "train";
      code = cmd_train(ctx, train_data, train_model, checkpoint_every, dry_run);
    } else if (*pred) {
      command = "predict";
      code = cmd_predict(ctx, checkpoint, ckpt_data, split);
    } else if (*evl) {
      command = "evaluate";
      code = cmd_evaluate(ctx, checkpoint, ckpt_data, baseline, per_hour, split);
    } else if (*abl) {
      command = "ablate";
      code = cmd_ablate(ctx, ablate_data, ablate_model, components, dry_run);
    } else if (*imp) {
      command = "importance";
      code = cmd_importance(ctx, checkpoint, ckpt_data, repetitions, importance_seed, per_column, groups);
    } else {
      return cmd_rerun(manifest, ctx.out_dir.string(), out, err, depth);
    }
    write_manifest(ctx, command);
    out << "wrote " << (ctx.out_dir / kManifestFile).string() << "\n";
    return code;
  } catch (const Error& e) {
    const int code = exit_code(e.kind());
    return report(err, error_kind_name(e.kind()), code, e.what());
  } catch (const json::exception& e) {
    return report(err, "config", kExitConfig, e.what());
  } catch (const fs::filesystem_error& e) {
    return report(err, "io", kExitIngestion, e.what());
  } catch (const std::exception& e) {
    return report(err, "internal", 1, e.what());
  }
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  return run_impl(args, out, err, 0);
}

}  // namespace stmgt::cli
