#include "stmgt/training.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "stmgt/adam.hpp"
#include "stmgt/csv.hpp"
#include "stmgt/error.hpp"
#include "stmgt/layers.hpp"
#include "stmgt/ops.hpp"
#include "stmgt/random.hpp"

namespace stmgt {

using nlohmann::json;

void TrainConfig::validate() const {
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate must be > 0");
  if (!(lr_decay_factor > 0.0)) throw ConfigError("lr_decay_factor must be > 0");
}

Tensor l2_loss(const Tensor& pred, const Tensor& target) {
  if (pred.shape() != target.shape())
    throw DimensionError("l2_loss: prediction " + shape_str(pred.shape()) + " vs target " +
                         shape_str(target.shape()));
  return mse_loss(pred, target);
}

StmgtModel::StmgtModel(ModelConfig config, RelationSet relations)
    : StmgtModel(config, std::move(relations), init_params(config)) {}

StmgtModel::StmgtModel(ModelConfig config, RelationSet relations, ModelParams params)
    : config_(std::move(config)), relations_(std::move(relations)), params_(std::move(params)) {
  config_.validate();
}

Tensor StmgtModel::predict(const Batch& batch) {
  return stmgt_forward_batch(batch.inputs, relations_, batch.weather, params_, config_);
}

LinearHeadModel::LinearHeadModel(std::size_t input_len, std::size_t horizon, std::uint64_t seed) {
  std::mt19937_64 rng(derive_seed(seed, "linear_head.w"));
  weight = glorot_uniform({input_len, horizon}, rng);
  bias = Tensor::zeros({horizon}, true);
}

Tensor LinearHeadModel::predict(const Batch& batch) { return linear(batch.inputs, weight, bias); }

namespace {

std::vector<std::vector<std::size_t>> batches_of(const std::vector<std::size_t>& order, std::size_t batch_size) {
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < order.size(); i += batch_size)
    out.emplace_back(order.begin() + i, order.begin() + std::min(order.size(), i + batch_size));
  return out;
}

std::vector<std::size_t> iota_order(std::size_t n) {
  std::vector<std::size_t> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = i;
  return v;
}

std::vector<std::vector<double>> snapshot(const std::vector<Tensor>& params) {
  std::vector<std::vector<double>> out;
  out.reserve(params.size());
  for (const auto& p : params) out.push_back(p.vec());
  return out;
}

void restore(std::vector<Tensor>& params, const std::vector<std::vector<double>>& values) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto dst = params[i].mutable_values();
    std::copy(values[i].begin(), values[i].end(), dst.begin());
  }
}

}  // namespace

double evaluate_loss(Trainable& model, const WindowedDataset& ds, std::size_t batch_size) {
  if (ds.empty()) throw ContractError("evaluate_loss: empty dataset");
  NoGradGuard guard;
  double total = 0.0;
  for (const auto& idx : batches_of(iota_order(ds.size()), batch_size)) {
    const auto batch = make_batch(ds, idx);
    total += l2_loss(model.predict(batch), batch.targets).item() * static_cast<double>(idx.size());
  }
  return total / static_cast<double>(ds.size());
}

std::vector<double> predict_dataset(Trainable& model, const WindowedDataset& ds, std::size_t batch_size) {
  NoGradGuard guard;
  const std::size_t n = ds.n_nodes, m = ds.horizon;
  std::vector<double> out(ds.size() * n * m);
  for (const auto& idx : batches_of(iota_order(ds.size()), batch_size)) {
    const auto batch = make_batch(ds, idx);
    const auto pred = model.predict(batch);  // N x B x M
    const std::size_t b = idx.size();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < b; ++k)
        for (std::size_t h = 0; h < m; ++h) out[(idx[k] * n + i) * m + h] = pred[(i * b + k) * m + h];
  }
  return out;
}

TrainHistory train(Trainable& model, const WindowedDataset& train_set, const WindowedDataset* val,
                   const TrainConfig& config, const std::function<void(const EpochRecord&)>& on_epoch) {
  config.validate();
  if (train_set.empty()) throw ContractError("train: the training split has no samples");
  const bool has_val = val && !val->empty();
  auto params = model.parameters();
  for (auto& p : params) p.zero_grad();
  AdamState adam(params, AdamOptions{config.learning_rate});
  std::mt19937_64 rng(derive_seed(config.seed, "shuffle"));

  TrainHistory history;
  std::vector<std::vector<double>> best;
  std::size_t since_best = 0;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    if (config.lr_decay_every > 0)
      adam.set_learning_rate(config.learning_rate *
                             std::pow(config.lr_decay_factor, static_cast<double>((epoch - 1) / config.lr_decay_every)));
    const auto order = random_permutation(train_set.size(), rng);
    double total = 0.0;
    const auto batches = batches_of(order, config.batch_size);
    for (std::size_t b = 0; b < batches.size(); ++b) {
      const auto batch = make_batch(train_set, batches[b]);
      auto loss = l2_loss(model.predict(batch), batch.targets);
      const double value = loss.item();
      if (!std::isfinite(value))
        throw NumericError("non-finite training loss at epoch " + std::to_string(epoch) + ", batch " +
                           std::to_string(b));
      loss.backward();
      adam_step(params, adam);
      ++history.steps;
      total += value * static_cast<double>(batches[b].size());
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = total / static_cast<double>(train_set.size());
    if (has_val) {
      rec.val_loss = evaluate_loss(model, *val, config.batch_size);
      if (!std::isfinite(rec.val_loss))
        throw NumericError("non-finite validation loss at epoch " + std::to_string(epoch));
      if (rec.val_loss < history.best_val_loss) {
        history.best_val_loss = rec.val_loss;
        history.best_epoch = epoch;
        best = snapshot(params);
        since_best = 0;
      } else {
        ++since_best;
      }
    } else {
      history.best_epoch = epoch;
    }
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    history.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);
    if (config.checkpoint_every > 0 && !config.checkpoint_dir.empty() && epoch % config.checkpoint_every == 0)
      model.write_checkpoint((std::filesystem::path(config.checkpoint_dir) / ("epoch_" + std::to_string(epoch))).string(),
                             epoch);
    if (has_val && config.patience > 0 && since_best >= config.patience) {
      history.stopped_early = true;
      break;
    }
  }
  if (has_val && !best.empty()) restore(params, best);
  return history;
}

std::string history_csv(const TrainHistory& history) {
  std::ostringstream os;
  os << "epoch,train_loss,val_loss,seconds\n";
  for (const auto& e : history.epochs)
    os << e.epoch << ',' << csv::format_double(e.train_loss) << ','
       << (std::isnan(e.val_loss) ? std::string() : csv::format_double(e.val_loss)) << ','
       << csv::format_double(e.seconds) << '\n';
  return os.str();
}

// ---- configuration as JSON ----

namespace {

const char* gcn_output_name(GcnOutput o) { return o == GcnOutput::Softmax ? "softmax" : "linear"; }

GcnOutput parse_gcn_output(const std::string& s) {
  if (s == "softmax") return GcnOutput::Softmax;
  if (s == "linear") return GcnOutput::Linear;
  throw ConfigError("gcn_output must be 'softmax' or 'linear', got '" + s + "'");
}

template <typename T>
void take(const json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config field '") + key + "': " + e.what());
  }
}

void reject_unknown(const json& j, std::initializer_list<const char*> known, const char* what) {
  if (!j.is_object()) throw ConfigError(std::string(what) + " must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (const char* k : known) ok = ok || key == k;
    if (!ok) throw ConfigError(std::string("unknown ") + what + " field '" + key + "'");
  }
}

}  // namespace

json to_json(const ModelConfig& c) {
  json rel = json::array();
  for (auto r : c.relations) rel.push_back(relation_name(r));
  return {{"input_len", c.input_len},
          {"horizon", c.horizon},
          {"blocks", c.blocks},
          {"layers_per_block", c.layers_per_block},
          {"d_model", c.d_model},
          {"heads", c.heads},
          {"ffn_dim", c.ffn_width()},
          {"input_channels", c.input_channels},
          {"gcn_hidden", c.gcn_hidden},
          {"gcn_filters", c.gcn_filters},
          {"weather_features", c.weather_features},
          {"weather_dim", c.weather_dim},
          {"weather_enabled", c.weather_enabled},
          {"relations", rel},
          {"gcn_output", gcn_output_name(c.gcn_output)},
          {"seed", c.seed}};
}

ModelConfig model_config_from_json(const json& j, ModelConfig c) {
  reject_unknown(j,
                 {"input_len", "horizon", "blocks", "layers_per_block", "d_model", "heads", "ffn_dim",
                  "input_channels", "gcn_hidden", "gcn_filters", "weather_features", "weather_dim",
                  "weather_enabled", "relations", "gcn_output", "seed"},
                 "model");
  take(j, "input_len", c.input_len);
  take(j, "horizon", c.horizon);
  take(j, "blocks", c.blocks);
  take(j, "layers_per_block", c.layers_per_block);
  take(j, "d_model", c.d_model);
  take(j, "heads", c.heads);
  take(j, "ffn_dim", c.ffn_dim);
  take(j, "input_channels", c.input_channels);
  take(j, "gcn_hidden", c.gcn_hidden);
  take(j, "gcn_filters", c.gcn_filters);
  take(j, "weather_features", c.weather_features);
  take(j, "weather_dim", c.weather_dim);
  take(j, "weather_enabled", c.weather_enabled);
  take(j, "seed", c.seed);
  if (j.contains("relations")) {
    std::vector<std::string> names;
    take(j, "relations", names);
    c.relations.clear();
    for (const auto& n : names) c.relations.push_back(parse_relation(n));
    std::sort(c.relations.begin(), c.relations.end());
  }
  if (j.contains("gcn_output")) {
    std::string s;
    take(j, "gcn_output", s);
    c.gcn_output = parse_gcn_output(s);
  }
  c.validate();
  return c;
}

json to_json(const TrainConfig& c) {
  return {{"batch_size", c.batch_size},
          {"epochs", c.epochs},
          {"learning_rate", c.learning_rate},
          {"seed", c.seed},
          {"patience", c.patience},
          {"lr_decay_every", c.lr_decay_every},
          {"lr_decay_factor", c.lr_decay_factor},
          {"checkpoint_every", c.checkpoint_every},
          {"checkpoint_dir", c.checkpoint_dir}};
}

TrainConfig train_config_from_json(const json& j, TrainConfig c) {
  reject_unknown(j,
                 {"batch_size", "epochs", "learning_rate", "seed", "patience", "lr_decay_every", "lr_decay_factor",
                  "checkpoint_every", "checkpoint_dir"},
                 "training");
  take(j, "batch_size", c.batch_size);
  take(j, "epochs", c.epochs);
  take(j, "learning_rate", c.learning_rate);
  take(j, "seed", c.seed);
  take(j, "patience", c.patience);
  take(j, "lr_decay_every", c.lr_decay_every);
  take(j, "lr_decay_factor", c.lr_decay_factor);
  take(j, "checkpoint_every", c.checkpoint_every);
  take(j, "checkpoint_dir", c.checkpoint_dir);
  c.validate();
  return c;
}

// ---- checkpoints ----

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint tensors are stored little-endian");

std::string tensor_file(const std::string& name) { return "tensors/" + name + ".bin"; }

void write_bin(const std::filesystem::path& path, const std::vector<double>& values) {
  std::ofstream out(path, std::ios::binary);
  out.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(double)));
  if (!out) throw IngestionError("cannot write " + path.string());
}

std::vector<double> read_bin(const std::filesystem::path& path, std::size_t count, const std::string& name) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw ContractError("checkpoint tensor '" + name + "' missing (" + path.string() + ")");
  const auto bytes = static_cast<std::size_t>(in.tellg());
  if (bytes != count * sizeof(double))
    throw ContractError("checkpoint tensor '" + name + "' holds " + std::to_string(bytes / sizeof(double)) +
                        " values, expected " + std::to_string(count));
  std::vector<double> values(count);
  in.seekg(0);
  in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(bytes));
  return values;
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "tensors");
  json tensors = json::array();
  for (const auto& [name, t] : ckpt.params.named(ckpt.config)) {
    write_bin(fs::path(dir) / tensor_file(name), t.vec());
    tensors.push_back({{"name", name}, {"shape", t.shape()}, {"file", tensor_file(name)}});
  }
  json manifest = {{"format", "stmgt-checkpoint"},
                   {"version", kCheckpointVersion},
                   {"config", to_json(ckpt.config)},
                   {"seed", ckpt.config.seed},
                   {"relations", to_json(ckpt.config)["relations"]},
                   {"zone_ids", ckpt.zone_ids},
                   {"demand_stats", {{"mean", ckpt.demand_stats.mean}, {"std", ckpt.demand_stats.std}}},
                   {"weather_stats", {{"mean", ckpt.weather_mean}, {"std", ckpt.weather_std}}},
                   {"tensors", tensors},
                   {"extra", ckpt.extra}};
  csv::write_text((fs::path(dir) / "manifest.json").string(), manifest.dump(2) + "\n");
}

Checkpoint load_checkpoint(const std::string& dir) {
  namespace fs = std::filesystem;
  const auto path = fs::path(dir) / "manifest.json";
  std::ifstream in(path);
  if (!in) throw IngestionError("no checkpoint manifest at " + path.string());
  json m;
  try {
    m = json::parse(in);
  } catch (const json::exception& e) {
    throw IngestionError(path.string() + ": " + e.what());
  }
  const int version = m.value("version", -1);
  if (m.value("format", std::string()) != "stmgt-checkpoint" || version != kCheckpointVersion)
    throw ContractError("incompatible checkpoint version " + std::to_string(version) + " at " + dir +
                        " (this build reads version " + std::to_string(kCheckpointVersion) + ")");
  Checkpoint ckpt;
  try {
    ckpt.config = model_config_from_json(m.at("config"));
    ckpt.zone_ids = m.at("zone_ids").get<std::vector<std::string>>();
    ckpt.demand_stats.mean = m.at("demand_stats").at("mean").get<std::vector<double>>();
    ckpt.demand_stats.std = m.at("demand_stats").at("std").get<std::vector<double>>();
    ckpt.weather_mean = m.at("weather_stats").at("mean").get<std::vector<double>>();
    ckpt.weather_std = m.at("weather_stats").at("std").get<std::vector<double>>();
    ckpt.extra = m.value("extra", json::object());
  } catch (const json::exception& e) {
    throw ContractError(path.string() + ": " + e.what());
  }
  std::map<std::string, json> listed;
  for (const auto& t : m.at("tensors")) listed[t.at("name").get<std::string>()] = t;
  ckpt.params = init_params(ckpt.config);
  for (auto& [name, tensor] : ckpt.params.named(ckpt.config)) {
    const auto it = listed.find(name);
    if (it == listed.end()) throw ContractError("checkpoint tensor '" + name + "' missing from manifest");
    const auto shape = it->second.at("shape").get<Shape>();
    if (shape != tensor.shape())
      throw ContractError("checkpoint tensor '" + name + "' has shape " + shape_str(shape) + ", config expects " +
                          shape_str(tensor.shape()));
    const auto values = read_bin(fs::path(dir) / it->second.at("file").get<std::string>(), tensor.size(), name);
    auto dst = tensor.mutable_values();
    std::copy(values.begin(), values.end(), dst.begin());
    listed.erase(it);
  }
  if (!listed.empty()) throw ContractError("checkpoint has unexpected tensor '" + listed.begin()->first + "'");
  return ckpt;
}

}  // namespace stmgt
