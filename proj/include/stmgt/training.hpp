#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "stmgt/data.hpp"
#include "stmgt/graphs.hpp"
#include "stmgt/model.hpp"
#include "stmgt/tensor.hpp"

namespace stmgt {

struct TrainConfig {
  std::size_t batch_size = 36;
  std::size_t epochs = 300;
  double learning_rate = 0.005;
  std::uint64_t seed = 42;
  std::size_t patience = 0;          // epochs without val improvement before stopping; 0 disables
  std::size_t lr_decay_every = 0;    // step decay period in epochs; 0 keeps the rate constant
  double lr_decay_factor = 1.0;
  std::size_t checkpoint_every = 0;  // epochs between periodic checkpoints; 0 disables
  std::string checkpoint_dir;

  void validate() const;
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_loss = std::numeric_limits<double>::quiet_NaN();  // NaN without a validation split
  double seconds = 0.0;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;  // 1-based; 0 means the initial parameters were kept
  double best_val_loss = std::numeric_limits<double>::infinity();
  std::uint64_t steps = 0;
  bool stopped_early = false;
};

/// Mean squared difference over all elements.
Tensor l2_loss(const Tensor& pred, const Tensor& target);

/// What train() needs from a model.
class Trainable {
 public:
  virtual ~Trainable() = default;
  virtual std::vector<Tensor> parameters() = 0;
  /// Prediction with the shape of batch.targets.
  virtual Tensor predict(const Batch& batch) = 0;
  /// Periodic checkpoint hook; `epoch` is 1-based.
  virtual void write_checkpoint(const std::string& /*dir*/, std::size_t /*epoch*/) {}
};

class StmgtModel : public Trainable {
 public:
  StmgtModel(ModelConfig config, RelationSet relations);
  StmgtModel(ModelConfig config, RelationSet relations, ModelParams params);

  std::vector<Tensor> parameters() override { return params_.list(config_); }
  Tensor predict(const Batch& batch) override;

  const ModelConfig& config() const { return config_; }
  const RelationSet& relations() const { return relations_; }
  RelationSet& relations() { return relations_; }
  ModelParams& params() { return params_; }
  const ModelParams& params() const { return params_; }

  std::function<void(const std::string&, std::size_t)> checkpoint_writer;
  void write_checkpoint(const std::string& dir, std::size_t epoch) override {
    if (checkpoint_writer) checkpoint_writer(dir, epoch);
  }

 private:
  ModelConfig config_;
  RelationSet relations_;
  ModelParams params_;
};

/// Per-node linear map from the T-step input window to the M horizon
/// values, shared across nodes (the output head alone, no spatial or
/// temporal blocks).
class LinearHeadModel : public Trainable {
 public:
  LinearHeadModel(std::size_t input_len, std::size_t horizon, std::uint64_t seed);
  std::vector<Tensor> parameters() override { return {weight, bias}; }
  Tensor predict(const Batch& batch) override;

  Tensor weight;  // T x M
  Tensor bias;    // M
};

/// Mini-batch Adam on l2_loss with a seeded shuffle per epoch; the last
/// partial batch is kept. With a non-empty `val`, the parameters with the
/// lowest validation loss are restored at the end.
TrainHistory train(Trainable& model, const WindowedDataset& train_set, const WindowedDataset* val,
                   const TrainConfig& config, const std::function<void(const EpochRecord&)>& on_epoch = {});

/// Mean l2_loss over `ds` (sample-weighted), without recording history.
double evaluate_loss(Trainable& model, const WindowedDataset& ds, std::size_t batch_size);

/// Model output for every sample, flattened sample-major: index
/// (s * N + i) * M + m. Values are in model (normalised) units.
std::vector<double> predict_dataset(Trainable& model, const WindowedDataset& ds, std::size_t batch_size);

/// `epoch,train_loss,val_loss,seconds`
std::string history_csv(const TrainHistory& history);

// ---- configuration as JSON ----

nlohmann::json to_json(const ModelConfig& config);
/// Fields missing from `j` keep their value in `base`; unknown keys raise
/// ConfigError.
ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig base = {});
nlohmann::json to_json(const TrainConfig& config);
TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {});

// ---- checkpoints ----

inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  ModelConfig config;
  ModelParams params;
  std::vector<std::string> zone_ids;
  DemandStats demand_stats;
  std::vector<double> weather_mean, weather_std;
  nlohmann::json extra = nlohmann::json::object();
};

/// Directory with manifest.json and one raw little-endian float64 file per
/// named tensor (`tensors/<name>.bin`).
void save_checkpoint(const Checkpoint& ckpt, const std::string& dir);
/// ContractError on version mismatch, missing tensors, or a shape that
/// disagrees with the stored config (the message names the tensor).
Checkpoint load_checkpoint(const std::string& dir);

}  // namespace stmgt
