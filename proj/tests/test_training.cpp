#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "gradcheck.hpp"
#include "stmgt/error.hpp"
#include "stmgt/ops.hpp"
#include "stmgt/synth.hpp"
#include "stmgt/training.hpp"

using namespace stmgt;
using stmgt::testing::gradcheck;
using stmgt::testing::random_tensor;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("stmgt_test_training_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

struct TinySetup {
  ModelConfig config;
  RelationSet relations;
  WindowedDataset train, val;
  DemandStats stats;
};

TinySetup tiny_setup(std::size_t hours = 90) {
  SynthConfig sc;
  sc.n_zones = 3;
  sc.grid_cols = 3;
  sc.hours = hours;
  auto city = generate_city(sc);
  TinySetup s;
  s.config.input_len = 4;
  s.config.horizon = 1;
  s.config.blocks = 1;
  s.config.d_model = 8;
  s.config.heads = 2;
  s.config.gcn_hidden = 4;
  s.config.gcn_filters = 3;
  s.config.seed = 9;
  s.relations = city_relations(city);
  s.config.relations = s.relations.kinds();
  const std::size_t cut = hours * 2 / 3;
  auto splits = split_by_dates(city.demand, city.demand.start + static_cast<Hour>(cut), city.demand.hour_at(hours - 1) + 1);
  s.stats = compute_demand_stats(splits.train);
  auto weather = join_weather(city.weather, city.demand, cut);
  s.train = make_windows(splits.train, 4, 1, &s.stats, &weather, SplitTag::Train);
  s.val = make_windows(splits.val, 4, 1, &s.stats, &weather, SplitTag::Val);
  return s;
}

// Solves A x = b by Gaussian elimination with partial pivoting.
std::vector<double> solve(std::vector<std::vector<double>> a, std::vector<double> b) {
  const std::size_t n = b.size();
  for (std::size_t c = 0; c < n; ++c) {
    std::size_t piv = c;
    for (std::size_t r = c + 1; r < n; ++r)
      if (std::abs(a[r][c]) > std::abs(a[piv][c])) piv = r;
    std::swap(a[c], a[piv]);
    std::swap(b[c], b[piv]);
    for (std::size_t r = c + 1; r < n; ++r) {
      const double f = a[r][c] / a[c][c];
      for (std::size_t k = c; k < n; ++k) a[r][k] -= f * a[c][k];
      b[r] -= f * b[c];
    }
  }
  std::vector<double> x(n);
  for (std::size_t c = n; c-- > 0;) {
    double s = b[c];
    for (std::size_t k = c + 1; k < n; ++k) s -= a[c][k] * x[k];
    x[c] = s / a[c][c];
  }
  return x;
}

}  // namespace

TEST(L2Loss, Examples) {
  auto p = random_tensor({2, 3, 1}, 1, -1, 1, false);
  EXPECT_EQ(l2_loss(p, p).item(), 0.0);
  auto ones = p.vec();
  for (auto& v : ones) v += 1.0;
  EXPECT_DOUBLE_EQ(l2_loss(Tensor(p.shape(), ones), p).item(), 1.0);
  EXPECT_THROW(l2_loss(p, Tensor::zeros({3, 2, 1})), DimensionError);
}

TEST(L2Loss, GradientIsScaledResidual) {
  auto pred = random_tensor({3, 4, 2}, 2, -2, 2);
  auto target = random_tensor({3, 4, 2}, 3, -2, 2, false);
  auto loss = l2_loss(pred, target);
  loss.backward();
  for (std::size_t k = 0; k < pred.size(); ++k)
    EXPECT_NEAR(pred.grad()[k], 2.0 * (pred[k] - target[k]) / 24.0, 1e-15);
  auto r = gradcheck([&] { return l2_loss(pred, target); }, {{"pred", pred}});
  EXPECT_LT(r.max_rel_error, 1e-8);
}

TEST(TrainConfig, Validation) {
  TrainConfig tc;
  EXPECT_NO_THROW(tc.validate());
  tc.batch_size = 0;
  EXPECT_THROW(tc.validate(), ConfigError);
  tc = {};
  tc.learning_rate = 0.0;
  EXPECT_THROW(tc.validate(), ConfigError);
}

TEST(Train, ZeroEpochsLeavesParameters) {
  auto s = tiny_setup();
  StmgtModel model(s.config, s.relations);
  auto before = init_params(s.config).named(s.config);
  TrainConfig tc;
  tc.epochs = 0;
  auto history = train(model, s.train, &s.val, tc);
  EXPECT_TRUE(history.epochs.empty());
  EXPECT_EQ(history.best_epoch, 0u);
  auto after = model.params().named(s.config);
  for (std::size_t i = 0; i < before.size(); ++i) EXPECT_EQ(before[i].second.vec(), after[i].second.vec());
}

TEST(Train, EmptyDatasetIsContractError) {
  auto s = tiny_setup();
  StmgtModel model(s.config, s.relations);
  WindowedDataset empty = s.train;
  empty.samples.clear();
  EXPECT_THROW(train(model, empty, nullptr, TrainConfig{}), ContractError);
}

TEST(Train, NonFiniteLossNamesBatch) {
  auto s = tiny_setup();
  StmgtModel model(s.config, s.relations);
  model.params().head_b.mutable_values()[0] = std::nan("");
  TrainConfig tc;
  tc.epochs = 1;
  try {
    train(model, s.train, nullptr, tc);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("batch 0"), std::string::npos) << e.what();
  }
}

TEST(Train, DeterministicTrajectories) {
  auto s = tiny_setup();
  TrainConfig tc;
  tc.epochs = 3;
  tc.batch_size = 7;
  StmgtModel a(s.config, s.relations), b(s.config, s.relations);
  auto ha = train(a, s.train, &s.val, tc);
  auto hb = train(b, s.train, &s.val, tc);
  ASSERT_EQ(ha.epochs.size(), 3u);
  for (std::size_t e = 0; e < 3; ++e) {
    EXPECT_NEAR(ha.epochs[e].train_loss, hb.epochs[e].train_loss, 1e-12);
    EXPECT_NEAR(ha.epochs[e].val_loss, hb.epochs[e].val_loss, 1e-12);
  }
  EXPECT_EQ(ha.steps, 3u * ((s.train.size() + 6) / 7));  // partial last batch kept
}

TEST(Train, BestValidationIsRestored) {
  auto s = tiny_setup();
  TrainConfig tc;
  tc.epochs = 8;
  tc.batch_size = 8;
  tc.learning_rate = 0.02;
  StmgtModel model(s.config, s.relations);
  auto h = train(model, s.train, &s.val, tc);
  ASSERT_GE(h.best_epoch, 1u);
  double min_val = INFINITY;
  for (const auto& e : h.epochs) min_val = std::min(min_val, e.val_loss);
  EXPECT_EQ(h.best_val_loss, min_val);
  EXPECT_LE(h.best_val_loss, h.epochs.back().val_loss);
  EXPECT_NEAR(evaluate_loss(model, s.val, 5), h.best_val_loss, 1e-12);
}

TEST(Train, EarlyStoppingAndHistoryCsv) {
  auto s = tiny_setup();
  TrainConfig tc;
  tc.epochs = 50;
  tc.patience = 1;
  tc.learning_rate = 0.2;  // noisy enough to stall validation quickly
  StmgtModel model(s.config, s.relations);
  std::size_t callbacks = 0;
  auto h = train(model, s.train, &s.val, tc, [&](const EpochRecord&) { ++callbacks; });
  EXPECT_EQ(callbacks, h.epochs.size());
  if (h.stopped_early) {
    EXPECT_LT(h.epochs.size(), 50u);
    EXPECT_EQ(h.epochs.size(), h.best_epoch + 1);
  }
  auto csv = history_csv(h);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "epoch,train_loss,val_loss,seconds");
  EXPECT_EQ(static_cast<std::size_t>(std::count(csv.begin(), csv.end(), '\n')), h.epochs.size() + 1);
}

TEST(Train, LinearHeadReachesLeastSquares) {
  // Inputs and targets from a noisy linear rule; the closed form solves the
  // normal equations over every (sample, node) row.
  const std::size_t T = 3, N = 2, S = 150;
  std::mt19937_64 rng(5);
  std::normal_distribution<double> z(0.0, 1.0);
  WindowedDataset ds;
  ds.n_nodes = N;
  ds.input_len = T;
  ds.horizon = 1;
  const double true_w[] = {0.7, -0.4, 1.3}, true_b = 0.25;
  for (std::size_t s = 0; s < S; ++s) {
    Sample sample;
    for (std::size_t i = 0; i < N; ++i) {
      double y = true_b;
      for (std::size_t t = 0; t < T; ++t) {
        const double x = z(rng);
        sample.input.push_back(x);
        y += true_w[t] * x;
      }
      sample.target.push_back(y + 0.3 * z(rng));
    }
    sample.raw_target = sample.target;
    ds.samples.push_back(sample);
  }
  std::vector<std::vector<double>> xtx(T + 1, std::vector<double>(T + 1, 0.0));
  std::vector<double> xty(T + 1, 0.0);
  for (const auto& sample : ds.samples)
    for (std::size_t i = 0; i < N; ++i) {
      std::vector<double> row(sample.input.begin() + i * T, sample.input.begin() + (i + 1) * T);
      row.push_back(1.0);
      for (std::size_t a = 0; a <= T; ++a) {
        xty[a] += row[a] * sample.target[i];
        for (std::size_t b = 0; b <= T; ++b) xtx[a][b] += row[a] * row[b];
      }
    }
  const auto closed = solve(xtx, xty);

  LinearHeadModel model(T, 1, 3);
  TrainConfig tc;
  tc.epochs = 3000;
  tc.batch_size = S;
  tc.learning_rate = 0.05;
  tc.lr_decay_every = 500;
  tc.lr_decay_factor = 0.3;
  train(model, ds, nullptr, tc);
  for (std::size_t t = 0; t < T; ++t) EXPECT_NEAR(model.weight[t], closed[t], 1e-3);
  EXPECT_NEAR(model.bias[0], closed[T], 1e-3);
}

namespace {

TrainHistory single_batch_run(double learning_rate) {
  auto s = tiny_setup();
  WindowedDataset batch = s.train;
  batch.samples.resize(36);
  TrainConfig tc;
  tc.epochs = 200;
  tc.batch_size = 36;
  tc.learning_rate = learning_rate;
  StmgtModel model(s.config, s.relations);
  return train(model, batch, nullptr, tc);
}

}  // namespace

TEST(TrainProperties, SingleBatchLossNonIncreasing) {
  // Adam's momentum overshoots at lr 1e-3 on this problem (rises of a few
  // 1e-3), so the strict property is asserted at 1e-4.
  auto h = single_batch_run(1e-4);
  ASSERT_EQ(h.epochs.size(), 200u);
  std::size_t violations = 0;
  for (std::size_t e = 1; e < h.epochs.size(); ++e) {
    const double rise = h.epochs[e].train_loss - h.epochs[e - 1].train_loss;
    if (rise > 0) {
      ++violations;
      EXPECT_LT(rise, 1e-6) << "step " << e + 1;
    }
  }
  EXPECT_LE(violations, 5u);
}

TEST(TrainProperties, SingleBatchLossFallsAtDefaultScaleRate) {
  auto h = single_batch_run(1e-3);
  double best = h.epochs.front().train_loss;
  for (const auto& e : h.epochs) best = std::min(best, e.train_loss);
  EXPECT_LT(h.epochs.back().train_loss, 0.5 * h.epochs.front().train_loss);
  EXPECT_LT(h.epochs.back().train_loss, best + 0.01);
}

TEST(TrainProperties, OverfitsEightSamples) {
  auto s = tiny_setup();
  WindowedDataset small = s.train;
  small.samples.resize(8);
  TrainConfig tc;
  tc.epochs = 2000;
  tc.batch_size = 8;
  tc.learning_rate = 0.005;
  StmgtModel model(s.config, s.relations);
  std::size_t reached = 0;
  auto h = train(model, small, nullptr, tc, [&](const EpochRecord& e) {
    if (!reached && e.train_loss < 1e-3) reached = e.epoch;
  });
  EXPECT_EQ(h.steps, 2000u);
  EXPECT_GT(reached, 0u) << "lowest loss stayed above 1e-3";
}

TEST(Checkpoint, RoundTripIsBitExact) {
  auto s = tiny_setup();
  TrainConfig tc;
  tc.epochs = 2;
  StmgtModel model(s.config, s.relations);
  train(model, s.train, nullptr, tc);
  Checkpoint ckpt{s.config, model.params(), s.relations.zone_ids, s.stats, {1.0, 2.0, 3.0}, {0.5, 0.25, 4.0}, {}};
  ckpt.extra["note"] = "round trip";
  auto dir = scratch_dir("roundtrip");
  save_checkpoint(ckpt, dir.string());
  auto back = load_checkpoint(dir.string());
  EXPECT_EQ(to_json(back.config), to_json(s.config));
  EXPECT_EQ(back.zone_ids, s.relations.zone_ids);
  EXPECT_EQ(back.demand_stats.mean, s.stats.mean);
  EXPECT_EQ(back.demand_stats.std, s.stats.std);
  EXPECT_EQ(back.weather_std, ckpt.weather_std);
  EXPECT_EQ(back.extra["note"], "round trip");
  auto a = model.params().named(s.config), b = back.params.named(back.config);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].first, b[i].first);
    EXPECT_EQ(a[i].second.vec(), b[i].second.vec()) << a[i].first;
  }
  StmgtModel reloaded(back.config, s.relations, back.params);
  EXPECT_EQ(predict_dataset(model, s.val, 5), predict_dataset(reloaded, s.val, 5));
}

TEST(Checkpoint, TamperedShapeAndVersion) {
  auto s = tiny_setup();
  Checkpoint ckpt{s.config, init_params(s.config), s.relations.zone_ids, s.stats, {}, {}, {}};
  auto dir = scratch_dir("tamper");
  save_checkpoint(ckpt, dir.string());
  const auto manifest_path = dir / "manifest.json";
  nlohmann::json original;
  std::ifstream(manifest_path) >> original;

  auto tampered = original;
  for (auto& t : tampered["tensors"])
    if (t["name"] == "head.w") t["shape"] = {9, 1};
  std::ofstream(manifest_path) << tampered.dump();
  try {
    load_checkpoint(dir.string());
    FAIL() << "expected ContractError";
  } catch (const ContractError& e) {
    EXPECT_NE(std::string(e.what()).find("head.w"), std::string::npos) << e.what();
  }

  auto wrong_version = original;
  wrong_version["version"] = kCheckpointVersion + 1;
  std::ofstream(manifest_path) << wrong_version.dump();
  try {
    load_checkpoint(dir.string());
    FAIL() << "expected ContractError";
  } catch (const ContractError& e) {
    EXPECT_NE(std::string(e.what()).find("version"), std::string::npos) << e.what();
  }
}

TEST(Checkpoint, PeriodicWrites) {
  auto s = tiny_setup();
  StmgtModel model(s.config, s.relations);
  std::vector<std::size_t> written;
  model.checkpoint_writer = [&](const std::string& dir, std::size_t epoch) {
    written.push_back(epoch);
    save_checkpoint({s.config, model.params(), s.relations.zone_ids, s.stats, {}, {}, {}}, dir);
  };
  TrainConfig tc;
  tc.epochs = 4;
  tc.checkpoint_every = 2;
  tc.checkpoint_dir = scratch_dir("periodic").string();
  train(model, s.train, nullptr, tc);
  EXPECT_EQ(written, (std::vector<std::size_t>{2, 4}));
  EXPECT_TRUE(fs::exists(fs::path(tc.checkpoint_dir) / "epoch_2" / "manifest.json"));
}

TEST(ConfigJson, RoundTripAndUnknownKeys) {
  ModelConfig c;
  c.blocks = 2;
  c.relations = {Relation::Functional, Relation::TransportSupply};
  c.gcn_output = GcnOutput::Linear;
  auto j = to_json(c);
  EXPECT_EQ(j["ffn_dim"], 128);
  EXPECT_EQ(to_json(model_config_from_json(j)), j);
  auto partial = model_config_from_json(nlohmann::json{{"blocks", 5}});
  EXPECT_EQ(partial.blocks, 5u);
  EXPECT_EQ(partial.d_model, ModelConfig{}.d_model);
  EXPECT_THROW(model_config_from_json(nlohmann::json{{"blokcs", 5}}), ConfigError);

  TrainConfig tc;
  tc.learning_rate = 0.01;
  EXPECT_EQ(to_json(train_config_from_json(to_json(tc))), to_json(tc));
  EXPECT_THROW(train_config_from_json(nlohmann::json{{"lr", 1}}), ConfigError);
  auto defaults = to_json(TrainConfig{});
  EXPECT_EQ(defaults["batch_size"], 36);
  EXPECT_EQ(defaults["epochs"], 300);
  EXPECT_EQ(defaults["learning_rate"], 0.005);
}
