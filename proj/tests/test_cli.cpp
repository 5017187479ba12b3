#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "cli.hpp"
#include "stmgt/data.hpp"
#include "stmgt/graphs.hpp"
#include "stmgt/model.hpp"
#include "stmgt/synth.hpp"
#include "stmgt/training.hpp"

using namespace stmgt;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result run(std::vector<std::string> args) {
  args.insert(args.begin(), "stmgt");
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void spit(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

json read_json(const fs::path& p) { return json::parse(slurp(p)); }

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("stmgt_test_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

// Synthetic city plus its relation graphs, shared by the command tests.
struct Fixture {
  fs::path root, city, graphs;
  std::vector<std::string> data_args() const {
    return {"--graphs", graphs.string(), "--demand", (city / "demand.csv").string(), "--weather",
            (city / "weather.csv").string()};
  }
};

const Fixture& fixture() {
  static const Fixture f = [] {
    Fixture fx;
    fx.root = scratch("fixture");
    fx.city = fx.root / "city";
    fx.graphs = fx.root / "graphs";
    auto r = run({"synth", "--zones", "6", "--grid-cols", "3", "--hours", "240", "--trips", "--out", fx.city.string()});
    EXPECT_EQ(r.code, 0) << r.err;
    r = run({"build-graphs", "--poi", (fx.city / "poi.csv").string(), "--demographic",
             (fx.city / "demographic.csv").string(), "--transport", (fx.city / "transport.csv").string(), "--edges",
             (fx.city / "edges.csv").string(), "--out", fx.graphs.string()});
    EXPECT_EQ(r.code, 0) << r.err;
    return fx;
  }();
  return f;
}

std::vector<std::string> tiny_model_args() {
  return {"--input-len", "6", "--d-model", "8", "--heads", "2", "--blocks", "1", "--batch-size", "16"};
}

std::vector<std::string> concat(std::vector<std::string> a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

std::string drop_column(const std::string& csv, std::size_t col) {
  std::istringstream in(csv);
  std::string line, out;
  while (std::getline(in, line)) {
    std::vector<std::string> f;
    std::stringstream ls(line);
    for (std::string x; std::getline(ls, x, ',');) f.push_back(x);
    if (col < f.size()) f.erase(f.begin() + static_cast<long>(col));
    for (std::size_t k = 0; k < f.size(); ++k) out += (k ? "," : "") + f[k];
    out += "\n";
  }
  return out;
}

std::size_t line_count(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

}  // namespace

TEST(CliErrors, ExitCodesAndSingleLine) {
  EXPECT_EQ(cli::exit_code(ErrorKind::Config), 2);
  EXPECT_EQ(cli::exit_code(ErrorKind::Ingestion), 3);
  EXPECT_EQ(cli::exit_code(ErrorKind::Numeric), 4);
  auto r = run({"frobnicate"});
  EXPECT_EQ(r.code, 2);
  EXPECT_EQ(line_count(r.err), 1u);
  EXPECT_EQ(r.err.rfind("error code=", 0), 0u) << r.err;

  auto dir = scratch("errors");
  spit(dir / "trips.csv", "zone_id,timestamp\nz00,2021-03-01T00:10\nz01,soon\n");
  r = run(concat({"train", "--graphs", fixture().graphs.string(), "--trips", (dir / "trips.csv").string(), "--out",
                  (dir / "o").string()},
                 {}));
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.err.find("code=E_INGESTION"), std::string::npos) << r.err;
  EXPECT_NE(r.err.find(":3"), std::string::npos) << r.err;
  EXPECT_EQ(line_count(r.err), 1u);

  r = run(concat(concat({"train", "--epochs", "2", "--learning-rate", "1e300", "--out", (dir / "nan").string()},
                        fixture().data_args()),
                 tiny_model_args()));
  EXPECT_EQ(r.code, 4) << r.err;
  EXPECT_NE(r.err.find("code=E_NUMERIC"), std::string::npos) << r.err;

  r = run(concat({"train", "--heads", "3", "--out", (dir / "cfg").string()}, fixture().data_args()));
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("code=E_CONFIG"), std::string::npos) << r.err;
}

TEST(CliBuildGraphs, ForcedEdgeThresholdAndRoundTrip) {
  auto dir = scratch("graphs");
  spit(dir / "poi.csv", "zone_id,a,b,c,d\nz0,1,2,3,4\nz1,1,2,3,4\nz2,4,1,3,2\n");
  spit(dir / "demo.csv", "zone_id,a,b,c,d\nz0,1,0,0,0\nz1,0,1,0,0\nz2,0,0,1,0\n");
  spit(dir / "transport.csv", "zone_id,a,b,c,d\nz0,3,1,2,0\nz1,0,2,1,3\nz2,1,0,3,2\n");
  spit(dir / "edges.csv", "zone_a,zone_b\nz0,z1\nz1,z2\n");
  auto args = [&](const std::string& out) {
    return std::vector<std::string>{"build-graphs", "--poi", (dir / "poi.csv").string(), "--demographic",
                                    (dir / "demo.csv").string(), "--transport", (dir / "transport.csv").string(),
                                    "--edges", (dir / "edges.csv").string(), "--out", (dir / out).string()};
  };
  auto r = run(args("g"));
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("functional 1 "), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("spatial_adjacency 2 "), std::string::npos) << r.out;

  auto loaded = load_relation_set((dir / "g").string());
  auto expected = fuse({build_adjacency_graph(read_edge_list((dir / "edges.csv").string()), {"z0", "z1", "z2"}),
                        build_similarity_graph(read_zone_features((dir / "poi.csv").string()), 0.8, Relation::Functional),
                        build_similarity_graph(read_zone_features((dir / "demo.csv").string()), 0.8, Relation::Demographic),
                        build_similarity_graph(read_zone_features((dir / "transport.csv").string()), 0.8,
                                               Relation::TransportSupply)});
  ASSERT_EQ(loaded.size(), expected.size());
  EXPECT_EQ(loaded.zone_ids, expected.zone_ids);
  for (std::size_t k = 0; k < loaded.size(); ++k) {
    EXPECT_EQ(loaded.graphs[k].kind, expected.graphs[k].kind);
    EXPECT_EQ(loaded.graphs[k].a_hat, expected.graphs[k].a_hat);
  }
  EXPECT_TRUE(fs::exists(dir / "g" / cli::kManifestFile));

  auto bad = args("g2");
  bad.insert(bad.end(), {"--threshold", "1.01"});
  EXPECT_EQ(run(bad).code, 2);

  spit(dir / "demo.csv", "zone_id,a,b,c,d\nz0,1,0,0,0\nz1,0,1,0,0\nz9,0,0,1,0\n");
  r = run(args("g3"));
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.err.find("z9"), std::string::npos) << r.err;
  EXPECT_NE(r.err.find("z2"), std::string::npos) << r.err;
}

TEST(CliTrain, DefaultsEchoInManifest) {
  auto out = scratch("defaults");
  auto r = run(concat({"train", "--dry-run", "--out", out.string()}, fixture().data_args()));
  ASSERT_EQ(r.code, 0) << r.err;
  auto m = read_json(out / cli::kManifestFile);
  EXPECT_EQ(m["command"], "train");
  EXPECT_EQ(m["config"]["train"]["batch_size"], 36);
  EXPECT_EQ(m["config"]["train"]["epochs"], 300);
  EXPECT_EQ(m["config"]["train"]["learning_rate"], 0.005);
  EXPECT_EQ(m["config"]["model"]["input_len"], 24);
  EXPECT_EQ(m["config"]["model"]["blocks"], 3);
  EXPECT_EQ(m["inputs"]["demand"]["sha256"], cli::sha256_file((fixture().city / "demand.csv").string()));
  EXPECT_EQ(m["config"]["data"]["train_end"].get<std::string>().size(), 19u);
}

TEST(CliTrain, ZeroEpochsCheckpointsInitialParams) {
  auto out = scratch("zero");
  auto r = run(concat(concat({"train", "--epochs", "0", "--seed", "13", "--out", out.string()}, fixture().data_args()),
                      tiny_model_args()));
  ASSERT_EQ(r.code, 0) << r.err;
  auto ckpt = load_checkpoint((out / "checkpoint").string());
  EXPECT_EQ(ckpt.config.seed, 13u);
  auto init = init_params(ckpt.config).named(ckpt.config);
  auto saved = ckpt.params.named(ckpt.config);
  ASSERT_EQ(init.size(), saved.size());
  for (std::size_t k = 0; k < init.size(); ++k) EXPECT_EQ(init[k].second.vec(), saved[k].second.vec()) << init[k].first;
  EXPECT_EQ(line_count(slurp(out / "history.csv")), 1u);
}

TEST(CliTrain, IdenticalManifestsReproduceOutputs) {
  auto a = scratch("rep_a"), b = scratch("rep_b"), c = scratch("rep_c");
  auto args = concat(concat({"train", "--epochs", "2", "--seed", "5"}, fixture().data_args()), tiny_model_args());
  auto ra = run(concat(args, {"--out", a.string()}));
  auto rb = run(concat(args, {"--out", b.string()}));
  ASSERT_EQ(ra.code, 0) << ra.err;
  ASSERT_EQ(rb.code, 0) << rb.err;
  EXPECT_EQ(slurp(a / "metrics.csv"), slurp(b / "metrics.csv"));
  EXPECT_EQ(drop_column(slurp(a / "history.csv"), 3), drop_column(slurp(b / "history.csv"), 3));
  auto ma = read_json(a / cli::kManifestFile), mb = read_json(b / cli::kManifestFile);
  EXPECT_EQ(ma["config"], mb["config"]);
  EXPECT_EQ(ma["inputs"], mb["inputs"]);

  auto rc = run({"rerun", (a / cli::kManifestFile).string(), "--out", c.string()});
  ASSERT_EQ(rc.code, 0) << rc.err;
  EXPECT_EQ(slurp(a / "metrics.csv"), slurp(c / "metrics.csv"));
  EXPECT_EQ(slurp(a / "checkpoint" / "manifest.json"), slurp(c / "checkpoint" / "manifest.json"));
}

TEST(CliTrain, RerunRejectsChangedInputs) {
  auto dir = scratch("changed");
  fs::copy(fixture().city / "demand.csv", dir / "demand.csv");
  auto r = run(concat({"train", "--dry-run", "--graphs", fixture().graphs.string(), "--demand",
                       (dir / "demand.csv").string(), "--out", (dir / "a").string()},
                      tiny_model_args()));
  ASSERT_EQ(r.code, 0) << r.err;
  std::ofstream(dir / "demand.csv", std::ios::app) << "\n";
  r = run({"rerun", (dir / "a" / cli::kManifestFile).string(), "--out", (dir / "b").string()});
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.err.find("changed"), std::string::npos) << r.err;
}

TEST(CliTrain, OutputDirectoryFromEnvironment) {
  auto dir = scratch("env");
  ::setenv("STMGT_OUTPUT_DIR", (dir / "from_env").string().c_str(), 1);
  auto r = run({"synth", "--zones", "4", "--grid-cols", "2", "--hours", "48"});
  ::unsetenv("STMGT_OUTPUT_DIR");
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(dir / "from_env" / "demand.csv"));
  EXPECT_TRUE(fs::exists(dir / "from_env" / cli::kManifestFile));
}

TEST(CliEvaluate, SchemaPerHourAndZoneMismatch) {
  auto dir = scratch("evaluate");
  auto r = run(concat(concat({"train", "--epochs", "1", "--out", (dir / "run").string()}, fixture().data_args()),
                      tiny_model_args()));
  ASSERT_EQ(r.code, 0) << r.err;
  r = run(concat({"evaluate", "--checkpoint", (dir / "run" / "checkpoint").string(), "--baseline", "ha", "--per-hour",
                  "--out", (dir / "eval").string()},
                 fixture().data_args()));
  ASSERT_EQ(r.code, 0) << r.err;
  std::istringstream metrics(slurp(dir / "eval" / "metrics.csv"));
  std::string header, model_row, ha_row;
  std::getline(metrics, header);
  std::getline(metrics, model_row);
  std::getline(metrics, ha_row);
  EXPECT_EQ(header, "label,mae,rmse,mape10,smape,count,mape10_count");
  EXPECT_EQ(model_row.substr(0, 6), "stmgt,");
  EXPECT_EQ(ha_row.substr(0, 3), "ha,");
  EXPECT_EQ(std::count(model_row.begin(), model_row.end(), ','), std::count(ha_row.begin(), ha_row.end(), ','));
  EXPECT_LE(line_count(slurp(dir / "eval" / "per_hour.csv")), 25u);
  EXPECT_TRUE(fs::exists(dir / "eval" / "per_hour_ha.csv"));

  r = run(concat({"predict", "--checkpoint", (dir / "run" / "checkpoint").string(), "--out", (dir / "pred").string()},
                 fixture().data_args()));
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(slurp(dir / "pred" / "predictions.csv").substr(0, 40), "zone_id,anchor,timestamp,step,prediction");

  // A relation set over different zones must be refused.
  SynthConfig sc;
  sc.n_zones = 4;
  sc.grid_cols = 2;
  sc.hours = 240;
  auto other = generate_city(sc);
  export_relation_set(city_relations(other), (dir / "other_graphs").string());
  r = run({"evaluate", "--checkpoint", (dir / "run" / "checkpoint").string(), "--graphs",
           (dir / "other_graphs").string(), "--demand", (fixture().city / "demand.csv").string(), "--weather",
           (fixture().city / "weather.csv").string(), "--out", (dir / "bad").string()});
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.err.find("z04"), std::string::npos) << r.err;
}

TEST(CliEvaluate, PerfectOracleCheckpointScoresZero) {
  auto dir = scratch("oracle");
  DemandMatrix dm{{"z00", "z01", "z02", "z03", "z04", "z05"}, parse_hour("2021-03-01"), 240, {}};
  dm.values.assign(6 * 240, 12.0);
  spit(dir / "demand.csv", demand_matrix_csv(dm));
  auto r = run(concat({"train", "--epochs", "0", "--graphs", fixture().graphs.string(), "--demand",
                       (dir / "demand.csv").string(), "--out", (dir / "run").string()},
                      tiny_model_args()));
  ASSERT_EQ(r.code, 0) << r.err;
  auto ckpt = load_checkpoint((dir / "run" / "checkpoint").string());
  for (auto& [name, t] : ckpt.params.named(ckpt.config))
    std::fill(t.mutable_values().begin(), t.mutable_values().end(), 0.0);
  save_checkpoint(ckpt, (dir / "zeroed").string());
  r = run({"evaluate", "--checkpoint", (dir / "zeroed").string(), "--graphs", fixture().graphs.string(), "--demand",
           (dir / "demand.csv").string(), "--out", (dir / "eval").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  auto lines = slurp(dir / "eval" / "metrics.csv");
  EXPECT_NE(lines.find("\nstmgt,0,0,0,0,"), std::string::npos) << lines;
}

TEST(CliAblate, OneRowPerComponentPlusBase) {
  auto dir = scratch("ablate");
  auto r = run(concat(concat({"ablate", "--epochs", "1", "--relations", "spatial_adjacency,functional", "--out",
                              dir.string()},
                             fixture().data_args()),
                      tiny_model_args()));
  ASSERT_EQ(r.code, 0) << r.err;
  auto csv = slurp(dir / "ablation.csv");
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "removed,mae,rmse,mape10,smape");
  EXPECT_EQ(line_count(csv), 1u + 1u + 3u);  // header, full model, 2 relations + weather
  r = run(concat(concat({"ablate", "--dry-run", "--relations", "functional", "--components", "functional", "--out",
                         (dir / "bad").string()},
                        fixture().data_args()),
                 tiny_model_args()));
  EXPECT_EQ(r.code, 2);
}

TEST(CliImportance, RepetitionsAndSchema) {
  auto dir = scratch("importance");
  auto r = run(concat(concat({"train", "--epochs", "1", "--out", (dir / "run").string()}, fixture().data_args()),
                      tiny_model_args()));
  ASSERT_EQ(r.code, 0) << r.err;
  r = run(concat({"importance", "--checkpoint", (dir / "run" / "checkpoint").string(), "--repetitions", "1", "--out",
                  (dir / "imp").string()},
                 fixture().data_args()));
  ASSERT_EQ(r.code, 0) << r.err;
  std::istringstream csv(slurp(dir / "imp" / "importance.csv"));
  std::string line;
  std::getline(csv, line);
  EXPECT_EQ(line, "group,baseline_rmse,permuted_rmse,importance,repetitions");
  std::size_t rows = 0;
  while (std::getline(csv, line)) {
    ++rows;
    EXPECT_EQ(line.substr(line.rfind(',') + 1), "1") << line;
  }
  EXPECT_EQ(rows, 5u);
  r = run(concat({"importance", "--checkpoint", (dir / "run" / "checkpoint").string(), "--groups", "rainbow", "--out",
                  (dir / "bad").string()},
                 fixture().data_args()));
  EXPECT_EQ(r.code, 2);
}
