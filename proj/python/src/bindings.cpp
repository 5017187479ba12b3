#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <nlohmann/json.hpp>

#include "stmgt/error.hpp"
#include "stmgt/eval.hpp"
#include "stmgt/runtime.hpp"
#include "stmgt/synth.hpp"
#include "stmgt/training.hpp"

namespace py = pybind11;
using namespace stmgt;
using nlohmann::json;

namespace {

py::array_t<double> matrix(const std::vector<double>& values, std::size_t rows, std::size_t cols) {
  py::array_t<double> out({rows, cols});
  std::copy(values.begin(), values.end(), out.mutable_data());
  return out;
}

std::vector<double> flat(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
  return {a.data(), a.data() + a.size()};
}

py::dict report_dict(const MetricReport& r) {
  py::dict d;
  d["mae"] = r.mae;
  d["rmse"] = r.rmse;
  d["mape10"] = r.mape10 ? py::cast(*r.mape10) : py::none();
  d["smape"] = r.smape;
  d["count"] = r.count;
  d["mape10_count"] = r.mape10_count;
  return d;
}

ModelConfig model_config(const std::string& text) { return model_config_from_json(json::parse(text)); }
TrainConfig train_config(const std::string& text) { return train_config_from_json(json::parse(text)); }

std::pair<Hour, Hour> boundaries(const DemandMatrix& dm, const std::optional<std::string>& train_end,
                                 const std::optional<std::string>& val_end) {
  auto b = default_boundaries(dm);
  if (train_end) b.first = parse_hour(*train_end);
  if (val_end) b.second = parse_hour(*val_end);
  return b;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Multi-relation graph Transformer for zone-level demand forecasting";
  configure_runtime();

  auto base = py::register_exception<Error>(m, "StmgtError", PyExc_RuntimeError);
  py::register_exception<DimensionError>(m, "DimensionError", base);
  py::register_exception<ContractError>(m, "ContractError", base);
  py::register_exception<ConfigError>(m, "ConfigError", base);
  py::register_exception<IngestionError>(m, "IngestionError", base);
  py::register_exception<NumericError>(m, "NumericError", base);

  m.def("metrics", [](py::array_t<double, py::array::c_style | py::array::forcecast> pred,
                      py::array_t<double, py::array::c_style | py::array::forcecast> truth) {
    return report_dict(metrics(flat(pred), flat(truth)));
  }, py::arg("pred"), py::arg("truth"));
  m.def("pearson", [](py::array_t<double, py::array::c_style | py::array::forcecast> u,
                      py::array_t<double, py::array::c_style | py::array::forcecast> v) {
    return pearson(flat(u), flat(v));
  });

  m.def("default_model_config", [] { return to_json(ModelConfig{}).dump(); });
  m.def("default_train_config", [] { return to_json(TrainConfig{}).dump(); });
  m.def("normalize_model_config", [](const std::string& text) { return to_json(model_config(text)).dump(); });
  m.def("count_params", [](const std::string& text) { return count_params(model_config(text)); });
  m.def("param_shapes", [](const std::string& text) { return param_shapes(model_config(text)); });

  py::class_<DemandMatrix>(m, "DemandMatrix")
      .def_readonly("zone_ids", &DemandMatrix::zone_ids)
      .def_readonly("hours", &DemandMatrix::hours)
      .def_property_readonly("start", [](const DemandMatrix& d) { return format_hour(d.start); })
      .def_property_readonly("values", [](const DemandMatrix& d) { return matrix(d.values, d.n_zones(), d.hours); })
      .def("to_csv", &demand_matrix_csv);
  m.def("read_demand_matrix", &read_demand_matrix, py::arg("path"));

  py::class_<RelationSet>(m, "RelationSet")
      .def_readonly("zone_ids", &RelationSet::zone_ids)
      .def_readonly("threshold", &RelationSet::threshold)
      .def_property_readonly("kinds", [](const RelationSet& r) {
        std::vector<std::string> names;
        for (auto k : r.kinds()) names.emplace_back(relation_name(k));
        return names;
      })
      .def("adjacency", [](const RelationSet& r, const std::string& name) {
        const auto kind = parse_relation(name);
        for (const auto& g : r.graphs)
          if (g.kind == kind) return matrix(g.a_hat, g.n, g.n);
        throw ContractError("relation set has no " + name + " graph");
      })
      .def("save", &export_relation_set, py::arg("dir"));
  m.def("load_relation_set", &load_relation_set, py::arg("dir"));

  py::class_<SynthCity>(m, "SynthCity")
      .def_readonly("zone_ids", &SynthCity::zone_ids)
      .def_readonly("demand", &SynthCity::demand)
      .def("relations", [](const SynthCity& c) { return city_relations(c); })
      .def("write", &write_city, py::arg("dir"), py::arg("with_trips") = false);
  m.def("generate_city", [](std::size_t n_zones, std::size_t grid_cols, std::size_t hours, std::uint64_t seed,
                            const std::string& start_date) {
    SynthConfig c;
    c.n_zones = n_zones;
    c.grid_cols = grid_cols;
    c.hours = hours;
    c.seed = seed;
    c.start_date = start_date;
    return generate_city(c);
  }, py::arg("n_zones") = 20, py::arg("grid_cols") = 5, py::arg("hours") = 2000, py::arg("seed") = 7,
        py::arg("start_date") = "2021-03-01");

  py::class_<ExperimentData>(m, "Experiment")
      .def_property_readonly("relations", [](const ExperimentData& d) { return d.relations; })
      .def_property_readonly("sizes", [](const ExperimentData& d) {
        return py::make_tuple(d.train.size(), d.val.size(), d.test.size());
      })
      .def_property_readonly("has_weather", [](const ExperimentData& d) { return d.weather.has_value(); })
      .def("test_truth", [](const ExperimentData& d) { return flat_truth(d.test); })
      .def("historical_average", [](const ExperimentData& d) {
        const HistoricalAverage ha(d.splits.train);
        auto pred = ha_predictions(ha, d.test);
        return py::make_tuple(pred, report_dict(metrics(pred, flat_truth(d.test))));
      });
  m.def("prepare_city", [](const SynthCity& city, std::size_t input_len, std::size_t horizon, bool with_weather,
                           std::optional<std::string> train_end, std::optional<std::string> val_end) {
    return prepare_experiment(city.demand, city_relations(city), with_weather ? &city.weather : nullptr,
                              boundaries(city.demand, train_end, val_end), input_len, horizon);
  }, py::arg("city"), py::arg("input_len") = 24, py::arg("horizon") = 1, py::arg("with_weather") = true,
        py::arg("train_end") = py::none(), py::arg("val_end") = py::none());
  m.def("prepare_files", [](const std::string& demand_csv, const std::string& graphs_dir,
                            std::optional<std::string> weather_csv, std::size_t input_len, std::size_t horizon,
                            std::optional<std::string> train_end, std::optional<std::string> val_end) {
    auto demand = read_demand_matrix(demand_csv);
    std::vector<DailyWeather> weather;
    if (weather_csv) weather = read_weather(*weather_csv);
    return prepare_experiment(demand, load_relation_set(graphs_dir), weather_csv ? &weather : nullptr,
                              boundaries(demand, train_end, val_end), input_len, horizon);
  }, py::arg("demand_csv"), py::arg("graphs_dir"), py::arg("weather_csv") = py::none(), py::arg("input_len") = 24,
        py::arg("horizon") = 1, py::arg("train_end") = py::none(), py::arg("val_end") = py::none());

  m.def("run_experiment", [](const ExperimentData& data, const std::string& model_json, const std::string& train_json) {
    const auto mc = model_config(model_json);
    const auto tc = train_config(train_json);
    ExperimentResult res;
    std::vector<double> pred;
    {
      py::gil_scoped_release release;
      res = run_experiment(data, mc, tc);
      StmgtModel model(res.config, select_relations(data.relations, res.config), res.params);
      pred = model_predictions(model, data.test, data.stats, tc.batch_size);
    }
    py::list history;
    for (const auto& e : res.history.epochs) {
      py::dict row;
      row["epoch"] = e.epoch;
      row["train_loss"] = e.train_loss;
      row["val_loss"] = e.val_loss;
      row["seconds"] = e.seconds;
      history.append(row);
    }
    py::dict out;
    out["test"] = report_dict(res.test);
    out["history"] = history;
    out["best_epoch"] = res.history.best_epoch;
    out["steps"] = res.history.steps;
    out["seconds"] = res.seconds;
    out["predictions"] = pred;
    return out;
  }, py::arg("data"), py::arg("model_config"), py::arg("train_config"));
}
