"""Zone-level demand forecasting with a multi-relation graph Transformer.

Configs are plain dicts; they are validated by the native library, which
rejects unknown keys.
"""

import json

from . import _core
from ._core import (
    ConfigError,
    ContractError,
    DemandMatrix,
    DimensionError,
    Experiment,
    IngestionError,
    NumericError,
    RelationSet,
    StmgtError,
    SynthCity,
    generate_city,
    load_relation_set,
    metrics,
    pearson,
    prepare_city,
    prepare_files,
    read_demand_matrix,
)

__all__ = [
    "ConfigError", "ContractError", "DemandMatrix", "DimensionError", "Experiment", "IngestionError",
    "NumericError", "RelationSet", "StmgtError", "SynthCity", "count_params", "default_model_config",
    "default_train_config", "generate_city", "load_relation_set", "metrics", "model_config", "param_shapes",
    "pearson", "prepare_city", "prepare_files", "read_demand_matrix", "run_experiment",
]


def default_model_config():
    return json.loads(_core.default_model_config())


def default_train_config():
    return json.loads(_core.default_train_config())


def model_config(overrides=None):
    """Full model config with `overrides` applied."""
    return json.loads(_core.normalize_model_config(json.dumps(overrides or {})))


def count_params(config=None):
    return _core.count_params(json.dumps(config or {}))


def param_shapes(config=None):
    return [(name, tuple(shape)) for name, shape in _core.param_shapes(json.dumps(config or {}))]


def run_experiment(data, model=None, train=None):
    """Trains on `data` and scores the restored best model on its test split."""
    return _core.run_experiment(data, json.dumps(model or {}), json.dumps(train or {}))
