"""Python access to the siblurry C++ core."""

import json

from ._core import (
    Backbone,
    ConfigError,
    ContractError,
    CorruptionError,
    Dataset,
    Error,
    IngestionError,
    IoError,
    LoadError,
    NonFiniteLossError,
    a_auc,
    afs_scale,
    aggregate,
    apply_mask,
    cosine_distance,
    cross_entropy,
    cvpt_loss,
    export_pool,
    forgetting,
    gsf_loss,
    ignore_scores,
    load_dataset,
    load_index,
    marginal_benefit_scores,
    nearest_keys,
    per_sample_label_gradients,
    plot,
    round_half_up,
    total_loss,
)
from . import _core

__all__ = [
    "Backbone", "ConfigError", "ContractError", "CorruptionError", "Dataset", "Error", "IngestionError",
    "IoError", "LoadError", "NonFiniteLossError", "a_auc", "afs_scale", "aggregate", "apply_mask",
    "cosine_distance", "cross_entropy", "cvpt_loss", "effective_config", "export_pool", "forgetting",
    "generate", "generate_stream", "gsf_loss", "ignore_scores", "load_dataset", "load_index", "make_synthetic",
    "marginal_benefit_scores", "nearest_keys", "per_sample_label_gradients", "plot", "read_record",
    "round_half_up", "run", "total_loss",
]


def generate_stream(class_samples, **scenario):
    """Si-Blurry stream for per-class sample id lists; keyword args are scenario fields."""
    return _core.generate_stream(class_samples, json.dumps(scenario))


def make_synthetic(**spec):
    """Gaussian-blob dataset; keyword args are synthetic spec fields."""
    return _core.make_synthetic(json.dumps(spec))


def effective_config(config=None, overrides=()):
    return json.loads(_core.effective_config(json.dumps(config or {}), list(overrides)))


def generate(config=None, overrides=()):
    """Writes the manifest and stats; returns (manifest_path, stats_text)."""
    return _core.generate(json.dumps(config or {}), list(overrides))


def run(config=None, overrides=()):
    """Runs every configured seed and returns the summary record."""
    return json.loads(_core.run(json.dumps(config or {}), list(overrides)))


def read_record(path):
    """Run record as a list of JSON line objects."""
    return [json.loads(line) for line in _core.read_record(str(path)).splitlines() if line]
