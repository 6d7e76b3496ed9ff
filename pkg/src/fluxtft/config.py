"""Run configuration: one JSON document with sections data, gapfill, split,
trees, tft and experiment.  Missing keys take the defaults below."""
from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

DEFAULTS = {
    "data": {
        "dir": None,                 # CSV directory; None generates synthetic sites
        "min_span_hours": 8760,
        "max_missing_frac": 0.20,
        "synthetic": {
            "n_sites": 10,
            "years": 1.0,
            "seed": 0,
            "missing_frac": 0.01,
            "gap_frac": 0.01,
            "igbp_groups": None,
        },
    },
    "gapfill": {"k_neighbors": 5},
    "split": {
        "ratios": [0.605, 0.201, 0.194],
        "n_folds": 4,
        "validation_fold": 4,        # 1-based fold used as the validation set
        "seed": 0,
    },
    "trees": {
        "n_trees": 50,
        "max_depth": 14,
        "min_samples_leaf": 5,
        "max_features": 0.5,
        "boost_n_trees": 80,
        "boost_max_depth": 6,
        "learning_rate": 0.1,
        "subsample": 0.8,
        "max_rows": 20000,
        "top_k": [3],
        "seed": 0,
    },
    "tft": {
        "hidden_size": 16,
        "n_heads": 4,
        "dropout": 0.1,
        "quantiles": [0.1, 0.5, 0.9],
        "encoder_length": 168,
        "decoder_length": 1,
        "learning_rate": 1e-3,
        "batch_size": 64,
        "max_epochs": 50,
        "early_stop_patience": 10,
        "seed": 0,
        "grad_clip": 1.0,
        "exclude_gap_labels": True,
        "train_stride": 1,
        "val_stride": 1,
        "eval_stride": 1,
    },
    "experiment": {
        "cv": True,
        "snapshot_features": None,   # None picks the top three by importance
        "attention_groups": None,    # None uses every group among the test sites
        "loss_bins": 20,
    },
}

SECTIONS = tuple(DEFAULTS)


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in over.items():
        where = f"{path}{key}"
        if key not in base:
            raise ValueError(f"unknown config key {where!r}")
        if isinstance(base[key], dict) and base[key] is not None:
            if not isinstance(value, dict):
                raise ValueError(f"config key {where!r} must be an object")
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = value
    return out


def load_config(path=None, overrides: dict | None = None) -> dict:
    """Defaults, then the JSON file at ``path``, then ``overrides``."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        cfg = _merge(cfg, json.loads(Path(path).read_text()))
    if overrides:
        cfg = _merge(cfg, overrides)
    return cfg


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()
