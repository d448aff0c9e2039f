"""Python bindings for the cmfdnet C++ core."""

import json

from ._core import (
    CheckpointError,
    ConfigError,
    IoError,
    Model,
    NumericalError,
    dice_iou,
    e_measure,
    evaluate_pair,
    lr_at,
    mae,
    s_measure,
    scan_order,
    scan_variants,
    selective_scan,
    selfcheck,
    synth_generate,
    synth_sample,
    weighted_fbeta,
)
from ._core import default_config as _default_config
from ._core import train as _train


def default_config():
    return json.loads(_default_config())


def train(config, data_dir, out_dir):
    """Train with a (partial) config dict; returns the per-epoch log."""
    return _train(json.dumps(config), str(data_dir), str(out_dir))


__all__ = [
    "CheckpointError",
    "ConfigError",
    "IoError",
    "Model",
    "NumericalError",
    "default_config",
    "dice_iou",
    "e_measure",
    "evaluate_pair",
    "lr_at",
    "mae",
    "s_measure",
    "scan_order",
    "scan_variants",
    "selective_scan",
    "selfcheck",
    "synth_generate",
    "synth_sample",
    "train",
    "weighted_fbeta",
]
