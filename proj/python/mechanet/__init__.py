"""Sliding-block trajectory workbench: datasets, predictors, baselines and metrics."""

import json as _json

from . import _core
from ._core import (
    CorruptRecord,
    EmptyDataset,
    FormatError,
    InvalidSpec,
    IoError,
    MissingCheckpoint,
    MnetError,
    NoObject,
    NonFiniteLoss,
    NoSequences,
    ShapeMismatch,
    VariantMismatch,
    ZeroMass,
    estimate_positions,
    gaussian_entropy,
    gradcheck,
    heatmap_entropy,
    polyfit_extrapolate,
    predict,
    read_record,
    simulate,
)


def generate_dataset(scenario, count, seed, out, **kwargs):
    return _json.loads(_core.generate_dataset(scenario, count, seed, str(out), **kwargs))


def read_manifest(path):
    return _json.loads(_core.read_manifest(str(path)))


def train(data, model, t_train, seed, out, **kwargs):
    return _json.loads(_core.train(str(data), model, t_train, seed, str(out), **kwargs))


def evaluate_model(ckpt, data, horizons=(20, 40), split="test"):
    return _json.loads(_core.evaluate_model(str(ckpt), str(data), list(horizons), split))


def evaluate_baseline(method, data, horizons=(20, 40), split="test"):
    return _json.loads(_core.evaluate_baseline(method, str(data), list(horizons), split))
