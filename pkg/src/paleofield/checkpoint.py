"""Versioned JSON checkpoint of a fitted model.

Layout (format_version 1), one JSON object with sorted keys:

    format_version   int
    config_hash      sha256 hex of the canonical JSON of ``train_config``
    train_config     TrainConfig fields, or null
    hyperparams      ell_lon, ell_lat, ell_t, sigma_f, sigma, jitter (floats)
    inducing         Z ([M_s][2]), knots ([M_t], ka), bounding_box ([4])
    sites            lambda1 ([M_t][M_s]), Lambda2 ([M_t][M_s][M_s]),
                     cross ([M_t-1][M_s][M_s])
    baseline         null, or a list of thin-plate interpolants with
                     slice_id, nodes, weights, affine, center, scale

Floats are written with the shortest repr that round-trips, so a
save/load cycle reproduces every array bit for bit; non-finite values are
rejected at save time.  The cached posterior is not stored; it is
recomputed from the sites on load.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import InvalidInput
from .data_pipeline import BaselineModel, ThinPlateSpline
from .kernels import SpatialParams, TemporalParams
from .sparse_gp import Hyperparams, InducingStructure, VariationalState, refresh_posterior
from .training import FittedModel, TrainConfig

FORMAT_VERSION = 1


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def config_hash(config) -> str:
    d = None if config is None else asdict(config)
    return hashlib.sha256(canonical_json(d).encode()).hexdigest()


def _arr(a):
    return np.asarray(a, dtype=float).tolist()


def _baseline_to_list(baseline):
    if baseline is None:
        return None
    if not isinstance(baseline, BaselineModel):
        raise InvalidInput("only a BaselineModel (or no baseline) can be stored in a checkpoint")
    return [{"slice_id": f.slice_id, "nodes": _arr(f.nodes), "weights": _arr(f.weights), "affine": _arr(f.affine),
             "center": _arr(f.center), "scale": float(f.scale)} for f in baseline.interpolants]


def _baseline_from_list(items):
    if items is None:
        return None
    return BaselineModel(tuple(
        ThinPlateSpline(np.array(d["nodes"], dtype=float).reshape(-1, 2), np.array(d["weights"], dtype=float),
                        np.array(d["affine"], dtype=float), np.array(d["center"], dtype=float), float(d["scale"]),
                        str(d["slice_id"]))
        for d in items))


def to_dict(model: FittedModel) -> dict:
    h, v = model.hyper, model.state
    return {
        "format_version": FORMAT_VERSION,
        "config_hash": config_hash(model.config),
        "train_config": None if model.config is None else asdict(model.config),
        "hyperparams": {"ell_lon": h.spatial.ell_lon, "ell_lat": h.spatial.ell_lat, "ell_t": h.temporal.ell_t,
                        "sigma_f": h.temporal.sigma_f, "sigma": h.noise_sigma, "jitter": h.jitter},
        "inducing": {"Z": _arr(h.inducing.Z), "knots": _arr(h.inducing.knots),
                     "bounding_box": list(h.inducing.bounding_box)},
        "sites": {"lambda1": _arr(v.lambda1), "Lambda2": _arr(v.Lambda2), "cross": _arr(v.cross)},
        "baseline": _baseline_to_list(model.baseline),
    }


def from_dict(d: dict) -> FittedModel:
    try:
        version = d["format_version"]
        if version != FORMAT_VERSION:
            raise InvalidInput(f"unsupported checkpoint format_version {version!r}")
        cfg = None if d["train_config"] is None else TrainConfig(**d["train_config"])
        if d["config_hash"] != config_hash(cfg):
            raise InvalidInput("checkpoint config_hash does not match its train_config")
        hp, ind, s = d["hyperparams"], d["inducing"], d["sites"]
        inducing = InducingStructure(np.array(ind["Z"], dtype=float).reshape(-1, 2),
                                     np.array(ind["knots"], dtype=float), tuple(ind["bounding_box"]))
        h = Hyperparams(SpatialParams(float(hp["ell_lon"]), float(hp["ell_lat"])),
                        TemporalParams(float(hp["ell_t"]), float(hp["sigma_f"])),
                        float(hp["sigma"]), inducing, float(hp["jitter"]))
        M_t, M_s = inducing.num_temporal, inducing.num_spatial
        v = VariationalState(np.array(s["lambda1"], dtype=float).reshape(M_t, M_s),
                             np.array(s["Lambda2"], dtype=float).reshape(M_t, M_s, M_s),
                             np.array(s["cross"], dtype=float).reshape(max(M_t - 1, 0), M_s, M_s))
        baseline = _baseline_from_list(d["baseline"])
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, InvalidInput):
            raise
        raise InvalidInput(f"malformed checkpoint: {e!r}") from e
    return FittedModel(h, refresh_posterior(v, h), baseline, [], cfg)


def dumps(model: FittedModel) -> str:
    try:
        return json.dumps(to_dict(model), sort_keys=True, indent=1, allow_nan=False) + "\n"
    except ValueError as e:
        raise InvalidInput(f"cannot checkpoint non-finite values: {e}") from e


def loads(text: str) -> FittedModel:
    try:
        d = json.loads(text)
    except json.JSONDecodeError as e:
        raise InvalidInput(f"checkpoint is not valid JSON: {e}") from e
    return from_dict(d)


def save(model: FittedModel, path):
    Path(path).write_text(dumps(model))


def load(path) -> FittedModel:
    return loads(Path(path).read_text())
