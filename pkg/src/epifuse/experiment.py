"""Experiment configuration and the shared train/evaluate drivers used by the CLI.

A config is a JSON object whose sections mirror ``DEFAULT_CONFIG``. Missing
keys take the default, unknown keys are rejected, and every value is checked
before any work starts. All outputs are pure functions of the config.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .errors import ConfigInvalid
from .fusion import precompute_line_tables
from .metrics import EvalAccumulator, EvalReport
from .pipeline import METHODS, MethodConfig, Pipeline
from .synthdata import JOINT_TYPE_OF, JOINT_TYPES, CorruptionSpec, DatasetSpec, MultiviewSample, PoseLimits, build_rig
from .weightnet import TrainConfig, WeightNetParams, build_training_set, train

DEFAULT_CONFIG = {
    "seed": 0,
    "rig": {
        "num_cameras": 8,
        "radius": 2.0,
        "heights": [0.9, 2.3],
        "image_size": [256, 256],
        "focal": 150.0,
        "target": [0.0, 0.0, 1.0],
    },
    "heatmap": {"resolution": [64, 64], "sigma": 2.0},
    "corruption": {
        "probability": 0.203,
        "mix": [0.3, 0.5, 0.2],
        "ghost_shift": [4.0, 12.0],
        "ghost_amplitude": [0.5, 0.9],
        "noise_amplitude": 0.3,
    },
    "pose": {"angle_scale": 1.0, "scale_jitter": 0.08, "yaw": True, "translation_radius": 0.5},
    "dataset": {"num_samples": 2000, "train_fraction": 0.75},
    "fusion": {
        "lambda": 0.5,
        "decoder": "soft",
        "decode_temperature": 20.0,
        "geometry_temperature": 40.0,
        "normalize_adaptive": True,
    },
    "ransac": {"threshold": 10.0},
    "train": {
        "num_samples": 64,
        "learning_rate": 0.1,
        "momentum": 0.9,
        "steps": 500,
        "batch_size": 32,
        "output_bias": -3.0,
        "normalize": False,
    },
    "eval": {"max_samples": None, "pck_t": 0.5},
    "methods": list(METHODS),
    "output_dir": "epifuse_out",
    "plots": False,
}


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v) -> bool:
    return (isinstance(v, (int, float)) and not isinstance(v, bool)) and np.isfinite(v)


def _merge(default: dict, given: dict, where: str) -> dict:
    if not isinstance(given, dict):
        raise ConfigInvalid(f"{where or 'config'} must be a JSON object")
    unknown = sorted(set(given) - set(default))
    if unknown:
        raise ConfigInvalid(f"unknown key(s) in {where or 'config'}: {', '.join(unknown)}")
    out = copy.deepcopy(default)
    for k, v in given.items():
        if isinstance(default[k], dict):
            out[k] = _merge(default[k], v, f"{where}.{k}" if where else k)
        else:
            out[k] = v
    return out


def _check(cond: bool, msg: str):
    if not cond:
        raise ConfigInvalid(msg)


def _numbers(v, n: int) -> bool:
    return isinstance(v, list) and len(v) == n and all(_is_num(x) for x in v)


def validate_config(cfg: dict) -> dict:
    """Merge ``cfg`` over the defaults and check every value; raises ``ConfigInvalid``."""
    c = _merge(DEFAULT_CONFIG, cfg, "")
    _check(_is_int(c["seed"]) and 0 <= c["seed"] < 2**64, "seed must be an unsigned 64-bit integer")

    r = c["rig"]
    _check(_is_int(r["num_cameras"]) and r["num_cameras"] >= 2, "rig.num_cameras must be an integer >= 2")
    _check(_is_num(r["radius"]) and r["radius"] > 0, "rig.radius must be positive")
    _check(isinstance(r["heights"], list) and len(r["heights"]) > 0 and all(_is_num(h) for h in r["heights"]), "rig.heights must be a non-empty list of numbers")
    _check(_numbers(r["image_size"], 2) and all(_is_int(x) and x > 0 for x in r["image_size"]), "rig.image_size must be two positive integers")
    _check(_is_num(r["focal"]) and r["focal"] > 0, "rig.focal must be positive")
    _check(_numbers(r["target"], 3), "rig.target must be three numbers")

    h = c["heatmap"]
    _check(_numbers(h["resolution"], 2) and all(_is_int(x) and x > 0 and x % 8 == 0 for x in h["resolution"]), "heatmap.resolution must be two positive multiples of 8")
    _check(_is_num(h["sigma"]) and h["sigma"] > 0, "heatmap.sigma must be positive")

    k = c["corruption"]
    _check(_is_num(k["probability"]) and 0 <= k["probability"] <= 1, "corruption.probability must lie in [0, 1]")
    _check(_numbers(k["mix"], 3), "corruption.mix must be three numbers")
    _check(_numbers(k["ghost_shift"], 2) and _numbers(k["ghost_amplitude"], 2), "corruption ranges must be pairs of numbers")
    _check(_is_num(k["noise_amplitude"]) and k["noise_amplitude"] >= 0, "corruption.noise_amplitude must be non-negative")
    try:
        _corruption(c)
    except ValueError as e:
        raise ConfigInvalid(f"corruption: {e}") from None

    p = c["pose"]
    _check(all(_is_num(p[x]) and p[x] >= 0 for x in ("angle_scale", "scale_jitter", "translation_radius")), "pose limits must be non-negative numbers")
    _check(isinstance(p["yaw"], bool), "pose.yaw must be a boolean")

    d = c["dataset"]
    _check(_is_int(d["num_samples"]) and d["num_samples"] >= 1, "dataset.num_samples must be a positive integer")
    _check(_is_num(d["train_fraction"]) and 0 <= d["train_fraction"] <= 1, "dataset.train_fraction must lie in [0, 1]")

    f = c["fusion"]
    _check(_is_num(f["lambda"]), "fusion.lambda must be a number")
    _check(isinstance(f["normalize_adaptive"], bool), "fusion.normalize_adaptive must be a boolean")
    _check(_is_num(c["ransac"]["threshold"]), "ransac.threshold must be a number")
    method_config(c)  # range checks for lambda, decoder, temperatures and threshold

    t = c["train"]
    _check(_is_int(t["num_samples"]) and t["num_samples"] >= 1, "train.num_samples must be a positive integer")
    _check(_is_int(t["steps"]) and t["steps"] >= 0, "train.steps must be a non-negative integer")
    _check(_is_int(t["batch_size"]) and t["batch_size"] >= 1, "train.batch_size must be a positive integer")
    _check(all(_is_num(t[x]) for x in ("learning_rate", "momentum", "output_bias")), "train hyperparameters must be numbers")
    _check(isinstance(t["normalize"], bool), "train.normalize must be a boolean")
    try:
        train_config(c)
    except ValueError as e:
        raise ConfigInvalid(f"train: {e}") from None

    e = c["eval"]
    _check(e["max_samples"] is None or (_is_int(e["max_samples"]) and e["max_samples"] >= 1), "eval.max_samples must be null or a positive integer")
    _check(_is_num(e["pck_t"]) and e["pck_t"] > 0, "eval.pck_t must be positive")

    m = c["methods"]
    _check(isinstance(m, list) and len(m) > 0 and all(isinstance(x, str) for x in m), "methods must be a non-empty list of names")
    bad = sorted(set(m) - set(METHODS))
    _check(not bad, f"unknown method(s): {', '.join(bad)}; choose from {', '.join(METHODS)}")
    _check(len(set(m)) == len(m), "methods must not repeat")
    _check(isinstance(c["output_dir"], str) and c["output_dir"] != "", "output_dir must be a non-empty string")
    _check(isinstance(c["plots"], bool), "plots must be a boolean")
    return c


def load_config(path: Optional[str]) -> dict:
    if path is None:
        return validate_config({})
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigInvalid(f"cannot read config {path}: {e.strerror}") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigInvalid(f"config {path} is not valid JSON: {e}") from None
    return validate_config(raw)


# ------------------------------------------------------------------ builders


def _corruption(c: dict) -> CorruptionSpec:
    k = c["corruption"]
    return CorruptionSpec(float(k["probability"]), tuple(k["mix"]), tuple(k["ghost_shift"]), tuple(k["ghost_amplitude"]), float(k["noise_amplitude"]))


def rig_from_config(c: dict):
    r = c["rig"]
    return build_rig(r["num_cameras"], float(r["radius"]), tuple(float(h) for h in r["heights"]), tuple(r["image_size"]), float(r["focal"]), tuple(float(x) for x in r["target"]))


def dataset_spec(c: dict) -> DatasetSpec:
    p = c["pose"]
    return DatasetSpec(
        cameras=tuple(rig_from_config(c)),
        resolution=tuple(c["heatmap"]["resolution"]),
        sigma=float(c["heatmap"]["sigma"]),
        corruption=_corruption(c),
        pose=PoseLimits(float(p["angle_scale"]), float(p["scale_jitter"]), p["yaw"], float(p["translation_radius"])),
        seed=c["seed"],
        num_samples=c["dataset"]["num_samples"],
        train_fraction=float(c["dataset"]["train_fraction"]),
    )


def method_config(c: dict) -> MethodConfig:
    f = c["fusion"]
    return MethodConfig(
        lam=float(f["lambda"]),
        decoder=f["decoder"],
        decode_temperature=float(f["decode_temperature"]),
        geometry_temperature=float(f["geometry_temperature"]),
        ransac_threshold=float(c["ransac"]["threshold"]),
        normalize_adaptive=f["normalize_adaptive"],
    )


def train_config(c: dict) -> TrainConfig:
    t = c["train"]
    return TrainConfig(float(t["learning_rate"]), float(t["momentum"]), t["steps"], t["batch_size"], c["seed"], t["normalize"])


# ------------------------------------------------------------------- drivers


def train_weights(c: dict, spec: DatasetSpec, samples: Iterable[MultiviewSample]):
    """Train the weight network on ``samples``; returns ``(params, loss_curve)``."""
    res = spec.resolution
    tables = precompute_line_tables([cam.resampled(res) for cam in spec.cameras], res, allow_degenerate=True)
    data = build_training_set(samples, tables, float(c["fusion"]["geometry_temperature"]))
    init = WeightNetParams.init(res, seed=c["seed"], output_bias=float(c["train"]["output_bias"]))
    return train(init, data, train_config(c))


@dataclass
class Evaluation:
    reports: dict  # method -> EvalReport
    weight_stats: dict  # method -> mean fusion weight on corrupted / clean entries

    def to_dict(self) -> dict:
        return {
            "reports": {m: r.to_dict() for m, r in self.reports.items()},
            "weights": self.weight_stats,
        }


def evaluate(c: dict, spec: DatasetSpec, samples: Iterable[MultiviewSample], params: Optional[WeightNetParams]) -> Evaluation:
    """Run every configured method on ``samples`` and summarise the results."""
    methods = tuple(c["methods"])
    pipe = Pipeline(spec.cameras, spec.resolution, method_config(c), params)
    t = float(c["eval"]["pck_t"])
    accs = {m: EvalAccumulator(JOINT_TYPES, JOINT_TYPE_OF, t) for m in methods}
    wsum = {m: np.zeros(2) for m in methods}  # corrupted, clean
    wcount = {m: np.zeros(2) for m in methods}
    for smp in samples:
        gt2d = smp.gt_2d()
        for m, r in pipe.run(smp.heatmaps, methods).items():
            accs[m].add(r.pred2d, gt2d, r.pred3d, smp.skeleton, smp.occluded)
            if r.weights is not None:
                occ = smp.occluded
                wsum[m] += [r.weights[occ].sum(), r.weights[~occ].sum()]
                wcount[m] += [occ.sum(), (~occ).sum()]
    stats = {}
    for m in methods:
        if wcount[m].sum() == 0:
            continue
        mean = np.where(wcount[m] > 0, wsum[m] / np.maximum(wcount[m], 1), np.nan)
        stats[m] = {
            "mean_corrupted": None if np.isnan(mean[0]) else float(mean[0]),
            "mean_clean": None if np.isnan(mean[1]) else float(mean[1]),
            "ratio": None if np.isnan(mean).any() or mean[1] == 0 else float(mean[0] / mean[1]),
        }
    return Evaluation({m: accs[m].report(m) for m in methods}, stats)


def eval_indices(c: dict, spec: DatasetSpec) -> range:
    val = spec.split()[1]
    n = c["eval"]["max_samples"]
    return val if n is None else val[:n]


def train_indices(c: dict, spec: DatasetSpec) -> range:
    return spec.split()[0][: c["train"]["num_samples"]]


def report_from_json(text: str) -> EvalReport:
    return EvalReport.from_dict(json.loads(text))
