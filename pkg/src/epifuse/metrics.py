"""2D/3D pose metrics and the per-method evaluation report."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptySet

HEAD_FRACTION = 0.025


def _mean(x) -> float:
    # exactly rounded sum, so means do not depend on summation order
    x = np.asarray(x, dtype=np.float64).ravel()
    return math.fsum(x) / x.size


def pck_threshold(bbox_width, t: float = 0.5):
    """Distance threshold: ``t`` head lengths, a head length being 2.5% of the box width."""
    return t * HEAD_FRACTION * np.asarray(bbox_width, dtype=np.float64)


def pckh(pred, gt, bbox_width, t: float = 0.5) -> float:
    """Percentage of joints strictly closer than ``t`` head lengths to ground truth.

    ``bbox_width`` is a scalar or one width per joint.
    """
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 2)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 2)
    if pred.shape != gt.shape:
        raise ValueError("pred and gt must have matching shapes")
    if len(gt) == 0:
        raise EmptySet("no joints to score")
    bw = np.broadcast_to(np.asarray(bbox_width, dtype=np.float64).ravel(), (len(gt),))
    if np.any(bw <= 0):
        raise ValueError("bbox_width must be positive")
    d = np.linalg.norm(pred - gt, axis=1)
    return 100.0 * float(np.mean(d < pck_threshold(bw, t)))


def joint_errors(pred3d, gt3d, scale: float = 1000.0) -> np.ndarray:
    """Euclidean error per joint, converted by ``scale`` (metres to mm by default)."""
    pred = np.asarray(pred3d, dtype=np.float64)
    gt = np.asarray(gt3d, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError("pred and gt must have matching shapes")
    return scale * np.linalg.norm(pred - gt, axis=-1)


def mpjpe(pred3d, gt3d, scale: float = 1000.0) -> float:
    """Mean per-joint position error without any alignment (protocol 1)."""
    e = joint_errors(pred3d, gt3d, scale)
    if e.size == 0:
        raise EmptySet("no joints to score")
    return _mean(e)


def group_by_occluded_views(per_joint_errors, occluded) -> dict[int, tuple[float, int]]:
    """Mean error per occluded-view count: ``{count: (mean, population)}``.

    ``per_joint_errors`` is ``(..., J)`` and ``occluded`` is ``(..., V, J)``.
    """
    err = np.asarray(per_joint_errors, dtype=np.float64)
    counts = np.asarray(occluded, dtype=bool).sum(axis=-2)
    if counts.shape != err.shape:
        raise ValueError("occlusion flags must be shaped (..., views, joints)")
    err, counts = err.ravel(), counts.ravel()
    out = {}
    for k in np.unique(counts):
        sel = counts == k
        out[int(k)] = (_mean(err[sel]), int(sel.sum()))
    return out


@dataclass
class EvalAccumulator:
    """Collects per-(sample, view, joint) 2D hits and per-(sample, joint) 3D errors."""

    joint_types: tuple
    joint_type_of: tuple
    t: float = 0.5
    hits: list = field(default_factory=list)  # (V, J) bool per sample
    occluded: list = field(default_factory=list)  # (V, J) bool per sample
    errors: list = field(default_factory=list)  # (J,) mm per sample

    def add(self, pred2d, gt2d, pred3d, gt3d, occluded):
        pred2d, gt2d = np.asarray(pred2d, float), np.asarray(gt2d, float)
        # box width from ground-truth joints, per view
        bw = gt2d[..., 0].max(axis=1) - gt2d[..., 0].min(axis=1)
        d = np.linalg.norm(pred2d - gt2d, axis=-1)
        self.hits.append(d < pck_threshold(bw, self.t)[:, None])
        self.occluded.append(np.asarray(occluded, dtype=bool))
        self.errors.append(joint_errors(pred3d, gt3d))

    def report(self, method: str) -> "EvalReport":
        if not self.hits:
            raise EmptySet("no samples evaluated")
        hits = np.stack(self.hits)  # (S, V, J)
        occ = np.stack(self.occluded)
        err = np.stack(self.errors)  # (S, J)
        types = np.array(self.joint_type_of)
        pck, pck_occ, mp, mp_occ = {}, {}, {}, {}
        for name in self.joint_types:
            cols = types == name
            h = hits[:, :, cols]
            pck[name] = 100.0 * float(h.mean())
            o = occ[:, :, cols]
            pck_occ[name] = 100.0 * float(h[o].mean()) if o.any() else None
            e = err[:, cols]
            mp[name] = _mean(e)
            # a 3D joint counts as occluded if it is occluded in any view
            eo = e[occ[:, :, cols].any(axis=1)]
            mp_occ[name] = _mean(eo) if eo.size else None
        any_occ = occ.any(axis=1)
        buckets = group_by_occluded_views(err, occ)
        return EvalReport(
            method=method,
            num_samples=len(self.hits),
            pckh=pck,
            mean_pckh=100.0 * float(hits.mean()),
            pckh_occluded=pck_occ,
            mean_pckh_occluded=100.0 * float(hits[occ].mean()) if occ.any() else None,
            mpjpe=mp,
            mean_mpjpe=_mean(err),
            mpjpe_occluded=mp_occ,
            mean_mpjpe_occluded=_mean(err[any_occ]) if any_occ.any() else None,
            buckets={k: {"mpjpe": m, "count": n} for k, (m, n) in buckets.items()},
        )


@dataclass
class EvalReport:
    method: str
    num_samples: int
    pckh: dict
    mean_pckh: float
    pckh_occluded: dict
    mean_pckh_occluded: float | None
    mpjpe: dict
    mean_mpjpe: float
    mpjpe_occluded: dict
    mean_mpjpe_occluded: float | None
    buckets: dict

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["buckets"] = {str(k): v for k, v in sorted(self.buckets.items())}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        d = dict(d)
        d["buckets"] = {int(k): v for k, v in d["buckets"].items()}
        return cls(**d)


CSV_COLUMNS = ("method", "joint_type", "pckh", "pckh_occluded", "mpjpe_mm", "mpjpe_occluded_mm")
BUCKET_COLUMNS = ("method", "occluded_views", "count", "mpjpe_mm")


def _fmt(v) -> str:
    return "" if v is None else f"{v:.6f}"


def reports_to_csv(reports) -> str:
    """One row per (method, joint type) plus a ``mean`` row per method."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in reports:
        for name in r.pckh:
            w.writerow(
                [r.method, name, _fmt(r.pckh[name]), _fmt(r.pckh_occluded[name]), _fmt(r.mpjpe[name]), _fmt(r.mpjpe_occluded[name])]
            )
        w.writerow(
            [r.method, "mean", _fmt(r.mean_pckh), _fmt(r.mean_pckh_occluded), _fmt(r.mean_mpjpe), _fmt(r.mean_mpjpe_occluded)]
        )
    return buf.getvalue()


def buckets_to_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(BUCKET_COLUMNS)
    for r in reports:
        for k in sorted(r.buckets):
            w.writerow([r.method, k, r.buckets[k]["count"], _fmt(r.buckets[k]["mpjpe"])])
    return buf.getvalue()
