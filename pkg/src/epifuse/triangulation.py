"""Linear and robust triangulation of one 3D point from several calibrated views."""

from __future__ import annotations

from itertools import combinations
from typing import Sequence

import numpy as np

from .errors import DegenerateSolution, InsufficientConfidentViews, InsufficientViews, NoConsensus
from .geometry import CameraModel


def _normalizer(size) -> np.ndarray:
    w, h = size
    return np.array([[2.0 / w, 0.0, -1.0], [0.0, 2.0 / h, -1.0], [0.0, 0.0, 1.0]])


def _conditioned(points, cameras):
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    Ps, xs = [], []
    for x, cam in zip(pts, cameras):
        T = _normalizer(cam.image_size)
        Ps.append(T @ cam.P)
        xs.append(T[:2, :2] @ x + T[:2, 2])
    return np.array(Ps), np.array(xs)


def _solve(Ps, xs, scale) -> np.ndarray:
    rows = []
    for P, x, s in zip(Ps, xs, scale):
        rows.append(s * (x[0] * P[2] - P[0]))
        rows.append(s * (x[1] * P[2] - P[1]))
    X = np.linalg.svd(np.array(rows))[2][-1]
    if abs(X[3]) < 1e-12:
        raise DegenerateSolution("homogeneous solution at infinity")
    return X[:3] / X[3]


def triangulate_dlt(points, cameras: Sequence[CameraModel]) -> np.ndarray:
    """Homogeneous least-squares point from ``points[i]`` seen by ``cameras[i]``.

    Pixel coordinates are conditioned by each camera's image size first.
    """
    if len(cameras) < 2:
        raise InsufficientViews("triangulation needs at least two views")
    Ps, xs = _conditioned(points, cameras)
    return _solve(Ps, xs, np.ones(len(Ps)))


def triangulate_weighted(points, cameras: Sequence[CameraModel], confidences) -> np.ndarray:
    """DLT with each view's two rows scaled by its confidence.

    Confidences are divided by their maximum and zero-confidence views are
    dropped, so equal confidences reproduce :func:`triangulate_dlt` exactly.
    """
    conf = np.asarray(confidences, dtype=np.float64)
    if np.any(~np.isfinite(conf)) or np.any(conf < 0):
        raise ValueError("confidences must be finite and non-negative")
    keep = np.flatnonzero(conf > 0)
    if len(keep) < 2:
        raise InsufficientConfidentViews("need at least two views with positive confidence")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)[keep]
    cams = [cameras[i] for i in keep]
    Ps, xs = _conditioned(pts, cams)
    return _solve(Ps, xs, conf[keep] / conf[keep].max())


def reprojection_errors(X, points, cameras: Sequence[CameraModel]) -> np.ndarray:
    """Pixel distance per view; ``inf`` where the point is not in front of the camera."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    err = np.empty(len(cameras))
    for i, cam in enumerate(cameras):
        xc = cam.R @ X + cam.t
        if xc[2] <= 1e-12:
            err[i] = np.inf
            continue
        p = cam.K @ xc
        err[i] = np.hypot(p[0] / p[2] - pts[i, 0], p[1] / p[2] - pts[i, 1])
    return err


def triangulate_ransac(
    points, cameras: Sequence[CameraModel], threshold: float = 10.0, min_inliers: int = 2
) -> tuple[np.ndarray, np.ndarray]:
    """Consensus triangulation over every view pair.

    Each pair hypothesis is scored by the number of views reprojecting within
    ``threshold`` pixels (ties: lower mean inlier error, then earlier pair).
    The winner's inliers are re-triangulated with DLT. Returns the point and
    the boolean inlier mask.
    """
    V = len(cameras)
    if V < 3:
        raise InsufficientViews("RANSAC needs at least three views to identify an outlier")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    best = None
    for i, j in combinations(range(V), 2):
        try:
            X = triangulate_dlt(pts[[i, j]], [cameras[i], cameras[j]])
        except DegenerateSolution:
            continue
        err = reprojection_errors(X, pts, cameras)
        mask = err < threshold
        n = int(mask.sum())
        mean_err = float(err[mask].mean()) if n else np.inf
        key = (-n, mean_err)
        if best is None or key < best[0]:
            best = (key, mask)
    if best is None or -best[0][0] < min_inliers:
        found = 0 if best is None else -best[0][0]
        raise NoConsensus(f"best hypothesis has {found} inliers, need {min_inliers}")
    mask = best[1]
    idx = np.flatnonzero(mask)
    X = triangulate_dlt(pts[idx], [cameras[k] for k in idx])
    return X, mask
