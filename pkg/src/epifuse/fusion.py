"""Epipolar heatmap fusion with fixed (heuristic) or per-view adaptive weights.

For a target view ``v`` and another view ``u`` the fusion term at pixel ``x``
is the largest response of ``H^u`` along the epipolar line of ``x`` in ``u``.
All outputs are computed from the same unfused inputs in one pass.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Optional, Sequence

import numba
import numpy as np

from .errors import AllZeroWeights, DegenerateBaseline, InsufficientViews
from .geometry import CameraModel, epipolar_lines, fundamental_from_projections
from .heatmap import DEFAULT_SOFTMAX_T, spatial_softmax


def _configure_threads():
    n = int(os.environ.get("EPIFUSE_THREADS", "0") or 0)
    if n > 0:
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


_configure_threads()


@dataclass(frozen=True, eq=False)
class ViewStack:
    """Per-view, per-joint heatmaps ``(V, J, H, W)`` and their cameras.

    Cameras are expressed at the heatmap resolution.
    """

    heatmaps: np.ndarray
    cameras: tuple

    def __post_init__(self):
        hm = np.asarray(self.heatmaps)
        cams = tuple(self.cameras)
        if hm.ndim != 4:
            raise ValueError("heatmaps must have shape (views, joints, height, width)")
        if len(cams) != hm.shape[0]:
            raise ValueError("one camera per view required")
        if len(cams) < 2:
            raise InsufficientViews("fusion needs at least two views")
        for c in cams:
            if c.image_size != (hm.shape[3], hm.shape[2]):
                raise ValueError("cameras must be expressed at the heatmap resolution")
        object.__setattr__(self, "heatmaps", hm)
        object.__setattr__(self, "cameras", cams)

    @property
    def n_views(self) -> int:
        return self.heatmaps.shape[0]

    @property
    def n_joints(self) -> int:
        return self.heatmaps.shape[1]

    @property
    def resolution(self) -> tuple[int, int]:
        return self.heatmaps.shape[3], self.heatmaps.shape[2]

    def with_heatmaps(self, heatmaps) -> "ViewStack":
        return ViewStack(heatmaps, self.cameras)


@dataclass(frozen=True, eq=False)
class LineTables:
    """Rasterized epipolar lines for every ordered view pair.

    ``index[v, u, p]`` lists flat pixel indices of view ``u`` on the epipolar
    line of pixel ``p`` of view ``v``, padded with ``-1``. ``valid[v, u]`` is
    false for the diagonal and for pairs without a usable F.
    """

    index: np.ndarray
    valid: np.ndarray
    resolution: tuple[int, int]

    def line(self, v: int, u: int, p: int) -> np.ndarray:
        row = self.index[v, u, p]
        flat = row[row >= 0].astype(np.int64)
        w = self.resolution[0]
        return np.stack([flat % w, flat // w], axis=1)


def _rasterize_many(lines: np.ndarray, width: int, height: int) -> np.ndarray:
    # vectorized twin of heatmap.rasterize_line; identical float operations
    n = len(lines)
    L = max(width, height)
    out = np.full((n, L), -1, dtype=np.int16 if width * height < 2**15 else np.int32)
    a, b, c = lines[:, 0], lines[:, 1], lines[:, 2]
    ok = ~np.isnan(a)
    horiz = ok & (np.abs(b) >= np.abs(a))
    vert = ok & ~horiz
    flat = np.full((n, L), -1, dtype=np.int64)
    if horiz.any():
        u = np.arange(width, dtype=np.float64)
        v = np.floor(-(a[horiz, None] * u[None, :] + c[horiz, None]) / b[horiz, None] + 0.5)
        keep = (v >= 0) & (v < height)
        idx = np.where(keep, v * width + u[None, :], -1).astype(np.int64)
        flat[horiz, :width] = idx
    if vert.any():
        v = np.arange(height, dtype=np.float64)
        u = np.floor(-(b[vert, None] * v[None, :] + c[vert, None]) / a[vert, None] + 0.5)
        keep = (u >= 0) & (u < width)
        idx = np.where(keep, v[None, :] * width + u, -1).astype(np.int64)
        flat[vert, :height] = idx
    # left-align the kept entries, preserving traversal order
    order = np.argsort(flat < 0, axis=1, kind="stable")
    out[:] = np.take_along_axis(flat, order, axis=1)
    return out


def precompute_line_tables(
    cameras: Sequence[CameraModel], resolution, allow_degenerate: bool = False
) -> LineTables:
    """Rasterize the epipolar line of every pixel for all ordered view pairs.

    Cameras at another image size are resampled to ``resolution`` first.
    Raises DegenerateBaseline for coincident centers unless ``allow_degenerate``.
    """
    w, h = int(resolution[0]), int(resolution[1])
    cams = [c if c.image_size == (w, h) else c.resampled((w, h)) for c in cameras]
    V = len(cams)
    ys, xs = np.divmod(np.arange(w * h), w)
    pts = np.stack([xs, ys], axis=1).astype(np.float64)
    L = max(w, h)
    dtype = np.int16 if w * h < 2**15 else np.int32
    index = np.full((V, V, w * h, L), -1, dtype=dtype)
    valid = np.zeros((V, V), dtype=bool)
    for v in range(V):
        for u in range(V):
            if u == v:
                continue
            try:
                F = fundamental_from_projections(cams[v], cams[u])
            except DegenerateBaseline:
                if not allow_degenerate:
                    raise
                continue
            index[v, u] = _rasterize_many(epipolar_lines(F, pts), w, h)
            valid[v, u] = True
    index.setflags(write=False)
    valid.setflags(write=False)
    return LineTables(index, valid, (w, h))


@numba.njit(parallel=True, cache=True)
def _line_max_kernel(heat, index, valid, out, arg):
    V, P, J = heat.shape
    L = index.shape[3]
    for t in numba.prange(V * V):
        v = t // V
        u = t % V
        if u == v or not valid[v, u]:
            continue
        for p in range(P):
            first = index[v, u, p, 0]
            if first < 0:
                continue
            for j in range(J):
                out[v, u, p, j] = heat[u, first, j]
                arg[v, u, p, j] = first
            for k in range(1, L):
                idx = index[v, u, p, k]
                if idx < 0:
                    break
                for j in range(J):
                    val = heat[u, idx, j]
                    if val > out[v, u, p, j]:
                        out[v, u, p, j] = val
                        arg[v, u, p, j] = idx


@numba.njit(parallel=True, cache=True)
def _line_max_only_kernel(heat, index, valid, out):
    # branch-free inner loop over joints; out starts at zero and inputs are non-negative
    V, P, J = heat.shape
    L = index.shape[3]
    for t in numba.prange(V * V):
        v = t // V
        u = t % V
        if u == v or not valid[v, u]:
            continue
        for p in range(P):
            acc = out[v, u, p]
            for k in range(L):
                idx = index[v, u, p, k]
                if idx < 0:
                    break
                row = heat[u, idx]
                for j in range(J):
                    acc[j] = max(acc[j], row[j])


def epipolar_maxima(stack: ViewStack, tables: Optional[LineTables] = None, with_argmax: bool = False):
    """Line maxima ``M[v, u, j, y, x]`` (and optionally their flat source indices).

    ``M[v, u]`` is zero on the diagonal and for invalid pairs; argmax is -1 there.
    """
    if tables is None:
        tables = precompute_line_tables(stack.cameras, stack.resolution, allow_degenerate=True)
    V, J, H, W = stack.heatmaps.shape
    if tables.resolution != (W, H) or tables.index.shape[0] != V:
        raise ValueError("line tables do not match the stack")
    dtype = np.float64 if stack.heatmaps.dtype == np.float64 else np.float32
    heat = np.ascontiguousarray(stack.heatmaps.reshape(V, J, H * W).transpose(0, 2, 1), dtype=dtype)
    out = np.zeros((V, V, H * W, J), dtype=dtype)
    if not with_argmax:
        _line_max_only_kernel(heat, tables.index, tables.valid, out)
        return out.transpose(0, 1, 3, 2).reshape(V, V, J, H, W)
    arg = np.full((V, V, H * W, J), -1, dtype=np.int32)
    _line_max_kernel(heat, tables.index, tables.valid, out, arg)
    M = out.transpose(0, 1, 3, 2).reshape(V, V, J, H, W)
    return M, arg.transpose(0, 1, 3, 2).reshape(V, V, J, H * W)


def combine(heatmaps, M, self_coef, other_coef) -> np.ndarray:
    """``out[v,j] = self_coef[v,j] * H[v,j] + sum_u other_coef[v,u,j] * M[v,u,j]``."""
    H = np.asarray(heatmaps, dtype=np.float64)
    out = self_coef[:, :, None, None] * H
    for u in range(M.shape[1]):
        out = out + other_coef[:, u, :, None, None] * M[:, u]
    return out


def heuristic_coefficients(valid: np.ndarray, n_joints: int, lam: float):
    V = valid.shape[0]
    n = valid.sum(axis=1)
    other = np.where(valid, (1.0 - lam) / np.maximum(n, 1)[:, None], 0.0)
    self_coef = np.full((V, n_joints), float(lam))
    return self_coef, np.repeat(other[:, :, None], n_joints, axis=2)


def normalize_weights(weights) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise ValueError("fusion weights must be finite and non-negative")
    s = w.sum(axis=0)
    if np.any(s < 1e-12):
        raise AllZeroWeights(f"joints {np.flatnonzero(s < 1e-12).tolist()} have all-zero weights")
    return w / s


def adaptive_coefficients(valid: np.ndarray, weights, normalize: bool = True):
    w = normalize_weights(weights) if normalize else np.asarray(weights, dtype=np.float64)
    other = np.where(valid[:, :, None], w[None, :, :], 0.0)
    return w.copy(), other


def heuristic_fuse(stack: ViewStack, lam: float = 0.5, tables: Optional[LineTables] = None, maxima=None) -> ViewStack:
    """Fixed-weight fusion: ``lam * H^v + (1 - lam) / N * sum_{u != v} max_line H^u``.

    ``N`` counts the other views with a valid fundamental matrix.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    if tables is None:
        tables = precompute_line_tables(stack.cameras, stack.resolution, allow_degenerate=True)
    M = epipolar_maxima(stack, tables) if maxima is None else maxima
    a, c = heuristic_coefficients(tables.valid, stack.n_joints, lam)
    return stack.with_heatmaps(combine(stack.heatmaps, M, a, c))


def adaptive_fuse(
    stack: ViewStack, weights, tables: Optional[LineTables] = None, maxima=None, normalize: bool = True
) -> ViewStack:
    """Weighted fusion ``w^v H^v + sum_{u != v} w^u max_line H^u``.

    ``weights`` has shape ``(views, joints)`` and is normalized per joint to sum
    to one over views unless ``normalize`` is false.
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (stack.n_views, stack.n_joints):
        raise ValueError("weights must have shape (views, joints)")
    if tables is None:
        tables = precompute_line_tables(stack.cameras, stack.resolution, allow_degenerate=True)
    M = epipolar_maxima(stack, tables) if maxima is None else maxima
    a, c = adaptive_coefficients(tables.valid, w, normalize)
    return stack.with_heatmaps(combine(stack.heatmaps, M, a, c))


def suppress(stack: ViewStack, temperature: float = DEFAULT_SOFTMAX_T) -> ViewStack:
    """Spatial SoftMax on every fused heatmap (removes single-view ghost responses)."""
    return stack.with_heatmaps(spatial_softmax(stack.heatmaps, temperature))
