"""Heatmap grids: Gaussian rendering, peak decoding, line scans and SoftMax.

A heatmap is a 2D array ``h[row, col]`` of non-negative finite values, i.e.
``h[y, x]`` with ``x`` the horizontal pixel coordinate.
"""

from __future__ import annotations

from typing import NamedTuple, Optional

import numpy as np

from .errors import AllZero
from .geometry import EpipolarLine

DEFAULT_SIGMA = 2.0
DEFAULT_SOFTARGMAX_T = 40.0
DEFAULT_SOFTMAX_T = 30.0


class PeakEstimate(NamedTuple):
    x: float
    y: float
    score: float


def check_heatmap(h) -> np.ndarray:
    h = np.asarray(h)
    if h.ndim != 2 or h.size == 0:
        raise ValueError("heatmap must be a non-empty 2D grid")
    if not np.all(np.isfinite(h)) or np.any(h < 0):
        raise ValueError("heatmap values must be finite and non-negative")
    return h


def render_gaussian(center, sigma: float = DEFAULT_SIGMA, size=(64, 64), dtype=np.float64) -> np.ndarray:
    """Unnormalized Gaussian bump ``exp(-d^2 / 2 sigma^2)`` on a ``(w, h)`` grid."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    w, h = size
    cx, cy = float(center[0]), float(center[1])
    gx = np.exp(-((np.arange(w) - cx) ** 2) / (2 * sigma**2))
    gy = np.exp(-((np.arange(h) - cy) ** 2) / (2 * sigma**2))
    out = gy[:, None] * gx[None, :]
    out[out < 1e-300] = 0.0
    return out.astype(dtype, copy=False)


def hard_argmax(h) -> PeakEstimate:
    """Location of the maximum; ties go to the smallest row-major index."""
    h = np.asarray(h)
    i = int(np.argmax(h))
    y, x = divmod(i, h.shape[1])
    return PeakEstimate(float(x), float(y), float(h.flat[i]))


def bilinear(h, x: float, y: float) -> float:
    h = np.asarray(h, dtype=np.float64)
    H, W = h.shape
    x = min(max(x, 0.0), W - 1.0)
    y = min(max(y, 0.0), H - 1.0)
    x0, y0 = min(int(np.floor(x)), W - 2 if W > 1 else 0), min(int(np.floor(y)), H - 2 if H > 1 else 0)
    x1, y1 = min(x0 + 1, W - 1), min(y0 + 1, H - 1)
    fx, fy = x - x0, y - y0
    return float(
        (1 - fy) * ((1 - fx) * h[y0, x0] + fx * h[y0, x1]) + fy * ((1 - fx) * h[y1, x0] + fx * h[y1, x1])
    )


def softmax_support(h, temperature: float) -> np.ndarray:
    """Softmax of ``temperature * h`` over the non-zero pixels (zeros get mass 0)."""
    h = np.asarray(h, dtype=np.float64)
    mask = h > 0
    if not mask.any():
        raise AllZero("soft-argmax of an all-zero heatmap")
    z = temperature * (h - h.max())
    p = np.where(mask, np.exp(z), 0.0)
    return p / p.sum()


def soft_argmax(h, temperature: float = DEFAULT_SOFTARGMAX_T) -> PeakEstimate:
    """Expected pixel location under the support-restricted softmax of the grid.

    The score is the original grid bilinearly sampled at that location.
    """
    h = np.asarray(h, dtype=np.float64)
    p = softmax_support(h, temperature)
    H, W = h.shape
    x = float(p.sum(axis=0) @ np.arange(W))
    y = float(p.sum(axis=1) @ np.arange(H))
    return PeakEstimate(x, y, bilinear(h, x, y))


def rasterize_line(line, width: int, height: int) -> np.ndarray:
    """Pixels ``(n, 2)`` as ``(x, y)`` crossed by a line, one per step of its major axis.

    A mostly-horizontal line (``|b| >= |a|``) takes one pixel per column, the
    row being the rounded line ordinate there; otherwise one pixel per row.
    Pixels outside the grid are dropped; the traversal order is ascending.
    """
    if isinstance(line, EpipolarLine):
        a, b, c = line.a, line.b, line.c
    else:
        a, b, c = (float(v) for v in line)
    if abs(b) >= abs(a):
        u = np.arange(width, dtype=np.float64)
        v = np.floor(-(a * u + c) / b + 0.5)
        keep = (v >= 0) & (v < height)
        return np.stack([u[keep], v[keep]], axis=1).astype(np.int64)
    v = np.arange(height, dtype=np.float64)
    u = np.floor(-(b * v + c) / a + 0.5)
    keep = (u >= 0) & (u < width)
    return np.stack([u[keep], v[keep]], axis=1).astype(np.int64)


def max_on_line(h, line) -> tuple[float, Optional[tuple[int, int]]]:
    """Largest value along the rasterized line and its first location.

    Returns ``(0.0, None)`` when the line misses the grid.
    """
    h = np.asarray(h)
    pix = rasterize_line(line, h.shape[1], h.shape[0])
    if len(pix) == 0:
        return 0.0, None
    vals = h[pix[:, 1], pix[:, 0]]
    k = int(np.argmax(vals))
    return float(vals[k]), (int(pix[k, 0]), int(pix[k, 1]))


def spatial_softmax(h, temperature: float = DEFAULT_SOFTMAX_T) -> np.ndarray:
    """Softmax over the grid, rescaled so the output maximum equals the input maximum.

    Equivalent to ``max(h) * exp(T * (h - max(h)))``; works on the last two axes.
    """
    h = np.asarray(h)
    m = h.max(axis=(-2, -1), keepdims=True)
    out = m * np.exp(temperature * (h.astype(np.float64) - m))
    return out.astype(h.dtype, copy=False)
