"""Adaptive per-view fusion weights from heatmap appearance and epipolar agreement.

The network is small and fixed, so forward and reverse passes are written out
by hand. Parameters live in one flat vector with named slices.

Appearance branch (per view and joint):
    conv 3x3 (1 -> 8, zero padding) -> ReLU -> 8x8 average pool -> FC -> ReLU
Geometry branch (per view, averaged over the other views):
    [log1p(sampson), s_i, s_j] -> shared FC -> ReLU
Head:
    concat -> FC 128 -> ReLU -> FC 64 -> ReLU -> FC 1 -> softplus
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numba
import numpy as np

from .errors import CheckpointMissing, DegenerateBaseline, FormatVersionMismatch, InsufficientViews, NonFiniteLoss, ShapeMismatch, TruncatedPayload
from .fusion import LineTables, ViewStack, adaptive_coefficients, combine, epipolar_maxima
from .geometry import fundamental_from_projections
from .heatmap import DEFAULT_SOFTARGMAX_T, PeakEstimate

CONV_CHANNELS = 8
POOL = 8
APPEARANCE_DIM = 128
GEOMETRY_DIM = 256
HEAD_DIMS = (128, 64)
PAIR_FEATURES = 3
CHECKPOINT_VERSION = 1

def param_layout(resolution) -> list[tuple[str, tuple[int, ...]]]:
    w, h = int(resolution[0]), int(resolution[1])
    if w % POOL or h % POOL or w <= 0 or h <= 0:
        raise ShapeMismatch(f"resolution {w}x{h} is not a multiple of the {POOL}x{POOL} pooling window")
    pooled = (h // POOL) * (w // POOL) * CONV_CHANNELS
    d1, d2 = HEAD_DIMS
    return [
        ("conv_w", (CONV_CHANNELS, 9)),
        ("conv_b", (CONV_CHANNELS,)),
        ("app_w", (APPEARANCE_DIM, pooled)),
        ("app_b", (APPEARANCE_DIM,)),
        ("geo_w", (GEOMETRY_DIM, PAIR_FEATURES)),
        ("geo_b", (GEOMETRY_DIM,)),
        ("fc1_w", (d1, APPEARANCE_DIM + GEOMETRY_DIM)),
        ("fc1_b", (d1,)),
        ("fc2_w", (d2, d1)),
        ("fc2_b", (d2,)),
        ("fc3_w", (1, d2)),
        ("fc3_b", (1,)),
    ]


@dataclass(eq=False)
class WeightNetParams:
    """Flat parameter vector plus the layout that names its slices."""

    flat: np.ndarray
    resolution: tuple
    seed: int = 0
    step: int = 0
    _slices: dict = field(init=False, repr=False)

    def __post_init__(self):
        self.resolution = (int(self.resolution[0]), int(self.resolution[1]))
        layout = param_layout(self.resolution)
        n = sum(int(np.prod(s)) for _, s in layout)
        self.flat = np.asarray(self.flat)
        if self.flat.shape != (n,):
            raise ShapeMismatch(f"expected {n} parameters, got shape {self.flat.shape}")
        if not np.all(np.isfinite(self.flat)):
            raise ValueError("parameters must be finite")
        self._slices = {}
        off = 0
        for name, shape in layout:
            size = int(np.prod(shape))
            self._slices[name] = (slice(off, off + size), shape)
            off += size

    @classmethod
    def init(cls, resolution=(64, 64), seed: int = 0, dtype=np.float32, output_bias: float = -3.0) -> "WeightNetParams":
        """He-normal weights; zero biases except the last layer's, set to ``output_bias``.

        The default starts the weights near softplus(-3) ~ 0.05, the scale at
        which eight-view fused maps are comparable to the targets.
        """
        rng = np.random.default_rng(seed)
        parts = []
        for name, shape in param_layout(resolution):
            if name == "fc3_b":
                parts.append(np.full(shape, float(output_bias)))
            elif name.endswith("_b"):
                parts.append(np.zeros(shape))
            else:
                parts.append(rng.normal(0.0, np.sqrt(2.0 / shape[1]), size=shape))
        flat = np.concatenate([p.ravel() for p in parts]).astype(dtype)
        return cls(flat, resolution, seed=seed)

    def __getitem__(self, name: str) -> np.ndarray:
        sl, shape = self._slices[name]
        return self.flat[sl].reshape(shape)

    @property
    def names(self) -> list[str]:
        return list(self._slices)

    @property
    def size(self) -> int:
        return self.flat.size

    def slice_of(self, name: str) -> slice:
        return self._slices[name][0]

    def with_flat(self, flat, step: Optional[int] = None) -> "WeightNetParams":
        return WeightNetParams(flat, self.resolution, self.seed, self.step if step is None else step)

    def astype(self, dtype) -> "WeightNetParams":
        return self.with_flat(self.flat.astype(dtype))

    def manifest(self) -> dict:
        return {
            "format_version": CHECKPOINT_VERSION,
            "resolution": list(self.resolution),
            "seed": int(self.seed),
            "step": int(self.step),
            "slices": [
                {"name": n, "shape": list(shape), "offset": sl.start} for n, (sl, shape) in self._slices.items()
            ],
            "dtype": "<f4",
            "count": self.size,
        }

    def save(self, path) -> None:
        """Write ``<path>/weights.json`` and ``<path>/weights.bin`` (float32, little-endian)."""
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        (path / "weights.json").write_text(json.dumps(self.manifest(), indent=1, sort_keys=True) + "\n")
        (path / "weights.bin").write_bytes(self.flat.astype("<f4").tobytes())

    @classmethod
    def load(cls, path) -> "WeightNetParams":
        path = Path(path)
        if not (path / "weights.json").is_file() or not (path / "weights.bin").is_file():
            raise CheckpointMissing(f"no checkpoint at {path}")
        man = json.loads((path / "weights.json").read_text())
        if man.get("format_version") != CHECKPOINT_VERSION:
            raise FormatVersionMismatch(f"checkpoint version {man.get('format_version')}")
        raw = (path / "weights.bin").read_bytes()
        if len(raw) != 4 * man["count"]:
            raise TruncatedPayload(f"expected {4 * man['count']} bytes, found {len(raw)}")
        p = cls(np.frombuffer(raw, dtype="<f4").astype(np.float32), man["resolution"], man["seed"], man["step"])
        for s in man["slices"]:
            sl, shape = p._slices[s["name"]]
            if sl.start != s["offset"] or list(shape) != s["shape"]:
                raise ShapeMismatch(f"slice {s['name']} does not match the layout")
        return p


# ------------------------------------------------------------------ score weight


def score_weight(h) -> float:
    """ScoreFuse weight: the heatmap maximum."""
    return float(np.max(h))


def score_weights(stack: ViewStack) -> np.ndarray:
    return stack.heatmaps.max(axis=(2, 3)).astype(np.float64)


# --------------------------------------------------------------- geometry inputs


def pair_fundamentals(cameras) -> tuple[np.ndarray, np.ndarray]:
    """``F[i, j]`` maps view-i points to view-j lines; ``valid[i, j]`` marks usable pairs."""
    V = len(cameras)
    F = np.zeros((V, V, 3, 3))
    valid = np.zeros((V, V), dtype=bool)
    for i in range(V):
        for j in range(V):
            if i == j:
                continue
            try:
                F[i, j] = fundamental_from_projections(cameras[i], cameras[j]).m
            except DegenerateBaseline:
                continue
            valid[i, j] = True
    return F, valid


def batched_peaks(heatmaps, temperature: float = DEFAULT_SOFTARGMAX_T):
    """Soft-argmax over the last two axes with the support-restricted softmax.

    Returns ``(x, y, s, p)``; all-zero grids decode to the grid centre with
    score 0 and an all-zero ``p``.
    """
    h = np.asarray(heatmaps, dtype=np.float64)
    H, W = h.shape[-2:]
    mask = h > 0
    m = h.max(axis=(-2, -1), keepdims=True)
    e = np.where(mask, np.exp(temperature * (h - m)), 0.0)
    z = e.sum(axis=(-2, -1), keepdims=True)
    empty = z[..., 0, 0] == 0
    p = e / np.where(z > 0, z, 1.0)
    x = np.einsum("...yx,x->...", p, np.arange(W, dtype=np.float64))
    y = np.einsum("...yx,y->...", p, np.arange(H, dtype=np.float64))
    x = np.where(empty, (W - 1) / 2.0, x)
    y = np.where(empty, (H - 1) / 2.0, y)
    s = _bilinear_batched(h, x, y)[0]
    return x, y, s, p


def _bilinear_batched(h, x, y):
    # returns value, d/dx, d/dy and the corner indices/weights for reverse mode
    H, W = h.shape[-2:]
    xc = np.clip(x, 0.0, W - 1.0)
    yc = np.clip(y, 0.0, H - 1.0)
    x0 = np.minimum(np.floor(xc).astype(np.int64), max(W - 2, 0))
    y0 = np.minimum(np.floor(yc).astype(np.int64), max(H - 2, 0))
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    fx, fy = xc - x0, yc - y0
    lead = np.indices(x.shape)
    flat = h.reshape(h.shape[:-2] + (H * W,))

    def at(yy, xx):
        return flat[tuple(lead) + (yy * W + xx,)]

    h00, h01, h10, h11 = at(y0, x0), at(y0, x1), at(y1, x0), at(y1, x1)
    val = (1 - fy) * ((1 - fx) * h00 + fx * h01) + fy * ((1 - fx) * h10 + fx * h11)
    inside_x = (x >= 0) & (x <= W - 1)
    inside_y = (y >= 0) & (y <= H - 1)
    dx = np.where(inside_x, (1 - fy) * (h01 - h00) + fy * (h11 - h10), 0.0)
    dy = np.where(inside_y, (1 - fx) * (h10 - h00) + fx * (h11 - h01), 0.0)
    corners = (y0 * W + x0, y0 * W + x1, y1 * W + x0, y1 * W + x1)
    cw = ((1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy)
    return val, dx, dy, corners, cw


def _sampson_parts(F, xi, yi, xj, yj):
    # F: (V, V, 3, 3) broadcast against (..., V, V) coordinates; x_i in view i, x_j in view j
    l2 = [F[..., k, 0] * xi + F[..., k, 1] * yi + F[..., k, 2] for k in range(3)]  # F x_i
    l1 = [F[..., 0, k] * xj + F[..., 1, k] * yj + F[..., 2, k] for k in range(3)]  # F^T x_j
    r = 0.5 * ((xj * l2[0] + yj * l2[1] + l2[2]) + (xi * l1[0] + yi * l1[1] + l1[2]))
    den = (l2[0] ** 2 + l2[1] ** 2) + (l1[0] ** 2 + l1[1] ** 2)
    return r, den, l1, l2


def geometry_inputs(heatmaps, F, valid, temperature: float = DEFAULT_SOFTARGMAX_T):
    """Pair features ``(G, V, V, 3)`` for groups of views ``heatmaps (G, V, H, W)``.

    ``feat[g, i, j] = [log1p(sampson_ij), s_i, s_j]`` with peaks from
    soft-argmax. Also returns a cache for :func:`geometry_inputs_backward`.
    """
    h = np.asarray(heatmaps, dtype=np.float64)
    G, V = h.shape[:2]
    x, y, s, p = batched_peaks(h, temperature)
    xi, yi = x[:, :, None], y[:, :, None]
    xj, yj = x[:, None, :], y[:, None, :]
    r, den, l1, l2 = _sampson_parts(F, xi, yi, xj, yj)
    ok = valid[None] & (den > 1e-300)
    d = np.where(ok, r * r / np.where(ok, den, 1.0), 0.0)
    feat = np.stack([np.log1p(d), np.broadcast_to(s[:, :, None], d.shape), np.broadcast_to(s[:, None, :], d.shape)], -1)
    cache = dict(h=h, x=x, y=y, p=p, r=r, den=den, l1=l1, l2=l2, d=d, ok=ok, F=F, T=temperature)
    return feat, cache


def geometry_inputs_backward(cache, dfeat) -> np.ndarray:
    """Heatmap gradient ``(G, V, H, W)`` from a gradient on the pair features."""
    h, x, y, p, T = cache["h"], cache["x"], cache["y"], cache["p"], cache["T"]
    r, den, l1, l2, d, ok, F = (cache[k] for k in ("r", "den", "l1", "l2", "d", "ok", "F"))
    G, V, H, W = h.shape
    dfeat = np.where(ok[..., None], dfeat, 0.0)
    ds = dfeat[..., 1].sum(axis=2) + dfeat[..., 2].sum(axis=1)
    # log1p(d), d = r^2 / den
    g = dfeat[..., 0] / (1.0 + d)
    safe = np.where(ok, den, 1.0)
    dr = np.where(ok, g * 2.0 * r / safe, 0.0)
    dden = np.where(ok, -g * r * r / (safe * safe), 0.0)
    # partials of r and den with respect to the four peak coordinates
    dxi = dr * l1[0] + dden * 2.0 * (l2[0] * F[..., 0, 0] + l2[1] * F[..., 1, 0])
    dyi = dr * l1[1] + dden * 2.0 * (l2[0] * F[..., 0, 1] + l2[1] * F[..., 1, 1])
    dxj = dr * l2[0] + dden * 2.0 * (l1[0] * F[..., 0, 0] + l1[1] * F[..., 0, 1])
    dyj = dr * l2[1] + dden * 2.0 * (l1[0] * F[..., 1, 0] + l1[1] * F[..., 1, 1])
    gx = dxi.sum(axis=2) + dxj.sum(axis=1)
    gy = dyi.sum(axis=2) + dyj.sum(axis=1)
    # score s = bilinear(h, x, y)
    _, sdx, sdy, corners, cw = _bilinear_batched(h, x, y)
    gx = gx + ds * sdx
    gy = gy + ds * sdy
    dh = np.zeros((G, V, H * W))
    lead = np.indices((G, V))
    for idx, wgt in zip(corners, cw):
        np.add.at(dh, (lead[0], lead[1], idx), ds * wgt)
    # soft-argmax: dx/dh_k = T p_k (u_k - x)
    us = np.arange(W, dtype=np.float64)[None, None, None, :]
    vs = np.arange(H, dtype=np.float64)[None, None, :, None]
    dpos = T * p * (gx[..., None, None] * (us - x[..., None, None]) + gy[..., None, None] * (vs - y[..., None, None]))
    return dh.reshape(G, V, H, W) + dpos


# ------------------------------------------------------------------- forward


def _relu(z):
    return np.maximum(z, 0.0)


@numba.njit(cache=True)
def _conv_pool_forward(X, w, b, pool, active, pooled):
    # 3x3 zero-padded conv -> ReLU -> pool x pool mean, fused; pooled starts at zero
    N, H, W = X.shape
    C = w.shape[0]
    inv = 1.0 / (pool * pool)
    nb = np.zeros(9)
    for n in range(N):
        for y in range(H):
            for x in range(W):
                k = 0
                for dy in range(-1, 2):
                    for dx in range(-1, 2):
                        yy, xx = y + dy, x + dx
                        nb[k] = X[n, yy, xx] if 0 <= yy < H and 0 <= xx < W else 0.0
                        k += 1
                for c in range(C):
                    acc = b[c]
                    for k in range(9):
                        acc += w[c, k] * nb[k]
                    if acc > 0:
                        active[n, y, x, c] = True
                        pooled[n, y // pool, x // pool, c] += acc * inv


@numba.njit(cache=True)
def _conv_pool_backward(X, w, active, dpooled, pool, dw, db, dX, want_dx):
    N, H, W = X.shape
    C = w.shape[0]
    inv = 1.0 / (pool * pool)
    nb = np.zeros(9)
    for n in range(N):
        for y in range(H):
            for x in range(W):
                k = 0
                for dy in range(-1, 2):
                    for dx in range(-1, 2):
                        yy, xx = y + dy, x + dx
                        nb[k] = X[n, yy, xx] if 0 <= yy < H and 0 <= xx < W else 0.0
                        k += 1
                for c in range(C):
                    if not active[n, y, x, c]:
                        continue
                    g = dpooled[n, y // pool, x // pool, c] * inv
                    db[c] += g
                    for k in range(9):
                        dw[c, k] += g * nb[k]
                    if want_dx:
                        k = 0
                        for dy in range(-1, 2):
                            for dx in range(-1, 2):
                                yy, xx = y + dy, x + dx
                                if 0 <= yy < H and 0 <= xx < W:
                                    dX[n, yy, xx] += g * w[c, k]
                                k += 1


def _appearance_forward(params, X):
    N, H, W = X.shape
    if (W, H) != params.resolution:
        raise ShapeMismatch(f"heatmap resolution {W}x{H} differs from the network's {params.resolution}")
    X = np.ascontiguousarray(X, dtype=np.float64)
    active = np.zeros((N, H, W, CONV_CHANNELS), dtype=np.bool_)
    pooled = np.zeros((N, H // POOL, W // POOL, CONV_CHANNELS))
    w = np.ascontiguousarray(params["conv_w"], dtype=np.float64)
    b = np.ascontiguousarray(params["conv_b"], dtype=np.float64)
    _conv_pool_forward(X, w, b, POOL, active, pooled)
    pooled = pooled.reshape(N, -1)
    a_pre = pooled @ params["app_w"].T.astype(np.float64) + params["app_b"]
    return _relu(a_pre), dict(X=X, active=active, pooled=pooled, a_pre=a_pre)


def appearance_embed(h, params: WeightNetParams) -> np.ndarray:
    """128-d appearance embedding of one heatmap."""
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 2:
        raise ShapeMismatch("expected a single 2D heatmap")
    return _appearance_forward(params, h[None])[0][0]


def _geometry_forward(params, feat, pair_mask):
    # feat (G, V, V, 3), pair_mask (V, V) -> (G, V, D_g)
    g_pre = feat @ params["geo_w"].T.astype(np.float64) + params["geo_b"]
    g = _relu(g_pre)
    n = pair_mask.sum(axis=1)
    if np.any(n == 0):
        raise InsufficientViews("a view has no partner with a usable fundamental matrix")
    coef = pair_mask / n[:, None]
    return np.einsum("ij,gijd->gid", coef, g), dict(g_pre=g_pre, coef=coef)


def geometry_embed(peaks: Sequence[PeakEstimate], fmatrices, view_index: int, params: WeightNetParams) -> np.ndarray:
    """256-d geometry embedding of view ``view_index`` given every view's peak.

    ``fmatrices[i][j]`` maps points of view ``i`` to lines of view ``j`` (None
    marks an unusable pair).
    """
    V = len(peaks)
    if V < 2:
        raise InsufficientViews("geometry embedding needs at least two views")
    i = int(view_index)
    F = np.zeros((V, V, 3, 3))
    mask = np.zeros((V, V), dtype=bool)
    for j in range(V):
        f = fmatrices[i][j] if j != i else None
        if f is not None:
            F[i, j] = getattr(f, "m", f)
            mask[i, j] = True
    if not mask[i].any():
        raise InsufficientViews("view has no partner with a usable fundamental matrix")
    x = np.array([p.x for p in peaks], float)
    y = np.array([p.y for p in peaks], float)
    s = np.array([p.score for p in peaks], float)
    r, den, _, _ = _sampson_parts(F, x[:, None], y[:, None], x[None, :], y[None, :])
    d = np.where(mask, r * r / np.where(mask, den, 1.0), 0.0)
    feat = np.stack([np.log1p(d), np.broadcast_to(s[:, None], d.shape), np.broadcast_to(s[None, :], d.shape)], -1)
    rows = feat[i][mask[i]]
    g = _relu(rows @ params["geo_w"].T.astype(np.float64) + params["geo_b"])
    return g.mean(axis=0)


@dataclass
class ForwardCache:
    X: np.ndarray
    app: dict
    A: np.ndarray
    geo: dict
    feat: np.ndarray
    h1_pre: np.ndarray
    h2_pre: np.ndarray
    h1: np.ndarray
    h2: np.ndarray
    z0: np.ndarray
    o: np.ndarray


def forward(params: WeightNetParams, heatmaps, feat, pair_mask):
    """Weights ``(G, V)`` for groups of views; returns ``(omega, cache)``."""
    X = np.asarray(heatmaps, dtype=np.float64)
    G, V, H, W = X.shape
    A, app = _appearance_forward(params, X.reshape(G * V, H, W))
    Gm, geo = _geometry_forward(params, feat, pair_mask)
    z0 = np.concatenate([A.reshape(G, V, -1), Gm], axis=-1)
    h1_pre = z0 @ params["fc1_w"].T.astype(np.float64) + params["fc1_b"]
    h1 = _relu(h1_pre)
    h2_pre = h1 @ params["fc2_w"].T.astype(np.float64) + params["fc2_b"]
    h2 = _relu(h2_pre)
    o = (h2 @ params["fc3_w"].T.astype(np.float64) + params["fc3_b"])[..., 0]
    omega = np.logaddexp(0.0, o)
    return omega, ForwardCache(X, app, A, geo, feat, h1_pre, h2_pre, h1, h2, z0, o)


def backward(params: WeightNetParams, cache: ForwardCache, d_omega, input_grad: bool = False):
    """Reverse pass. Returns ``(grad_flat, d_heatmaps, d_feat)``; the last two are None unless requested."""
    grad = np.zeros(params.size)

    def put(name, value):
        grad[params.slice_of(name)] = value.ravel()

    G, V = d_omega.shape
    do = d_omega * (1.0 / (1.0 + np.exp(-cache.o)))  # softplus' = sigmoid
    put("fc3_w", np.einsum("gv,gvk->k", do, cache.h2)[None])
    put("fc3_b", np.array([do.sum()]))
    dh2 = do[..., None] * params["fc3_w"][0].astype(np.float64)
    dh2 = np.where(cache.h2_pre > 0, dh2, 0.0)
    put("fc2_w", np.einsum("gvi,gvk->ik", dh2, cache.h1))
    put("fc2_b", dh2.sum(axis=(0, 1)))
    dh1 = dh2 @ params["fc2_w"].astype(np.float64)
    dh1 = np.where(cache.h1_pre > 0, dh1, 0.0)
    put("fc1_w", np.einsum("gvi,gvk->ik", dh1, cache.z0))
    put("fc1_b", dh1.sum(axis=(0, 1)))
    dz0 = dh1 @ params["fc1_w"].astype(np.float64)
    dA = dz0[..., :APPEARANCE_DIM].reshape(G * V, -1)
    dGm = dz0[..., APPEARANCE_DIM:]

    # geometry branch
    dg = np.einsum("ij,gid->gijd", cache.geo["coef"], dGm)
    dg = np.where(cache.geo["g_pre"] > 0, dg, 0.0)
    put("geo_w", np.einsum("gijd,gijk->dk", dg, cache.feat))
    put("geo_b", dg.sum(axis=(0, 1, 2)))

    # appearance branch
    app = cache.app
    da = np.where(app["a_pre"] > 0, dA, 0.0)
    put("app_w", da.T @ app["pooled"])
    put("app_b", da.sum(axis=0))
    dpool = (da @ params["app_w"].astype(np.float64)).reshape(app["pooled"].shape[0], -1)
    X = app["X"]
    N, H, W = X.shape
    dw = np.zeros((CONV_CHANNELS, 9))
    db = np.zeros(CONV_CHANNELS)
    dX = np.zeros_like(X)
    w = np.ascontiguousarray(params["conv_w"], dtype=np.float64)
    dpool = np.ascontiguousarray(dpool.reshape(N, H // POOL, W // POOL, CONV_CHANNELS))
    _conv_pool_backward(X, w, app["active"], dpool, POOL, dw, db, dX, input_grad)
    put("conv_w", dw)
    put("conv_b", db)

    if not input_grad:
        return grad, None, None
    dX = dX.reshape(G, V, H, W)
    dfeat = np.einsum("gijd,dk->gijk", dg, params["geo_w"].astype(np.float64))
    return grad, dX, dfeat


# ------------------------------------------------------------------- weights


@dataclass
class WeightNet:
    """Parameters plus the fixed pieces of the forward graph for one rig."""

    params: WeightNetParams
    temperature: float = DEFAULT_SOFTARGMAX_T

    def predict(self, stack: ViewStack) -> np.ndarray:
        return predict_weights(stack, self.params, self.temperature)


def _group_views(heatmaps):
    # (V, J, H, W) -> (J, V, H, W)
    return np.ascontiguousarray(np.swapaxes(np.asarray(heatmaps), 0, 1))


def predict_weights(stack: ViewStack, params: WeightNetParams, temperature: float = DEFAULT_SOFTARGMAX_T, fmats=None):
    """Fusion weights ``(views, joints)``, all strictly positive."""
    F, valid = pair_fundamentals(stack.cameras) if fmats is None else fmats
    X = _group_views(stack.heatmaps)
    feat, _ = geometry_inputs(X, F, valid, temperature)
    omega, _ = forward(params, X, feat, valid.astype(np.float64))
    return omega.T.copy()


# --------------------------------------------------------------------- losses


def fused_loss(stack: ViewStack, omega, target, tables: LineTables, normalize: bool = True, maxima=None):
    """MSE between adaptive fusion of ``stack`` with weights ``omega (J, V)`` and ``target``.

    Returns ``(loss, d_omega, d_heatmaps)``; the heatmap gradient routes the
    line-maximum term entirely to its argmax pixel.
    """
    V, J, H, W = stack.heatmaps.shape
    if maxima is None:
        M, arg = epipolar_maxima(stack, tables, with_argmax=True)
    else:
        M, arg = maxima
    w = np.asarray(omega, dtype=np.float64).T  # (V, J)
    a, c = adaptive_coefficients(tables.valid, w, normalize)
    fused = combine(stack.heatmaps, M, a, c)
    diff = fused - np.asarray(target, dtype=np.float64)
    n = diff.size
    loss = float(np.sum(diff * diff) / n)
    dF = 2.0 * diff / n
    Hm = np.asarray(stack.heatmaps, dtype=np.float64)
    da = np.einsum("vjyx,vjyx->vj", dF, Hm)
    dc = np.einsum("vjyx,vujyx->vuj", dF, M.astype(np.float64))
    dwbar = da + np.einsum("vu,vuj->uj", tables.valid.astype(np.float64), dc)
    if normalize:
        S = w.sum(axis=0)
        wbar = w / S
        dw = (dwbar - (dwbar * wbar).sum(axis=0)) / S
    else:
        dw = dwbar
    # heatmap gradient: own term plus routed line maxima
    dH = a[:, :, None, None] * dF
    dHf = dH.reshape(V, J, H * W)
    dFf = dF.reshape(V, J, H * W)
    for v in range(V):
        for u in range(V):
            if not tables.valid[v, u]:
                continue
            for j in range(J):
                np.add.at(dHf[u, j], arg[v, u, j], c[v, u, j] * dFf[v, j])
    return loss, dw.T.copy(), dH


def network_loss(stack: ViewStack, params: WeightNetParams, target, tables: LineTables, temperature=DEFAULT_SOFTARGMAX_T, normalize: bool = True, input_grad: bool = False):
    """End-to-end loss of one sample and its gradients.

    Returns ``(loss, grad_flat, d_heatmaps or None)``.
    """
    F, valid = pair_fundamentals(stack.cameras)
    X = _group_views(stack.heatmaps)
    feat, gcache = geometry_inputs(X, F, valid, temperature)
    omega, cache = forward(params, X, feat, valid.astype(np.float64))
    loss, d_omega, dH = fused_loss(stack, omega, target, tables, normalize)
    grad, dX, dfeat = backward(params, cache, d_omega, input_grad)
    if not input_grad:
        return loss, grad, None
    dX = dX + geometry_inputs_backward(gcache, dfeat)
    return loss, grad, dH + np.swapaxes(dX, 0, 1)


# ------------------------------------------------------------------- training


@dataclass
class TrainingSet:
    """Per-(sample, joint) groups with the fixed parts of the loss precomputed.

    With frozen heatmaps the fused-map MSE of group ``g`` is the quadratic
    ``sum_v (w^T Q[v] w - 2 b[v]^T w + c[v]) / (V * H * W)`` in the weights.
    """

    heatmaps: np.ndarray  # (G, V, H, W) float32
    feat: np.ndarray  # (G, V, V, 3)
    Q: np.ndarray  # (G, V, V, V)
    b: np.ndarray  # (G, V, V)
    c: np.ndarray  # (G, V)
    pair_mask: np.ndarray  # (V, V)
    occluded: np.ndarray  # (G, V) bool

    def __len__(self) -> int:
        return len(self.heatmaps)

    @property
    def norm(self) -> float:
        G, V, H, W = self.heatmaps.shape
        return float(V * H * W)

    def subset(self, idx) -> "TrainingSet":
        return TrainingSet(self.heatmaps[idx], self.feat[idx], self.Q[idx], self.b[idx], self.c[idx], self.pair_mask, self.occluded[idx])


def gram_terms(stack: ViewStack, target, tables: LineTables, maxima=None):
    """Quadratic-form pieces ``Q (J, V, V, V)``, ``b (J, V, V)``, ``c (J, V)`` of the fused MSE."""
    V, J, H, W = stack.heatmaps.shape
    M = epipolar_maxima(stack, tables) if maxima is None else maxima
    B = np.asarray(M, dtype=np.float64).reshape(V, V, J, H * W).copy()
    B = np.where(tables.valid[:, :, None, None], B, 0.0)
    idx = np.arange(V)
    B[idx, idx] = np.asarray(stack.heatmaps, dtype=np.float64).reshape(V, J, H * W)
    B = B.transpose(2, 0, 1, 3)  # (J, v, u, P)
    T = np.asarray(target, dtype=np.float64).reshape(V, J, H * W).transpose(1, 0, 2)  # (J, v, P)
    Q = B @ B.transpose(0, 1, 3, 2)
    b = np.einsum("jvup,jvp->jvu", B, T)
    c = np.einsum("jvp,jvp->jv", T, T)
    return Q, b, c


def build_training_set(samples, tables: LineTables, temperature: float = DEFAULT_SOFTARGMAX_T) -> TrainingSet:
    """Precompute training groups from samples with ``heatmaps`` (input) and ``clean`` (target)."""
    hs, fs, Qs, bs, cs, occ = [], [], [], [], [], []
    fm = None
    for smp in samples:
        stack = ViewStack(smp.heatmaps, smp.heatmap_cameras)
        if fm is None:
            fm = pair_fundamentals(stack.cameras)
        Q, b, c = gram_terms(stack, smp.clean, tables)
        X = _group_views(smp.heatmaps)
        feat, _ = geometry_inputs(X, fm[0], fm[1], temperature)
        hs.append(X.astype(np.float32))
        fs.append(feat)
        Qs.append(Q)
        bs.append(b)
        cs.append(c)
        occ.append(np.asarray(smp.occluded).T)
    if fm is None:
        raise ValueError("no training samples")
    return TrainingSet(
        np.concatenate(hs), np.concatenate(fs), np.concatenate(Qs), np.concatenate(bs), np.concatenate(cs),
        fm[1].astype(np.float64), np.concatenate(occ),
    )


def quadratic_loss(omega, Q, b, c, norm: float, normalize: bool = True):
    """Mean over groups of the fused MSE and its gradient with respect to ``omega (G, V)``."""
    G = len(omega)
    if normalize:
        S = omega.sum(axis=1, keepdims=True)
        wb = omega / S
    else:
        wb = omega
    Qw = np.einsum("gvuk,gk->gvu", Q, wb)
    per = (np.einsum("gvu,gu->g", Qw, wb) - 2.0 * np.einsum("gvu,gu->g", b, wb) + c.sum(axis=1)) / norm
    dwb = 2.0 * (Qw.sum(axis=1) - b.sum(axis=1)) / norm / G
    if normalize:
        dw = (dwb - (dwb * wb).sum(axis=1, keepdims=True)) / S
    else:
        dw = dwb
    return float(per.mean()), dw


def dataset_loss(params: WeightNetParams, data: TrainingSet, normalize: bool = True, chunk: int = 32) -> float:
    total = 0.0
    for s in range(0, len(data), chunk):
        part = data.subset(slice(s, s + chunk))
        omega, _ = forward(params, part.heatmaps, part.feat, data.pair_mask)
        loss, _ = quadratic_loss(omega, part.Q, part.b, part.c, data.norm, normalize)
        total += loss * len(part)
    return total / len(data)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.1
    momentum: float = 0.9
    steps: int = 500
    batch_size: int = 32
    seed: int = 0
    normalize: bool = False

    def __post_init__(self):
        if self.learning_rate < 0 or not np.isfinite(self.learning_rate):
            raise ValueError("learning_rate must be finite and non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")


def train(params: WeightNetParams, data: TrainingSet, config: TrainConfig = TrainConfig()):
    """SGD with momentum on the fused-heatmap MSE; returns ``(params, loss_curve)``.

    Minibatches are ``batch_size`` (sample, joint) groups drawn without
    replacement from a seeded permutation. By default the loss uses the raw
    weighted sum (``normalize=False``): with per-joint normalization an
    all-zero view acts as a free shrinkage term and the MSE optimum would
    favour blanked views.

    Parameters are kept at float32 precision after every update so that a saved
    checkpoint reloads to exactly the trained values. The loss curve holds the
    minibatch loss before each update.
    """
    rng = np.random.default_rng(config.seed)
    theta = params.flat.astype(np.float64)
    vel = np.zeros_like(theta)
    losses = np.zeros(config.steps)
    n = len(data)
    bs = min(config.batch_size, n)
    order = rng.permutation(n)
    pos = 0
    for step in range(config.steps):
        if pos + bs > n:
            order = rng.permutation(n)
            pos = 0
        idx = np.sort(order[pos : pos + bs])
        pos += bs
        cur = params.with_flat(theta)
        part = data.subset(idx)
        omega, cache = forward(cur, part.heatmaps, part.feat, data.pair_mask)
        loss, d_omega = quadratic_loss(omega, part.Q, part.b, part.c, data.norm, config.normalize)
        if not np.isfinite(loss):
            raise NonFiniteLoss(step, loss)
        grad, _, _ = backward(cur, cache, d_omega)
        if not np.all(np.isfinite(grad)):
            raise NonFiniteLoss(step, float("nan"))
        losses[step] = loss
        vel = config.momentum * vel - config.learning_rate * grad
        theta = (theta + vel).astype(np.float32).astype(np.float64)
    out = WeightNetParams(theta.astype(np.float32), params.resolution, params.seed, params.step + config.steps)
    if config.learning_rate == 0:
        out = params.with_flat(params.flat.copy(), step=params.step + config.steps)
    return out, losses
