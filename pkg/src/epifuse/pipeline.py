"""Per-sample 2D/3D pose recovery for every compared method.

Each method starts from the same unfused heatmaps and never sees another
method's intermediate results.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigInvalid, DegenerateSolution, NoConsensus
from .fusion import ViewStack, adaptive_coefficients, combine, epipolar_maxima, heuristic_coefficients, precompute_line_tables
from .geometry import CameraModel, rescale_points
from .heatmap import DEFAULT_SOFTARGMAX_T
from .triangulation import triangulate_dlt, triangulate_ransac
from .weightnet import WeightNetParams, _group_views, batched_peaks, forward, geometry_inputs, pair_fundamentals

METHODS = ("nofuse", "heuristic", "score", "ransac", "adafuse")
FUSING = ("heuristic", "score", "adafuse")


@dataclass(frozen=True)
class MethodConfig:
    """Method settings.

    The final 2D location of a (fused) map is the expectation of pixel
    coordinates under its spatial SoftMax at ``decode_temperature`` (the
    ``soft`` decoder), or the SoftMax mode (``hard``), which is the plain argmax.
    """

    lam: float = 0.5
    decoder: str = "soft"
    decode_temperature: float = 20.0
    geometry_temperature: float = DEFAULT_SOFTARGMAX_T
    ransac_threshold: float = 10.0
    normalize_adaptive: bool = True

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigInvalid(f"lambda must lie in [0, 1], got {self.lam}")
        if self.decoder not in ("soft", "hard"):
            raise ConfigInvalid(f"decoder must be 'soft' or 'hard', got {self.decoder!r}")
        for name in ("geometry_temperature", "decode_temperature", "ransac_threshold"):
            if not getattr(self, name) > 0:
                raise ConfigInvalid(f"{name} must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def decode(heatmaps, decoder: str = "soft", temperature: float = 20.0) -> tuple[np.ndarray, np.ndarray]:
    """Peak locations ``(..., 2)`` and scores ``(...)`` of every grid in ``heatmaps (..., H, W)``.

    ``hard`` takes the first maximum; ``soft`` is the support-restricted
    soft-argmax. All-zero grids decode to the grid centre with score 0.
    """
    h = np.asarray(heatmaps)
    if decoder == "hard":
        H, W = h.shape[-2:]
        flat = h.reshape(h.shape[:-2] + (H * W,))
        i = flat.argmax(axis=-1)
        y, x = np.divmod(i, W)
        s = np.take_along_axis(flat, i[..., None], axis=-1)[..., 0].astype(np.float64)
        return np.stack([x, y], axis=-1).astype(np.float64), s
    x, y, s, _ = batched_peaks(h, temperature)
    return np.stack([x, y], axis=-1), s


def triangulate_all(points, cameras: Sequence[CameraModel]) -> np.ndarray:
    """DLT per joint; ``points`` is ``(V, J, 2)`` in image pixels."""
    V, J, _ = points.shape
    out = np.empty((J, 3))
    for j in range(J):
        try:
            out[j] = triangulate_dlt(points[:, j], cameras)
        except DegenerateSolution:
            out[j] = np.nan
    return out


@dataclass
class MethodResult:
    pred2d: np.ndarray  # (V, J, 2) image pixels
    pred3d: np.ndarray  # (J, 3) metres
    weights: Optional[np.ndarray] = None  # (V, J) fusion weights where applicable
    inliers: Optional[np.ndarray] = None  # (V, J) RANSAC inlier masks


class Pipeline:
    """Runs the requested methods on samples observed by one fixed rig."""

    def __init__(
        self,
        cameras: Sequence[CameraModel],
        resolution,
        config: MethodConfig = MethodConfig(),
        params: Optional[WeightNetParams] = None,
    ):
        self.cameras = tuple(cameras)
        self.resolution = (int(resolution[0]), int(resolution[1]))
        self.hcams = tuple(c.resampled(self.resolution) for c in self.cameras)
        self.config = config
        self.params = params
        self.tables = precompute_line_tables(self.hcams, self.resolution, allow_degenerate=True)
        self.fmats = pair_fundamentals(self.hcams)

    def _to_image(self, pts) -> np.ndarray:
        return np.stack([rescale_points(p, self.resolution, c.image_size) for p, c in zip(pts, self.cameras)])

    def _decode(self, heatmaps):
        return decode(heatmaps, self.config.decoder, self.config.decode_temperature)

    def _finish(self, fused, weights=None) -> MethodResult:
        # suppression and decoding in one step: the decoder's softmax is the spatial SoftMax
        pts, _ = self._decode(fused)
        img = self._to_image(pts)
        return MethodResult(img, triangulate_all(img, self.cameras), weights)

    def adaptive_weights(self, heatmaps) -> np.ndarray:
        if self.params is None:
            raise ValueError("adafuse needs trained weight-network parameters")
        X = _group_views(heatmaps)
        F, valid = self.fmats
        feat, _ = geometry_inputs(X, F, valid, self.config.geometry_temperature)
        omega, _ = forward(self.params, X, feat, valid.astype(np.float64))
        return omega.T.copy()

    def run(self, heatmaps, methods: Sequence[str] = METHODS) -> dict[str, MethodResult]:
        unknown = set(methods) - set(METHODS)
        if unknown:
            raise ConfigInvalid(f"unknown methods {sorted(unknown)}")
        H = np.asarray(heatmaps)
        stack = ViewStack(H, self.hcams)
        valid = self.tables.valid
        out = {}
        if "nofuse" in methods:
            img = self._to_image(self._decode(H)[0])
            out["nofuse"] = MethodResult(img, triangulate_all(img, self.cameras))
        if "ransac" in methods:
            out["ransac"] = self._ransac(self._to_image(self._decode(H)[0]))
        if any(m in methods for m in FUSING):
            M = epipolar_maxima(stack, self.tables)
            Hd = H.astype(np.float64)
            if "heuristic" in methods:
                a, c = heuristic_coefficients(valid, stack.n_joints, self.config.lam)
                out["heuristic"] = self._finish(combine(Hd, M, a, c))
            if "score" in methods:
                w = H.max(axis=(2, 3)).astype(np.float64)
                # a joint with every view blank falls back to equal weights
                w[:, w.sum(axis=0) < 1e-12] = 1.0
                a, c = adaptive_coefficients(valid, w, normalize=True)
                out["score"] = self._finish(combine(Hd, M, a, c), w)
            if "adafuse" in methods:
                w = self.adaptive_weights(H)
                a, c = adaptive_coefficients(valid, w, normalize=self.config.normalize_adaptive)
                out["adafuse"] = self._finish(combine(Hd, M, a, c), w)
        return {m: out[m] for m in methods}

    def _ransac(self, pts) -> MethodResult:
        V, J, _ = pts.shape
        X = np.empty((J, 3))
        inl = np.zeros((V, J), dtype=bool)
        for j in range(J):
            try:
                X[j], inl[:, j] = triangulate_ransac(pts[:, j], self.cameras, self.config.ransac_threshold)
            except NoConsensus:
                X[j] = triangulate_dlt(pts[:, j], self.cameras)
                inl[:, j] = True
        pred2d = np.stack([_project_all(c, X) for c in self.cameras])
        return MethodResult(pred2d, X, inliers=inl)


def _project_all(cam: CameraModel, X) -> np.ndarray:
    xc = X @ cam.R.T + cam.t
    p = xc @ cam.K.T
    return p[:, :2] / p[:, 2:3]
