"""Pinhole cameras, two-view epipolar geometry and geometric distances.

Pixel convention: coordinates are continuous and pixel (0, 0) is the centre of
the top-left pixel, so an image of width ``w`` spans ``[-0.5, w - 0.5]``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import (
    BehindCamera,
    DegenerateBaseline,
    DegenerateDenominator,
    DegenerateLine,
    NoConvergence,
    ZeroDepth,
)

ORTHO_TOL = 1e-9


def _frozen(a, shape) -> np.ndarray:
    arr = np.array(a, dtype=np.float64).reshape(shape)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class CameraModel:
    """Calibrated pinhole camera with ``x ~ K (R X + t)``.

    ``R`` maps world to camera coordinates, ``t`` is in the camera frame and
    ``image_size`` is ``(width, height)`` in pixels.
    """

    K: np.ndarray
    R: np.ndarray
    t: np.ndarray
    image_size: tuple[int, int]

    def __post_init__(self):
        object.__setattr__(self, "K", _frozen(self.K, (3, 3)))
        object.__setattr__(self, "R", _frozen(self.R, (3, 3)))
        object.__setattr__(self, "t", _frozen(self.t, (3,)))
        w, h = (int(s) for s in self.image_size)
        object.__setattr__(self, "image_size", (w, h))
        K, R = self.K, self.R
        if K[1, 0] != 0 or K[2, 0] != 0 or K[2, 1] != 0 or K[2, 2] != 1.0:
            raise ValueError("intrinsics must be upper-triangular with K[2,2] == 1")
        if np.abs(R @ R.T - np.eye(3)).max() > ORTHO_TOL or abs(np.linalg.det(R) - 1) > ORTHO_TOL:
            raise ValueError("rotation must be orthonormal with determinant +1")
        if w <= 0 or h <= 0:
            raise ValueError("image_size must be positive")
        if np.linalg.matrix_rank(self.P) != 3:
            raise ValueError("projection matrix must have rank 3")

    @property
    def P(self) -> np.ndarray:
        return self.K @ np.hstack([self.R, self.t[:, None]])

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    @property
    def optical_axis(self) -> np.ndarray:
        return self.R[2].copy()

    def resampled(self, size: tuple[int, int]) -> "CameraModel":
        """Same camera observed on a pixel grid of a different ``size``.

        The grid covers the same field of view, so pixel centres map with the
        half-pixel offset ``u' = (u + 0.5) * s - 0.5``.
        """
        sx = size[0] / self.image_size[0]
        sy = size[1] / self.image_size[1]
        A = np.array([[sx, 0.0, 0.5 * sx - 0.5], [0.0, sy, 0.5 * sy - 0.5], [0.0, 0.0, 1.0]])
        return CameraModel(A @ self.K, self.R, self.t, size)

    def __eq__(self, other):
        if not isinstance(other, CameraModel):
            return NotImplemented
        return (
            np.array_equal(self.K, other.K)
            and np.array_equal(self.R, other.R)
            and np.array_equal(self.t, other.t)
            and self.image_size == other.image_size
        )

    def __hash__(self):
        return hash((self.K.tobytes(), self.R.tobytes(), self.t.tobytes(), self.image_size))

    def to_dict(self) -> dict:
        return {
            "K": [float(v) for v in self.K.ravel()],
            "R": [float(v) for v in self.R.ravel()],
            "t": [float(v) for v in self.t],
            "image_size": list(self.image_size),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        return cls(d["K"], d["R"], d["t"], tuple(d["image_size"]))


def rescale_points(points, src_size, dst_size) -> np.ndarray:
    """Map pixel coordinates between two grids spanning the same field of view."""
    pts = np.asarray(points, dtype=np.float64)
    s = np.array([dst_size[0] / src_size[0], dst_size[1] / src_size[1]])
    return (pts + 0.5) * s - 0.5


def rig_to_json(cameras: Sequence[CameraModel]) -> str:
    # repr-based float formatting round-trips float64 exactly
    return json.dumps({"cameras": [c.to_dict() for c in cameras]}, indent=1)


def rig_from_json(text: str) -> list[CameraModel]:
    return [CameraModel.from_dict(d) for d in json.loads(text)["cameras"]]


def project(camera: CameraModel, point, strict: bool = True) -> np.ndarray:
    """Project world point(s) of shape ``(..., 3)`` to pixels ``(..., 2)``.

    The result is not clipped to the image.
    """
    X = np.asarray(point, dtype=np.float64)
    Xc = X @ camera.R.T + camera.t
    z = Xc[..., 2]
    if np.any(np.abs(z) < 1e-12):
        raise ZeroDepth("point lies on the camera's principal plane")
    if strict and np.any(z < 0):
        raise BehindCamera("point is behind the camera")
    x = Xc @ camera.K.T
    return x[..., :2] / x[..., 2:3]


def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def _projection(c) -> np.ndarray:
    if isinstance(c, CameraModel):
        return c.P
    P = np.asarray(c, dtype=np.float64)
    if P.shape != (3, 4):
        raise ValueError("expected a CameraModel or a 3x4 projection matrix")
    return P


def _center_h(P: np.ndarray) -> np.ndarray:
    return np.linalg.svd(P)[2][-1]


def _fix_sign(m: np.ndarray) -> np.ndarray:
    flat = m.ravel()
    nz = np.flatnonzero(np.abs(flat) > 1e-12)
    if nz.size and flat[nz[0]] < 0:
        m = -m
    return m


def _normalize_fundamental(m: np.ndarray) -> np.ndarray:
    return _fix_sign(m / np.linalg.norm(m))


@dataclass(frozen=True, eq=False)
class FundamentalMatrix:
    """Unit-Frobenius rank-2 matrix with ``x2^T m x1 = 0`` for correspondences.

    The sign is fixed so that the first entry (row-major) with magnitude above
    ``1e-12`` is positive.
    """

    m: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "m", _frozen(_normalize_fundamental(np.asarray(self.m, float)), (3, 3)))

    def transpose(self) -> "FundamentalMatrix":
        # already unit norm; only the sign may change, which keeps values exact
        out = object.__new__(FundamentalMatrix)
        object.__setattr__(out, "m", _frozen(_fix_sign(self.m.T), (3, 3)))
        return out

    @property
    def T(self) -> "FundamentalMatrix":
        return self.transpose()


def fundamental_from_projections(p1, p2) -> FundamentalMatrix:
    """F mapping points of view 1 to epipolar lines in view 2.

    Built as ``[e2]_x P2 P1^+`` with ``e2 = P2 C1``. Accepts cameras or raw
    3x4 projection matrices; any non-zero rescaling of either projection yields
    the same normalized F.
    """
    P1, P2 = _projection(p1), _projection(p2)
    C1, C2 = _center_h(P1), _center_h(P2)
    if abs(C1[3]) < 1e-12 or abs(C2[3]) < 1e-12:
        raise DegenerateBaseline("camera at infinity")
    if np.linalg.norm(C1[:3] / C1[3] - C2[:3] / C2[3]) <= 1e-9:
        raise DegenerateBaseline("camera centers coincide")
    e2 = P2 @ C1
    F = skew(e2) @ P2 @ np.linalg.pinv(P1, rcond=1e-12)
    return FundamentalMatrix(F)


@dataclass(frozen=True)
class EpipolarLine:
    """Line ``a*u + b*v + c = 0`` in pixel coordinates, with ``a^2 + b^2 = 1``."""

    a: float
    b: float
    c: float

    def residual(self, point) -> float:
        return self.a * point[0] + self.b * point[1] + self.c


def _apply(m: np.ndarray, u, v):
    # written out so row-vs-column evaluation is bit-identical everywhere
    return (
        m[0, 0] * u + m[0, 1] * v + m[0, 2],
        m[1, 0] * u + m[1, 1] * v + m[1, 2],
        m[2, 0] * u + m[2, 1] * v + m[2, 2],
    )


def epipolar_lines(f: FundamentalMatrix, points) -> np.ndarray:
    """Normalized lines ``(N, 3)`` for points ``(N, 2)``; NaN rows where degenerate."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    u, v = pts[:, 0], pts[:, 1]
    a, b, c = _apply(f.m, u, v)
    n = np.hypot(a, b)
    bad = n <= 1e-12 * (np.abs(u) + np.abs(v) + 1.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        lines = np.stack([a / n, b / n, c / n], axis=1)
    lines[bad] = np.nan
    return lines


def epipolar_line(f: FundamentalMatrix, x) -> EpipolarLine:
    """Epipolar line in the second view of pixel ``x`` from the first view."""
    line = epipolar_lines(f, x)[0]
    if np.isnan(line[0]):
        raise DegenerateLine(f"point {tuple(x)} is the epipole")
    return EpipolarLine(float(line[0]), float(line[1]), float(line[2]))


def sampson_distance(f: FundamentalMatrix, x, x_prime):
    """Squared Sampson distance (pixels^2) between ``x`` (view 1) and ``x_prime`` (view 2).

    Broadcasts over leading dimensions. Evaluation is arranged so that
    ``sampson_distance(F, x, x2) == sampson_distance(F.T, x2, x)`` holds bitwise.
    """
    m = np.asarray(f.m if isinstance(f, FundamentalMatrix) else f, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    xp = np.asarray(x_prime, dtype=np.float64)
    u, v = x[..., 0], x[..., 1]
    up, vp = xp[..., 0], xp[..., 1]
    l2 = _apply(m, u, v)  # F x
    l1 = _apply(m.T, up, vp)  # F^T x'
    r = 0.5 * ((up * l2[0] + vp * l2[1] + l2[2]) + (u * l1[0] + v * l1[1] + l1[2]))
    den = (l2[0] ** 2 + l2[1] ** 2) + (l1[0] ** 2 + l1[1] ** 2)
    if np.any(den <= 1e-18):
        raise DegenerateDenominator("both points are epipoles")
    return r * r / den


def _dlt_two_view(P1, P2, x1, x2) -> np.ndarray:
    A = np.stack(
        [
            x1[:, 0, None] * P1[2] - P1[0],
            x1[:, 1, None] * P1[2] - P1[1],
            x2[:, 0, None] * P2[2] - P2[0],
            x2[:, 1, None] * P2[2] - P2[1],
        ],
        axis=1,
    )
    X = np.linalg.svd(A)[2][:, -1]
    return X[:, :3] / X[:, 3:4]


def _residuals_and_jacobian(Ps, xs, X):
    rs, Js = [], []
    Xh = np.concatenate([X, np.ones((len(X), 1))], axis=1)
    for P, x in zip(Ps, xs):
        p = Xh @ P.T
        w = p[:, 2:3]
        rs.append(p[:, :2] / w - x)
        # d(p_i / w)/dX = (P_i w - p_i P_2) / w^2
        J = (P[None, :2, :3] * w[:, :, None] - p[:, :2, None] * P[None, 2:3, :3]) / (w[:, :, None] ** 2)
        Js.append(J)
    return np.concatenate(rs, axis=1), np.concatenate(Js, axis=1)


def reprojection_distance_oracle(p1: CameraModel, p2: CameraModel, x, x_prime, max_iter: int = 200):
    """Gold-standard two-view reprojection distance (pixels), for tests.

    Triangulates by DLT, then refines the 3D point with Levenberg-Marquardt
    until an accepted step lowers the summed squared reprojection error by
    less than ``1e-12``. Broadcasts over a leading batch dimension.
    """
    fundamental_from_projections(p1, p2)  # baseline check
    x = np.asarray(x, dtype=np.float64)
    xp = np.asarray(x_prime, dtype=np.float64)
    scalar = x.ndim == 1
    x, xp = x.reshape(-1, 2), xp.reshape(-1, 2)
    Ps = (_projection(p1), _projection(p2))
    X = _dlt_two_view(Ps[0], Ps[1], x, xp)
    r, J = _residuals_and_jacobian(Ps, (x, xp), X)
    cost = (r**2).sum(1)
    mu = np.full(len(X), 1e-3)
    active = np.ones(len(X), dtype=bool)
    for _ in range(max_iter):
        if not active.any():
            break
        idx = np.flatnonzero(active)
        Ja, ra = J[idx], r[idx]
        JtJ = np.einsum("nki,nkj->nij", Ja, Ja)
        g = np.einsum("nki,nk->ni", Ja, ra)
        A = JtJ + mu[idx, None, None] * np.eye(3)[None] * (1.0 + np.einsum("nii->ni", JtJ))[:, :, None]
        step = -np.linalg.solve(A, g[:, :, None])[:, :, 0]
        Xn = X[idx] + step
        rn, Jn = _residuals_and_jacobian(Ps, (x[idx], xp[idx]), Xn)
        cn = (rn**2).sum(1)
        better = cn < cost[idx]
        gain = cost[idx] - cn
        acc = idx[better]
        X[acc], r[acc], J[acc] = Xn[better], rn[better], Jn[better]
        cost[acc] = cn[better]
        mu[acc] *= 0.1
        mu[idx[~better]] *= 10.0
        done = (better & (gain < 1e-12)) | (~better & (mu[idx] > 1e12)) | (cost[idx] < 1e-24)
        active[idx[done]] = False
    else:
        if active.any():
            raise NoConvergence(f"{int(active.sum())} points did not converge in {max_iter} iterations")
    d = np.sqrt(cost)
    return float(d[0]) if scalar else d
