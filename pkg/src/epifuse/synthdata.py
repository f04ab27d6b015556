"""Reproducible synthetic multi-camera samples.

A ring of cameras watches a randomly posed 15-joint skeleton. Clean heatmaps
are Gaussians at the projected joints; "occluded" (view, joint) entries get a
corrupted heatmap (blanked, shifted ghost, or uniform noise) while the camera
geometry stays exact. Labels come straight from the corruption draw.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

from .errors import FormatVersionMismatch, TooFewVisibleViews, TruncatedPayload
from .geometry import CameraModel, project, rescale_points
from .heatmap import render_gaussian

FORMAT_VERSION = 1

JOINT_NAMES = (
    "root", "belly", "neck",
    "r_hip", "r_knee", "r_ankle",
    "l_hip", "l_knee", "l_ankle",
    "r_shoulder", "r_elbow", "r_wrist",
    "l_shoulder", "l_elbow", "l_wrist",
)  # fmt: skip
JOINT_TYPES = ("root", "belly", "neck", "hip", "knee", "ankle", "shoulder", "elbow", "wrist")
JOINT_TYPE_OF = tuple(n.split("_", 1)[-1] for n in JOINT_NAMES)
PARENTS = (-1, 0, 1, 0, 3, 4, 0, 6, 7, 2, 9, 10, 2, 12, 13)

# metres, z up, facing +y (so the person's right is +x)
TEMPLATE = np.array(
    [
        [0.00, 0.00, 0.95],
        [0.00, 0.00, 1.15],
        [0.00, 0.00, 1.50],
        [0.10, 0.00, 0.92],
        [0.10, 0.02, 0.50],
        [0.10, 0.00, 0.08],
        [-0.10, 0.00, 0.92],
        [-0.10, 0.02, 0.50],
        [-0.10, 0.00, 0.08],
        [0.19, 0.00, 1.45],
        [0.26, 0.00, 1.18],
        [0.30, 0.03, 0.93],
        [-0.19, 0.00, 1.45],
        [-0.26, 0.00, 1.18],
        [-0.30, 0.03, 0.93],
    ]
)
TEMPLATE.setflags(write=False)

# maximum rotation (degrees) of the bone ending at each joint, about a random axis
ANGLE_LIMITS = np.array([0, 10, 15, 0, 35, 45, 0, 35, 45, 0, 75, 80, 0, 75, 80], dtype=np.float64)

MODE_NONE, MODE_BLANK, MODE_GHOST, MODE_NOISE = 0, 1, 2, 3
MODE_NAMES = ("blank", "ghost", "noise")


def bones() -> list[tuple[int, int]]:
    return [(p, c) for c, p in enumerate(PARENTS) if p >= 0]


def bone_lengths(skeleton) -> np.ndarray:
    X = np.asarray(skeleton)
    return np.array([np.linalg.norm(X[c] - X[p]) for p, c in bones()])


# ----------------------------------------------------------------------------- rig


def look_at(center, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """World-to-camera rotation with x right, y down and z towards ``target``."""
    fwd = np.asarray(target, float) - np.asarray(center, float)
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    return np.stack([right, down, fwd])


def build_rig(
    n: int = 8,
    radius: float = 2.0,
    heights: Sequence[float] = (0.9, 2.3),
    resolution=(256, 256),
    focal: float = 150.0,
    target=(0.0, 0.0, 1.0),
) -> list[CameraModel]:
    """Cameras evenly spaced in azimuth on a circle, alternating over ``heights``."""
    if n < 2:
        raise ValueError("a rig needs at least two cameras")
    w, h = resolution
    K = np.array([[focal, 0.0, (w - 1) / 2.0], [0.0, focal, (h - 1) / 2.0], [0.0, 0.0, 1.0]])
    cams = []
    for i in range(n):
        phi = 2.0 * np.pi * i / n
        C = np.array([radius * np.cos(phi), radius * np.sin(phi), heights[i % len(heights)]])
        R = look_at(C, target)
        cams.append(CameraModel(K, R, -R @ C, (w, h)))
    return cams


# ---------------------------------------------------------------------------- pose


@dataclass(frozen=True)
class PoseLimits:
    angle_scale: float = 1.0
    scale_jitter: float = 0.08
    yaw: bool = True
    translation_radius: float = 0.5


def _axis_angle(axis, angle) -> np.ndarray:
    x, y, z = axis
    K = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)


def sample_pose(seed: int, limits: PoseLimits = PoseLimits()) -> np.ndarray:
    """Template skeleton with seeded random bone rotations, yaw and ground-plane shift."""
    rng = np.random.default_rng(seed)
    J = len(JOINT_NAMES)
    axes = rng.normal(size=(J, 3))
    axes /= np.linalg.norm(axes, axis=1, keepdims=True)
    angles = np.deg2rad(ANGLE_LIMITS) * limits.angle_scale * rng.uniform(size=J)
    scale = 1.0 + limits.scale_jitter * rng.uniform(-1.0, 1.0)
    yaw = rng.uniform(0.0, 2.0 * np.pi) if limits.yaw else 0.0
    r = limits.translation_radius * np.sqrt(rng.uniform())
    phi = rng.uniform(0.0, 2.0 * np.pi)

    G = [np.eye(3)] * J
    D = np.zeros((J, 3))
    for c, p in enumerate(PARENTS):
        if p < 0:
            continue
        G[c] = G[p] @ _axis_angle(axes[c], angles[c])
        b = TEMPLATE[c] - TEMPLATE[p]
        D[c] = D[p] + (G[c] @ b - b)
    X = (TEMPLATE + D) * scale
    # keep the pelvis height when rescaling so feet stay near the floor
    X[:, 2] += TEMPLATE[0, 2] * (1.0 - scale)
    c, s = np.cos(yaw), np.sin(yaw)
    Rz = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    X = X @ Rz.T
    X[:, 0] += r * np.cos(phi)
    X[:, 1] += r * np.sin(phi)
    return X


# ------------------------------------------------------------------------ samples


@dataclass(frozen=True)
class CorruptionSpec:
    probability: float = 0.203
    mix: tuple = (0.3, 0.5, 0.2)  # blank, ghost, noise
    ghost_shift: tuple = (4.0, 12.0)  # heatmap pixels
    ghost_amplitude: tuple = (0.5, 0.9)
    noise_amplitude: float = 0.3

    def __post_init__(self):
        if not 0.0 <= self.probability <= 1.0:
            raise ValueError("corruption probability must lie in [0, 1]")
        mix = tuple(float(m) for m in self.mix)
        if len(mix) != 3 or min(mix) < 0 or abs(sum(mix) - 1.0) > 1e-9:
            raise ValueError("mode mix must be three non-negative proportions summing to 1")
        object.__setattr__(self, "mix", mix)
        object.__setattr__(self, "ghost_shift", tuple(float(v) for v in self.ghost_shift))
        object.__setattr__(self, "ghost_amplitude", tuple(float(v) for v in self.ghost_amplitude))
        if not 0 < self.ghost_shift[0] <= self.ghost_shift[1]:
            raise ValueError("ghost shift range must be positive and ordered")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "CorruptionSpec":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass(eq=False)
class MultiviewSample:
    skeleton: np.ndarray  # (J, 3) metres
    clean: np.ndarray  # (V, J, H, W) float32
    heatmaps: np.ndarray  # corrupted, same shape
    occluded: np.ndarray  # (V, J) bool
    modes: np.ndarray  # (V, J) int8, MODE_*
    cameras: tuple  # image-resolution rig
    seed: int
    sigma: float

    @property
    def resolution(self) -> tuple[int, int]:
        return self.heatmaps.shape[3], self.heatmaps.shape[2]

    @property
    def heatmap_cameras(self) -> list[CameraModel]:
        return [c.resampled(self.resolution) for c in self.cameras]

    def gt_2d(self, heatmap_space: bool = False) -> np.ndarray:
        """Ground-truth projections ``(V, J, 2)`` in image (or heatmap) pixels."""
        cams = self.heatmap_cameras if heatmap_space else self.cameras
        return np.stack([project(c, self.skeleton) for c in cams])


def render_sample(
    skeleton,
    rig: Sequence[CameraModel],
    corruption: CorruptionSpec,
    seed: int,
    resolution=(64, 64),
    sigma: float = 2.0,
    max_attempts: int = 100,
) -> MultiviewSample:
    """Render clean and corrupted heatmaps of ``skeleton`` for every camera."""
    X = np.asarray(skeleton, dtype=np.float64)
    w, h = resolution
    V, J = len(rig), len(X)
    hcams = [c.resampled((w, h)) for c in rig]
    depth = np.stack([X @ c.R[2] + c.t[2] for c in rig])
    if np.any((depth > 1e-12).sum(axis=0) < 2):
        raise ValueError("every joint must have positive depth in at least two views")
    uv = np.stack([project(c, X, strict=False) for c in hcams])
    clean = np.zeros((V, J, h, w), dtype=np.float32)
    for v in range(V):
        for j in range(J):
            if depth[v, j] > 1e-12:
                clean[v, j] = render_gaussian(uv[v, j], sigma, (w, h), np.float32)

    rng = np.random.default_rng(seed)
    for _ in range(max_attempts):
        occ = rng.uniform(size=(V, J)) < corruption.probability
        if not np.any(occ.all(axis=0)):
            break
    else:
        raise TooFewVisibleViews(f"a joint was corrupted in all views after {max_attempts} draws")

    heat = clean.copy()
    modes = np.zeros((V, J), dtype=np.int8)
    for v in range(V):
        for j in range(J):
            if not occ[v, j]:
                continue
            mode = int(rng.choice(3, p=corruption.mix))
            if mode == 0:
                heat[v, j] = 0.0
            elif mode == 1:
                theta = rng.uniform(0.0, 2.0 * np.pi)
                r = rng.uniform(*corruption.ghost_shift)
                amp = rng.uniform(*corruption.ghost_amplitude)
                c = uv[v, j] + r * np.array([np.cos(theta), np.sin(theta)])
                heat[v, j] = (amp * render_gaussian(c, sigma, (w, h))).astype(np.float32)
            else:
                heat[v, j] = rng.uniform(0.0, corruption.noise_amplitude, size=(h, w)).astype(np.float32)
            modes[v, j] = mode + 1
    occluded = np.any(heat != clean, axis=(2, 3))
    modes[~occluded] = MODE_NONE
    return MultiviewSample(X, clean, heat, occluded, modes, tuple(rig), int(seed), float(sigma))


# ------------------------------------------------------------------------ datasets


@dataclass(frozen=True)
class DatasetSpec:
    cameras: tuple
    resolution: tuple = (64, 64)
    sigma: float = 2.0
    corruption: CorruptionSpec = field(default_factory=CorruptionSpec)
    pose: PoseLimits = field(default_factory=PoseLimits)
    seed: int = 0
    num_samples: int = 100
    train_fraction: float = 0.75

    def sample_seeds(self, index: int) -> tuple[int, int]:
        state = np.random.SeedSequence([int(self.seed), int(index)]).generate_state(2, dtype=np.uint64)
        return int(state[0]) >> 1, int(state[1]) >> 1

    def generate(self, index: int) -> MultiviewSample:
        pose_seed, render_seed = self.sample_seeds(index)
        X = sample_pose(pose_seed, self.pose)
        return render_sample(X, self.cameras, self.corruption, render_seed, self.resolution, self.sigma)

    def iter_samples(self, indices: Optional[Sequence[int]] = None) -> Iterator[MultiviewSample]:
        for i in range(self.num_samples) if indices is None else indices:
            yield self.generate(i)

    def split(self) -> tuple[range, range]:
        n_train = int(round(self.train_fraction * self.num_samples))
        return range(0, n_train), range(n_train, self.num_samples)

    def to_dict(self) -> dict:
        return {
            "rig": [c.to_dict() for c in self.cameras],
            "resolution": list(self.resolution),
            "sigma": self.sigma,
            "corruption": self.corruption.to_dict(),
            "pose": asdict(self.pose),
            "seed": self.seed,
            "num_samples": self.num_samples,
            "train_fraction": self.train_fraction,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        return cls(
            cameras=tuple(CameraModel.from_dict(c) for c in d["rig"]),
            resolution=tuple(d["resolution"]),
            sigma=float(d["sigma"]),
            corruption=CorruptionSpec.from_dict(d["corruption"]),
            pose=PoseLimits(**d["pose"]),
            seed=int(d["seed"]),
            num_samples=int(d["num_samples"]),
            train_fraction=float(d["train_fraction"]),
        )


def _sample_nbytes(V: int, J: int, w: int, h: int) -> int:
    return 2 * V * J * h * w * 4 + J * 3 * 8


def write_dataset(path, spec: DatasetSpec, samples: Optional[Sequence[MultiviewSample]] = None) -> dict:
    """Write ``manifest.json`` and ``samples.bin``; returns the manifest.

    Samples default to the full generated set of ``spec``. Payload per sample:
    clean heatmaps then corrupted heatmaps (little-endian float32, view-major,
    joint-major, row-major) followed by the skeleton (float64, J x 3).
    """
    os.makedirs(path, exist_ok=True)
    entries = []
    offset = 0
    source = spec.iter_samples() if samples is None else samples
    with open(os.path.join(path, "samples.bin"), "wb") as fh:
        for i, s in enumerate(source):
            chunk = (
                np.ascontiguousarray(s.clean, dtype="<f4").tobytes()
                + np.ascontiguousarray(s.heatmaps, dtype="<f4").tobytes()
                + np.ascontiguousarray(s.skeleton, dtype="<f8").tobytes()
            )
            fh.write(chunk)
            entries.append(
                {
                    "index": i,
                    "seed": s.seed,
                    "offset": offset,
                    "length": len(chunk),
                    "occluded": s.occluded.astype(int).tolist(),
                    "modes": s.modes.astype(int).tolist(),
                }
            )
            offset += len(chunk)
    manifest = {
        "format_version": FORMAT_VERSION,
        "spec": spec.to_dict(),
        "num_views": len(spec.cameras),
        "num_joints": len(JOINT_NAMES),
        "payload_bytes": offset,
        "samples": entries,
    }
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return manifest


def read_manifest(path) -> dict:
    with open(os.path.join(path, "manifest.json")) as fh:
        manifest = json.load(fh)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise FormatVersionMismatch(
            f"dataset format {manifest.get('format_version')!r}, expected {FORMAT_VERSION}"
        )
    return manifest


class DatasetReader:
    """Lazy, validated view of a dataset directory; samples decode on access."""

    def __init__(self, path):
        self.path = path
        self.manifest = read_manifest(path)
        self.spec = DatasetSpec.from_dict(self.manifest["spec"])
        V, J = self.manifest["num_views"], self.manifest["num_joints"]
        w, h = self.spec.resolution
        self._shape = (V, J, h, w)
        expected = _sample_nbytes(V, J, w, h)
        payload_path = os.path.join(path, "samples.bin")
        if not os.path.isfile(payload_path):
            raise TruncatedPayload("samples.bin is missing")
        size = os.path.getsize(payload_path)
        if size != self.manifest["payload_bytes"]:
            raise TruncatedPayload(f"payload has {size} bytes, manifest says {self.manifest['payload_bytes']}")
        for e in self.manifest["samples"]:
            if e["length"] != expected or e["offset"] + e["length"] > size:
                raise TruncatedPayload(f"sample {e['index']}: bad payload length {e['length']} (expected {expected})")
        self._raw = np.memmap(payload_path, dtype=np.uint8, mode="r") if size else np.zeros(0, np.uint8)

    def __len__(self) -> int:
        return len(self.manifest["samples"])

    def __getitem__(self, i: int) -> MultiviewSample:
        e = self.manifest["samples"][i]
        V, J, h, w = self._shape
        n_hm = V * J * h * w
        buf = self._raw[e["offset"] : e["offset"] + e["length"]]
        clean = np.frombuffer(buf[: 4 * n_hm], dtype="<f4").reshape(V, J, h, w).astype(np.float32)
        heat = np.frombuffer(buf[4 * n_hm : 8 * n_hm], dtype="<f4").reshape(V, J, h, w).astype(np.float32)
        skel = np.frombuffer(buf[8 * n_hm :], dtype="<f8").reshape(J, 3).astype(np.float64)
        return MultiviewSample(
            skel,
            clean,
            heat,
            np.array(e["occluded"], dtype=bool),
            np.array(e["modes"], dtype=np.int8),
            self.spec.cameras,
            int(e["seed"]),
            self.spec.sigma,
        )

    def __iter__(self) -> Iterator[MultiviewSample]:
        for i in range(len(self)):
            yield self[i]

    def iter_samples(self, indices: Optional[Sequence[int]] = None) -> Iterator[MultiviewSample]:
        for i in range(len(self)) if indices is None else indices:
            yield self[i]

    def split(self) -> tuple[range, range]:
        n_train = int(round(self.spec.train_fraction * len(self)))
        return range(0, n_train), range(n_train, len(self))


def read_dataset(path) -> tuple[DatasetSpec, list[MultiviewSample]]:
    """Load a dataset written by :func:`write_dataset` into memory (bit-exact round trip)."""
    reader = DatasetReader(path)
    return reader.spec, list(reader)
