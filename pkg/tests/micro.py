"""Two-view, one-joint, 16x16 problem used by the gradient checks."""

import numpy as np

from epifuse import fusion as fu
from epifuse import synthdata as sd
from epifuse import weightnet as wn
from epifuse.geometry import project
from epifuse.heatmap import render_gaussian

SIZE = (16, 16)
TEMPERATURE = 10.0


def build(seed: int = 0):
    rig = sd.build_rig(4)
    cams = [rig[0].resampled(SIZE), rig[1].resampled(SIZE)]
    rng = np.random.default_rng(seed)
    X = np.array([0.0, 0.0, 1.0]) + rng.uniform(-0.15, 0.15, 3)
    uv = [project(c, X) for c in cams]
    target = np.stack([render_gaussian(u, 1.5, SIZE) for u in uv])[:, None]
    H = target.copy()
    shift = rng.uniform(2.0, 4.0, 2) * rng.choice([-1, 1], 2)
    H[1, 0] = 0.7 * render_gaussian(uv[1] + shift, 1.5, SIZE) + 0.05 * rng.uniform(size=SIZE[::-1])
    H[0, 0] = H[0, 0] + 0.02 * rng.uniform(size=SIZE[::-1])
    stack = fu.ViewStack(H, cams)
    tables = fu.precompute_line_tables(cams, SIZE)
    p = wn.WeightNetParams.init(SIZE, seed=seed, dtype=np.float64)
    flat = p.flat.copy()
    # non-zero biases keep flat background regions off the ReLU kinks
    for name in p.names:
        if name.endswith("_b"):
            sl = p.slice_of(name)
            flat[sl] = rng.normal(0.0, 0.05, sl.stop - sl.start)
    return stack, target, tables, p.with_flat(flat)


def param_loss_fn(stack, target, tables):
    """Loss as a function of the flat parameters, with every parameter-free piece fixed."""
    F, valid = wn.pair_fundamentals(stack.cameras)
    X = np.swapaxes(stack.heatmaps, 0, 1)
    feat, _ = wn.geometry_inputs(X, F, valid, TEMPERATURE)
    maxima = fu.epipolar_maxima(stack, tables, with_argmax=True)
    mask = valid.astype(np.float64)

    def loss(params):
        omega, _ = wn.forward(params, X, feat, mask)
        return wn.fused_loss(stack, omega, target, tables, maxima=maxima)[0]

    return loss


def conv_pre(params, X):
    """Reference 3x3 zero-padded convolution, ``(N, C, H, W)``."""
    X = np.asarray(X, dtype=np.float64)
    X = X.reshape(-1, *X.shape[-2:])
    N, H, W = X.shape
    Xp = np.pad(X, ((0, 0), (1, 1), (1, 1)))
    w, b = params["conv_w"], params["conv_b"]
    out = np.zeros((N, len(b), H, W)) + b[None, :, None, None]
    k = 0
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            out += w[None, :, k, None, None] * Xp[:, None, 1 + dy : 1 + dy + H, 1 + dx : 1 + dx + W]
            k += 1
    return out


def preactivation_margin(params, stack):
    """Smallest |pre-activation| over every ReLU in the forward pass."""
    F, valid = wn.pair_fundamentals(stack.cameras)
    X = np.swapaxes(stack.heatmaps, 0, 1)
    feat, _ = wn.geometry_inputs(X, F, valid, TEMPERATURE)
    _, c = wn.forward(params, X, feat, valid.astype(np.float64))
    g_pre = c.geo["g_pre"][:, valid]
    return min(np.abs(a).min() for a in (conv_pre(params, X), c.app["a_pre"], g_pre, c.h1_pre, c.h2_pre))


def relative_error(analytic, numeric, floor: float = 1e-8):
    a, n = np.asarray(analytic), np.asarray(numeric)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
