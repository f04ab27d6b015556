import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from epifuse.errors import AllZero
from epifuse.geometry import EpipolarLine
from epifuse.heatmap import (
    bilinear,
    check_heatmap,
    hard_argmax,
    max_on_line,
    rasterize_line,
    render_gaussian,
    soft_argmax,
    spatial_softmax,
)

grids = arrays(
    np.float64,
    st.tuples(st.integers(2, 12), st.integers(2, 12)),
    elements=st.floats(0.0, 1.0, allow_nan=False, allow_subnormal=False),
)


def _line_through(p, angle):
    a, b = -np.sin(angle), np.cos(angle)
    return EpipolarLine(a, b, -(a * p[0] + b * p[1]))


# ------------------------------------------------------------- rendering


def test_gaussian_peak_on_pixel_centre():
    h = render_gaussian((32, 32), 2.0, (64, 64))
    assert hard_argmax(h) == (32.0, 32.0, 1.0)
    assert h.max() == 1.0


def test_gaussian_far_outside_is_zero():
    h = render_gaussian((-100, -100), 2.0, (64, 64))
    assert not h.any()


def test_gaussian_mass_matches_integral():
    h = render_gaussian((30.3, 25.7), 2.0, (64, 64))
    assert abs(h.sum() / (2 * np.pi * 4.0) - 1.0) < 0.01


def test_gaussian_rejects_bad_sigma():
    with pytest.raises(ValueError):
        render_gaussian((1, 1), 0.0)


def test_gaussian_formula_pointwise():
    c, s = (10.4, 7.9), 3.0
    h = render_gaussian(c, s, (20, 16))
    v, u = 5, 13
    assert h[v, u] == pytest.approx(np.exp(-((u - c[0]) ** 2 + (v - c[1]) ** 2) / (2 * s * s)), rel=1e-12)


def test_check_heatmap_rejects_negative_and_nan():
    with pytest.raises(ValueError):
        check_heatmap(np.array([[0.0, -1.0]]))
    with pytest.raises(ValueError):
        check_heatmap(np.array([[np.nan, 1.0]]))


# ----------------------------------------------------------------- peaks


def test_hard_argmax_examples():
    assert hard_argmax(np.zeros((8, 8))) == (0.0, 0.0, 0.0)
    assert hard_argmax(render_gaussian((10, 20), 2.0, (64, 64)))[:2] == (10.0, 20.0)
    h = np.zeros((8, 8))
    h[3, 3] = h[5, 5] = 1.0
    assert hard_argmax(h)[:2] == (3.0, 3.0)


def test_soft_argmax_symmetric_gaussian():
    p = soft_argmax(render_gaussian((30, 22), 2.0, (64, 64)), 40.0)
    assert abs(p.x - 30) < 1e-3 and abs(p.y - 22) < 1e-3
    assert p.score == pytest.approx(1.0, abs=1e-3)


@pytest.mark.parametrize("temperature", [0.1, 1.0, 40.0, 1e4])
def test_soft_argmax_single_pixel(temperature):
    h = np.zeros((16, 16))
    h[9, 7] = 0.3
    p = soft_argmax(h, temperature)
    assert (p.x, p.y) == (7.0, 9.0)


def test_soft_argmax_bimodal():
    h = np.zeros((64, 64))
    h[10, 10] = 1.0
    h[50, 50] = 0.5
    p = soft_argmax(h, 40.0)
    # oracle: expectation over the two atoms
    w = np.exp(40 * 0.5 - 40 * 1.0)
    expected = (10 + 50 * w) / (1 + w)
    assert p.x == pytest.approx(expected) and abs(p.x - 10) < 0.5 and abs(p.y - 10) < 0.5


def test_soft_argmax_all_zero():
    with pytest.raises(AllZero):
        soft_argmax(np.zeros((4, 4)))


def test_bilinear_interpolates():
    h = np.array([[0.0, 1.0], [2.0, 3.0]])
    assert bilinear(h, 0.5, 0.5) == 1.5
    assert bilinear(h, 1.0, 0.0) == 1.0


@settings(max_examples=60, deadline=None)
@given(h=grids, t=st.floats(0.5, 100.0))
def test_soft_argmax_in_hull_of_support(h, t):
    if not h.any():
        return
    p = soft_argmax(h, t)
    ys, xs = np.nonzero(h)
    eps = 1e-9
    assert xs.min() - eps <= p.x <= xs.max() + eps
    assert ys.min() - eps <= p.y <= ys.max() + eps
    assert np.isfinite(p.score) and p.score >= 0


# ----------------------------------------------------------------- lines


def test_line_through_gaussian_centre():
    c = (30.0, 20.0)
    h = render_gaussian(c, 2.0, (64, 64))
    for angle in np.linspace(0, np.pi, 13):
        val, loc = max_on_line(h, _line_through(c, angle))
        assert val >= 0.99
        assert np.hypot(loc[0] - c[0], loc[1] - c[1]) <= 1.0


def test_line_outside_grid():
    assert max_on_line(np.ones((8, 8)), EpipolarLine(0.0, 1.0, 100.0)) == (0.0, None)


def test_line_on_zero_grid_returns_first_pixel():
    line = EpipolarLine(0.0, 1.0, -3.0)  # v = 3
    val, loc = max_on_line(np.zeros((8, 8)), line)
    assert val == 0.0 and loc == tuple(rasterize_line(line, 8, 8)[0])


def test_rasterize_is_connected_one_per_step():
    pix = rasterize_line(_line_through((10.2, 4.7), 0.4), 32, 32)
    assert np.all(np.diff(pix[:, 0]) == 1)
    assert np.abs(np.diff(pix[:, 1])).max() <= 1


@settings(max_examples=60, deadline=None)
@given(h=grids, angle=st.floats(0, np.pi), px=st.floats(-2, 14), py=st.floats(-2, 14))
def test_max_on_line_bounded_by_global_max(h, angle, px, py):
    val, _ = max_on_line(h, _line_through((px, py), angle))
    assert 0.0 <= val <= h.max()


@settings(max_examples=40, deadline=None)
@given(h=grids, angle=st.floats(0, np.pi))
def test_max_on_line_through_argmax(h, angle):
    x, y, s = hard_argmax(h)
    val, _ = max_on_line(h, _line_through((x, y), angle))
    assert val == s


# --------------------------------------------------------------- softmax


def test_softmax_constant_grid():
    h = np.full((5, 7), 0.25)
    np.testing.assert_allclose(spatial_softmax(h), h)


def test_softmax_suppresses_plateau():
    h = np.full((16, 16), 0.5)
    h[3, 4] = 1.0
    out = spatial_softmax(h, 30.0)
    ratio = out[0, 0] / out[3, 4]
    assert ratio < 1e-6
    assert ratio == pytest.approx(np.exp(-15.0), rel=1e-12)


def test_softmax_argmax_invariant_random():
    rng = np.random.default_rng(0)
    for _ in range(100):
        h = rng.uniform(size=(16, 16))
        assert np.argmax(spatial_softmax(h)) == np.argmax(h)


@settings(max_examples=60, deadline=None)
@given(h=grids, t=st.floats(0.1, 60.0))
def test_softmax_preserves_order_and_max(h, t):
    out = spatial_softmax(h, t)
    assert np.all(np.isfinite(out)) and np.all(out >= 0)
    assert out.max() == pytest.approx(h.max(), rel=1e-12, abs=0.0)
    i, j = np.triu_indices(h.size, 1)
    a, b = h.ravel(), out.ravel()
    # order preserved wherever the softmax outputs stay distinguishable
    strict = (a[i] < a[j]) & (b[j] > 0)
    assert np.all(b[i][strict] <= b[j][strict])
