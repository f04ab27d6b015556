import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_camera, random_points
from epifuse.errors import BehindCamera, DegenerateBaseline, DegenerateDenominator, DegenerateLine, ZeroDepth
from epifuse.geometry import (
    CameraModel,
    FundamentalMatrix,
    epipolar_line,
    epipolar_lines,
    fundamental_from_projections,
    project,
    reprojection_distance_oracle,
    rig_from_json,
    rig_to_json,
    sampson_distance,
    skew,
)
from epifuse.synthdata import build_rig


def _homog_unit(p):
    h = np.concatenate([p, np.ones(p.shape[:-1] + (1,))], axis=-1)
    return h / np.linalg.norm(h, axis=-1, keepdims=True)


def _pair(seed):
    rng = np.random.default_rng(seed)
    return random_camera(rng), random_camera(rng), rng


def _orthogonal_shift(F, x, xp, amount):
    line = epipolar_line(F, x)
    return xp + amount * np.array([line.a, line.b])


# ------------------------------------------------------------------ camera


def test_project_canonical_camera():
    cam = CameraModel(np.eye(3), np.eye(3), np.zeros(3), (1, 1))
    np.testing.assert_array_equal(project(cam, [0.0, 0.0, 1.0]), [0.0, 0.0])


def test_project_similar_triangles():
    cam = CameraModel(np.diag([100.0, 100.0, 1.0]), np.eye(3), np.zeros(3), (200, 200))
    np.testing.assert_allclose(project(cam, [1.0, 1.0, 2.0]), [50.0, 50.0])


def test_rig_center_projects_to_principal_point():
    for cam in build_rig(8):
        np.testing.assert_allclose(project(cam, [0.0, 0.0, 1.0]), cam.K[:2, 2], atol=1e-9)


def test_project_depth_errors():
    cam = CameraModel(np.eye(3), np.eye(3), np.zeros(3), (10, 10))
    with pytest.raises(ZeroDepth):
        project(cam, [1.0, 1.0, 0.0])
    with pytest.raises(BehindCamera):
        project(cam, [0.0, 0.0, -1.0])
    np.testing.assert_allclose(project(cam, [1.0, 0.0, -1.0], strict=False), [-1.0, 0.0])


def test_camera_invariants_rejected():
    with pytest.raises(ValueError):
        CameraModel(np.array([[1.0, 0, 0], [1.0, 1, 0], [0, 0, 1]]), np.eye(3), np.zeros(3), (4, 4))
    with pytest.raises(ValueError):
        CameraModel(np.diag([1.0, 1.0, 2.0]), np.eye(3), np.zeros(3), (4, 4))
    with pytest.raises(ValueError):
        CameraModel(np.eye(3), np.diag([1.0, 1.0, -1.0]), np.zeros(3), (4, 4))


def test_resampled_maps_pixel_centres():
    cam = build_rig(8)[3]
    small = cam.resampled((64, 64))
    X = np.array([[0.1, -0.2, 1.3]])
    u = project(cam, X)
    np.testing.assert_allclose(project(small, X), (u + 0.5) * 0.25 - 0.5, atol=1e-12)


def test_rig_json_round_trip_exact():
    rig = build_rig(8)
    text = rig_to_json(rig)
    assert rig_from_json(text) == rig
    # the document stores row-major matrices with full precision
    doc = json.loads(text)["cameras"][0]
    assert len(doc["K"]) == 9 and len(doc["R"]) == 9 and len(doc["t"]) == 3


# ------------------------------------------------------------ fundamental


def test_identical_cameras_degenerate():
    cam = build_rig(8)[0]
    with pytest.raises(DegenerateBaseline):
        fundamental_from_projections(cam, cam)


def test_epipolar_constraint_random_pair():
    c1, c2, rng = _pair(0)
    F = fundamental_from_projections(c1, c2)
    X = random_points(rng, 100)
    r = np.einsum("ni,ij,nj->n", _homog_unit(project(c2, X)), F.m, _homog_unit(project(c1, X)))
    assert np.abs(r).max() < 1e-9


def test_horizontal_translation_gives_cross_product_matrix():
    c1 = CameraModel(np.eye(3), np.eye(3), np.zeros(3), (2, 2))
    c2 = CameraModel(np.eye(3), np.eye(3), [-1.0, 0.0, 0.0], (2, 2))
    F = fundamental_from_projections(c1, c2)
    expected = FundamentalMatrix(skew([-1.0, 0.0, 0.0]))
    np.testing.assert_allclose(F.m, expected.m, atol=1e-12)
    line = epipolar_line(F, [0.3, -0.7])
    assert abs(line.a) < 1e-12  # horizontal line v = const
    assert abs(line.residual([5.0, -0.7])) < 1e-12


def test_fundamental_normalization_and_rank():
    for seed in range(20):
        c1, c2, _ = _pair(seed)
        F = fundamental_from_projections(c1, c2)
        s = np.linalg.svd(F.m, compute_uv=False)
        assert abs(np.linalg.norm(F.m) - 1.0) < 1e-12
        assert s[2] < 1e-9 * s[0]
        first = F.m.ravel()[np.flatnonzero(np.abs(F.m.ravel()) > 1e-12)[0]]
        assert first > 0


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), a=st.floats(0.1, 10.0), b=st.floats(-10.0, -0.1))
def test_fundamental_scale_invariance(seed, a, b):
    c1, c2, _ = _pair(seed)
    F = fundamental_from_projections(c1, c2)
    G = fundamental_from_projections(a * c1.P, b * c2.P)
    np.testing.assert_allclose(G.m, F.m, atol=1e-9)


# -------------------------------------------------------------- lines


def test_epipole_input_degenerate():
    c1, c2, _ = _pair(1)
    F = fundamental_from_projections(c1, c2)
    e1 = c1.P @ np.append(c2.center, 1.0)  # epipole in view 1: image of the other centre
    with pytest.raises(DegenerateLine):
        epipolar_line(F, e1[:2] / e1[2])


def test_correspondence_lies_on_line_and_transpose():
    c1, c2, rng = _pair(2)
    F = fundamental_from_projections(c1, c2)
    for X in random_points(rng, 20):
        x, xp = project(c1, X), project(c2, X)
        line = epipolar_line(F, x)
        assert abs(line.a**2 + line.b**2 - 1.0) < 1e-12
        assert abs(line.residual(xp)) < 1e-9
        assert abs(epipolar_line(F.T, xp).residual(x)) < 1e-9


def test_epipolar_lines_batch_matches_single():
    c1, c2, rng = _pair(3)
    F = fundamental_from_projections(c1, c2)
    pts = project(c1, random_points(rng, 10))
    batch = epipolar_lines(F, pts)
    for p, row in zip(pts, batch):
        ln = epipolar_line(F, p)
        assert (ln.a, ln.b, ln.c) == tuple(row)


# ------------------------------------------------------------ distances


def test_sampson_zero_on_exact_correspondence():
    c1, c2, rng = _pair(4)
    F = fundamental_from_projections(c1, c2)
    X = random_points(rng, 50)
    assert np.abs(sampson_distance(F, project(c1, X), project(c2, X))).max() < 1e-12


def test_sampson_symmetry_exact():
    c1, c2, rng = _pair(5)
    F = fundamental_from_projections(c1, c2)
    x = rng.uniform(0, 500, size=(100, 2))
    xp = rng.uniform(0, 500, size=(100, 2))
    np.testing.assert_array_equal(sampson_distance(F, x, xp), sampson_distance(F.T, xp, x))


def test_sampson_degenerate_denominator():
    c1, c2, _ = _pair(6)
    F = fundamental_from_projections(c1, c2)
    e1 = c1.P @ np.append(c2.center, 1.0)
    e2 = c2.P @ np.append(c1.center, 1.0)
    with pytest.raises(DegenerateDenominator):
        sampson_distance(F, e1[:2] / e1[2], e2[:2] / e2[2])


def test_sampson_matches_squared_reprojection_at_one_pixel():
    c1, c2, rng = _pair(7)
    F = fundamental_from_projections(c1, c2)
    for X in random_points(rng, 20):
        x, xp = project(c1, X), project(c2, X)
        xq = _orthogonal_shift(F, x, xp, 1.0)
        s = sampson_distance(F, x, xq)
        d = reprojection_distance_oracle(c1, c2, x, xq)
        assert abs(s - d**2) <= 0.05 * d**2


def test_oracle_zero_on_exact_correspondence():
    c1, c2, rng = _pair(8)
    X = random_points(rng, 10)
    d = reprojection_distance_oracle(c1, c2, project(c1, X), project(c2, X))
    assert np.abs(d).max() < 1e-9


def test_oracle_shift_along_line():
    c1, c2, rng = _pair(9)
    F = fundamental_from_projections(c1, c2)
    X = random_points(rng, 1)[0]
    x, xp = project(c1, X), project(c2, X)
    line = epipolar_line(F, x)
    xq = xp + 2.0 * np.array([-line.b, line.a])
    assert sampson_distance(F, x, xq) < 1e-12
    d = reprojection_distance_oracle(c1, c2, x, xq)
    assert 0.0 <= d <= 2.0


@pytest.mark.parametrize("amount", [0.1, 0.2, 0.3, 0.4, 0.5])
def test_sampson_first_order_accuracy(amount):
    c1, c2, rng = _pair(10)
    F = fundamental_from_projections(c1, c2)
    X = random_points(rng, 30)
    x, xp = project(c1, X), project(c2, X)
    xq = np.stack([_orthogonal_shift(F, a, b, amount) for a, b in zip(x, xp)])
    s = np.sqrt(sampson_distance(F, x, xq))
    d = reprojection_distance_oracle(c1, c2, x, xq)
    np.testing.assert_allclose(s, d, rtol=0.01)
    if amount == 0.1:
        ratio = s**2 / d**2
        assert ratio.min() >= 0.98 and ratio.max() <= 1.02


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 100_000))
def test_epipolar_properties_hold_for_random_pairs(seed):
    c1, c2, rng = _pair(seed)
    F = fundamental_from_projections(c1, c2)
    X = random_points(rng, 20)
    x, xp = project(c1, X), project(c2, X)
    r = np.einsum("ni,ij,nj->n", _homog_unit(xp), F.m, _homog_unit(x))
    assert np.abs(r).max() < 1e-9
    assert np.abs(sampson_distance(F, x, xp)).max() < 1e-12
