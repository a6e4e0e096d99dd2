import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import noise_free_scene
from ngransac.errors import DegenerateModel, ZeroVariance
from ngransac.geometry import (
    Correspondence,
    Line2,
    Model3x3,
    Pose,
    angular_pose_error,
    compose_essential,
    decompose_essential,
    epipolar_error,
    normalize_coordinates,
    point_line_distance,
    rotation_about_axis,
)

E_X = np.array([[0.0, 0, 0], [0, 0, -1], [0, 1, 0]])
coords = st.floats(-10, 10, allow_nan=False)


def test_epipolar_error_zero_on_line():
    assert epipolar_error(Correspondence(0, 0, 0, 0), Model3x3(E_X)) == 0.0


def test_epipolar_error_value():
    # numerator 0.01, denominator 2
    assert epipolar_error(Correspondence(0, 0, 0, 0.1), E_X) == pytest.approx(0.005, rel=1e-15)


def test_epipolar_error_degenerate():
    m = np.zeros((3, 3))
    m[2, 2] = 1.0
    with pytest.raises(DegenerateModel):
        epipolar_error((0.3, 0.2, 0.1, 0.4), m)


def test_epipolar_error_vectorized_matches_scalar():
    s = noise_free_scene(7, n=20, outlier_rate=0.5)
    many = epipolar_error(s.corrs, s.gt_essential)
    one = [epipolar_error(c, s.gt_essential) for c in s.corrs]
    np.testing.assert_allclose(many, one, rtol=1e-12, atol=1e-30)


@given(st.tuples(coords, coords, coords, coords), st.sampled_from([1e-3, 1e-2, 0.5, 7.0, 1e3]))
def test_epipolar_error_scale_invariant(y, k):
    e = compose_essential(Pose(rotation_about_axis((0.2, 1, 0.1), 12.0), (0.3, -0.1, 1.0)))
    a, b = epipolar_error(y, e), epipolar_error(y, k * e)
    assert b == pytest.approx(a, rel=1e-9, abs=1e-300)


def test_epipolar_error_zero_for_noise_free_inliers():
    s = noise_free_scene(3, n=200)
    assert epipolar_error(s.corrs, s.gt_essential).max() < 1e-18


def test_point_line_distance_examples():
    assert point_line_distance((0, 0), Line2(0, 1, 0)) == 0
    assert point_line_distance((0, 2), Line2(0, 1, 0)) == 2
    assert point_line_distance((3, 4), Line2(0.6, 0.8, -5)) == pytest.approx(0.0, abs=1e-15)


@given(st.tuples(coords, coords), st.tuples(coords, coords, coords).filter(lambda l: math.hypot(l[0], l[1]) > 1e-3))
def test_point_line_distance_renormalization(p, raw):
    l1 = Line2.from_coefficients(*raw)
    l2 = Line2.from_coefficients(*(3.7 * np.array(raw)))
    assert point_line_distance(p, l1) == pytest.approx(point_line_distance(p, l2), rel=1e-12, abs=1e-12)


def test_normalize_examples():
    out, stats = normalize_coordinates([(0, 0, 0, 0), (2, 2, 2, 2)])
    np.testing.assert_array_equal(stats.mean, 1.0)
    np.testing.assert_array_equal(stats.std, 1.0)
    np.testing.assert_array_equal(out, [[-1] * 4, [1] * 4])


def test_normalize_identity_with_unit_stats():
    from ngransac.geometry import CoordinateStats

    x = np.random.default_rng(0).normal(size=(10, 4))
    out, _ = normalize_coordinates(x, CoordinateStats(np.zeros(4), np.ones(4)))
    np.testing.assert_array_equal(out, x)


def test_normalize_zero_variance():
    with pytest.raises(ZeroVariance):
        normalize_coordinates([(1, 2, 3, 4)] * 5)


@given(st.integers(0, 10_000))
def test_normalize_round_trip(seed):
    x = np.random.default_rng(seed).normal(0, 50, size=(12, 4))
    out, stats = normalize_coordinates(x)
    np.testing.assert_allclose(stats.invert(out), x, atol=1e-12 * 50, rtol=0)


def test_correspondence_validation():
    with pytest.raises(ValueError):
        Correspondence(0, float("nan"), 0, 0)
    with pytest.raises(ValueError):
        Correspondence(0, 0, 0, 0, ratio=1.5)


def _supports(pose, n=20, seed=0):
    rng = np.random.default_rng(seed)
    pts = np.column_stack([rng.uniform(-1, 1, (n, 2)), rng.uniform(4, 8, n)])
    cam2 = pts @ pose.rotation.T + pose.translation
    return np.hstack([pts[:, :2] / pts[:, 2:], cam2[:, :2] / cam2[:, 2:]])


def test_decompose_identity_rotation():
    pose = Pose(np.eye(3), (1, 0, 0))
    est = decompose_essential(compose_essential(pose), _supports(pose))
    np.testing.assert_allclose(est.rotation, np.eye(3), atol=1e-6)
    np.testing.assert_allclose(est.translation, [1, 0, 0], atol=1e-6)


def test_decompose_rotation_about_z():
    pose = Pose(rotation_about_axis((0, 0, 1), 10.0), (0, 0, 1))
    est = decompose_essential(compose_essential(pose), _supports(pose, seed=1))
    assert angular_pose_error(est, pose) < 1e-6


def test_decompose_empty_supports():
    with pytest.raises(ValueError):
        decompose_essential(E_X, np.zeros((0, 4)))


@given(st.integers(0, 100_000))
def test_decompose_round_trip(seed):
    s = noise_free_scene(seed, n=30)
    est = decompose_essential(s.gt_essential, s.corrs)
    assert angular_pose_error(est, s.gt_pose) < 1e-6
    assert np.allclose(est.rotation.T @ est.rotation, np.eye(3), atol=1e-9)
    assert abs(np.linalg.det(est.rotation) - 1) < 1e-9


def test_angular_pose_error_examples():
    p = Pose(np.eye(3), (0, 0, 1))
    assert angular_pose_error(p, p) == 0.0
    q = Pose(rotation_about_axis((0, 0, 1), 10.0), (0, 0, 1))
    assert angular_pose_error(q, p) == pytest.approx(10.0, abs=1e-9)
    r = Pose(np.eye(3), (1, 0, 0))
    assert angular_pose_error(r, p) == pytest.approx(90.0, abs=1e-12)


def test_translation_sign_is_ignored():
    p = Pose(np.eye(3), (0, 0, 1))
    assert angular_pose_error(Pose(np.eye(3), (0, 0, -1)), p) == 0.0


def test_pose_translation_is_unit():
    assert np.linalg.norm(Pose(np.eye(3), (3, 4, 0)).translation) == pytest.approx(1, abs=1e-12)


def test_model3x3_rejects_zero():
    with pytest.raises(DegenerateModel):
        Model3x3(np.zeros((3, 3)))
