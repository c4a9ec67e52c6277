import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import GRAD_RTOL, gradcheck
from pdl.geometry import (DegenerateRotationError, Pose, geodesic_distance, gs_columns_t, gs_orthonormalize,
                          is_rotation, pose_pack, pose_unpack, project_to_so3, rot_to_6d, rot_x, rot_y, rot_z,
                          rotation_error, rotation_loss_t, sample_uniform_rotation, y_axis_distance)
from pdl.tensor import concat

seeds = st.integers(0, 2 ** 32 - 1)
angles = st.floats(-np.pi, np.pi, allow_nan=False)


def haar_mean_angle_quadrature(n: int = 200001) -> float:
    # Haar density of the rotation angle on [0, pi] is (1 - cos x) / pi
    x = np.linspace(0.0, np.pi, n)
    f = x * (1.0 - np.cos(x)) / np.pi
    return float(np.sum((f[1:] + f[:-1]) * np.diff(x)) / 2.0)


def test_haar_mean_angle_closed_form_matches_quadrature():
    assert haar_mean_angle_quadrature() == pytest.approx(np.pi / 2 + 2 / np.pi, abs=1e-9)


def test_haar_sampler_mean_angle(rng):
    R = sample_uniform_rotation(rng, 200_000)
    ang = geodesic_distance(R, np.eye(3))
    # standard error of the mean is about 0.0015
    assert np.mean(ang) == pytest.approx(np.pi / 2 + 2 / np.pi, abs=0.008)
    hist, edges = np.histogram(ang, bins=10, range=(0, np.pi))
    mass = np.diff((edges - np.sin(edges)) / np.pi)
    np.testing.assert_allclose(hist / len(ang), mass, atol=0.005)


def test_sampled_rotations_are_proper(rng):
    R = sample_uniform_rotation(rng, 100)
    assert all(is_rotation(r) for r in R)


def test_6d_roundtrip_on_haar_rotations(rng):
    R = sample_uniform_rotation(rng, 1000)
    assert np.max(np.abs(gs_orthonormalize(rot_to_6d(R)) - R)) < 1e-9


def test_geodesic_sweep_about_z():
    for th in np.linspace(-np.pi, np.pi, 100):
        assert abs(geodesic_distance(rot_z(th), np.eye(3)) - abs(th)) < 1e-9


def test_geodesic_accurate_near_zero_and_pi():
    for th in (1e-9, 1e-6, np.pi - 1e-9, np.pi - 1e-6):
        assert geodesic_distance(rot_x(th), np.eye(3)) == pytest.approx(th, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(seeds, angles)
def test_y_axis_distance_blind_to_twist(seed, phi):
    r = np.random.default_rng(seed)
    A, B = sample_uniform_rotation(r), sample_uniform_rotation(r)
    assert abs(y_axis_distance(A @ rot_y(phi), B) - y_axis_distance(A, B)) < 1e-12


@settings(max_examples=100, deadline=None)
@given(seeds)
def test_geodesic_is_a_metric(seed):
    r = np.random.default_rng(seed)
    A, B, C = sample_uniform_rotation(r, 3)
    d = geodesic_distance
    assert d(A, A) < 1e-7
    assert d(A, B) == pytest.approx(d(B, A), abs=1e-12)
    assert d(A, C) <= d(A, B) + d(B, C) + 1e-9
    assert 0.0 <= d(A, B) <= np.pi


@settings(max_examples=100, deadline=None)
@given(seeds)
def test_distances_are_left_invariant(seed):
    r = np.random.default_rng(seed)
    A, B, G = sample_uniform_rotation(r, 3)
    assert geodesic_distance(G @ A, G @ B) == pytest.approx(geodesic_distance(A, B), abs=1e-9)
    assert y_axis_distance(G @ A, G @ B) == pytest.approx(y_axis_distance(A, B), abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-10, 10, allow_nan=False), min_size=6, max_size=6))
def test_gs_output_is_rotation(v):
    v = np.array(v)
    a1, a2 = v[:3], v[3:]
    if np.linalg.norm(a1) < 1e-3 or np.linalg.norm(np.cross(a1, a2)) < 1e-3 * max(1.0, np.linalg.norm(a2)):
        return
    assert is_rotation(gs_orthonormalize(v))


def test_gs_degenerate_inputs_raise():
    with pytest.raises(DegenerateRotationError):
        gs_orthonormalize(np.zeros(6))
    with pytest.raises(DegenerateRotationError):
        gs_orthonormalize(np.array([1.0, 0, 0, 2.0, 0, 0]))


def test_symmetric_rotation_error_routes_to_y_axis():
    R = rot_x(0.3)
    assert rotation_error(R @ rot_y(1.2), R, True) == pytest.approx(0.0, abs=1e-12)
    assert rotation_error(R @ rot_y(1.2), R, False) == pytest.approx(1.2, abs=1e-12)


def test_pose_pack_roundtrip(rng):
    p = Pose(sample_uniform_rotation(rng), rng.standard_normal(3))
    q = pose_unpack(pose_pack(p))
    np.testing.assert_allclose(q.rotation, p.rotation, atol=1e-12)
    np.testing.assert_array_equal(q.translation, p.translation)


def test_project_to_so3_fixes_reflections(rng):
    R = sample_uniform_rotation(rng)
    assert np.allclose(project_to_so3(R), R, atol=1e-12)
    M = R @ np.diag([1.0, 1.0, -1.0])
    assert is_rotation(project_to_so3(M))


def test_gs_tensor_matches_numpy(rng):
    v = rng.standard_normal((5, 6))
    from pdl.tensor import Tensor
    b1, b2, b3 = gs_columns_t(Tensor(v))
    R = np.stack([b1.data, b2.data, b3.data], axis=-1)
    np.testing.assert_allclose(R, gs_orthonormalize(v), atol=1e-12)


def test_gs_tensor_gradcheck(rng):
    worst = max(gradcheck(lambda v: concat(list(gs_columns_t(v)), axis=1), [rng.standard_normal((4, 6))])
                for _ in range(20))
    assert worst < GRAD_RTOL


@pytest.mark.parametrize("symmetric", [False, True])
def test_rotation_loss_gradcheck_and_value(rng, symmetric):
    worst = 0.0
    for _ in range(20):
        v = rng.standard_normal((4, 6))
        Rgt = sample_uniform_rotation(rng, 4)
        sym = np.full(4, symmetric)
        worst = max(worst, gradcheck(lambda x: rotation_loss_t(gs_columns_t(x), Rgt, sym), [v]))
        from pdl.tensor import Tensor
        val = rotation_loss_t(gs_columns_t(Tensor(v)), Rgt, sym).data
        np.testing.assert_allclose(val, rotation_error(gs_orthonormalize(v), Rgt, symmetric), atol=1e-9)
    assert worst < GRAD_RTOL


def test_symmetric_rows_get_no_full_geodesic_gradient(rng):
    # a pure twist about y has zero y-axis loss, so its gradient must vanish
    from pdl.tensor import Tensor, backward
    Rgt = sample_uniform_rotation(rng, 2)
    pred = np.stack([rot_to_6d(Rgt[0] @ rot_y(0.7)), rot_to_6d(Rgt[1] @ rot_y(0.7))])
    v = Tensor(pred, requires_grad=True)
    loss = rotation_loss_t(gs_columns_t(v), Rgt, np.array([True, False]))
    backward(loss.sum())
    assert np.abs(v.grad[0]).max() < 1e-3
    assert np.abs(v.grad[1]).max() > 1e-2
