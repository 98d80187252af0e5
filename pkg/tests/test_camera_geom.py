import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.spatial.transform import Rotation

from dtmnav.camera_geom import (
    Pose,
    RelativeMotion,
    camera_to_world,
    depth_from_plane,
    homogeneous,
    is_rotation,
    l_operator,
    project,
    projection_operator,
    relative_motion,
    second_pose,
    world_to_camera,
)
from dtmnav.dtm import SurfaceContact
from dtmnav.errors import BehindCameraError, DegenerateProjectionError, GrazingIncidenceError

from conftest import NADIR

vec3 = arrays(np.float64, 3, elements=st.floats(-10, 10))
rotations = st.integers(0, 2**32 - 1).map(lambda s: Rotation.random(random_state=s).as_matrix())


def test_identity_pose():
    pose = Pose(np.zeros(3), np.eye(3))
    np.testing.assert_array_equal(world_to_camera(pose, [1.0, 2.0, 3.0]), [1.0, 2.0, 3.0])


def test_camera_above_origin():
    pose = Pose([0.0, 0.0, 100.0], np.eye(3))
    np.testing.assert_array_equal(world_to_camera(pose, [0.0, 0.0, 0.0]), [0.0, 0.0, -100.0])


@settings(max_examples=200)
@given(vec3, rotations, vec3)
def test_world_camera_round_trip(p, R, g):
    pose = Pose(p, R)
    np.testing.assert_allclose(camera_to_world(pose, world_to_camera(pose, g)), g, atol=1e-12)


def test_pose_rejects_non_rotation():
    with pytest.raises(ValueError):
        Pose(np.zeros(3), np.diag([1.0, 1.0, -1.0]))
    assert not is_rotation(2 * np.eye(3))


@pytest.mark.parametrize("g, u", [((0.0, 0.0, 5.0), (0.0, 0.0)), ((1.0, 2.0, 2.0), (0.5, 1.0))])
def test_project(g, u):
    np.testing.assert_array_equal(project(g), u)


@pytest.mark.parametrize("z", [-1.0, 0.0])
def test_project_behind(z):
    with pytest.raises(BehindCameraError):
        project([0.0, 0.0, z])


@settings(max_examples=200)
@given(vec3, rotations, st.floats(-2, 2), st.floats(-2, 2), st.floats(0.1, 500))
def test_projection_round_trip(p, R, ux, uy, lam):
    pose = Pose(p, R)
    q = homogeneous([ux, uy])
    g = camera_to_world(pose, q * lam)
    np.testing.assert_allclose(project(world_to_camera(pose, g)), [ux, uy], atol=1e-12 * max(1, lam))


def test_homogeneous_third_component():
    q = homogeneous([[0.1, 0.2], [3.0, -4.0]])
    assert q.shape == (2, 3) and np.all(q[:, 2] == 1.0)


def test_p_annihilates_u():
    u, s = np.array([1.0, 2.0, 3.0]), np.array([0.0, 0.0, 1.0])
    P = projection_operator(u, s)
    np.testing.assert_allclose(P @ u, 0.0, atol=1e-15)
    np.testing.assert_allclose(s @ P, 0.0, atol=1e-15)


def test_p_axis_aligned():
    P = projection_operator([1.0, 0.0, 0.0], [1.0, 0.0, 0.0])
    np.testing.assert_array_equal(P, np.diag([0.0, 1.0, 1.0]))
    np.testing.assert_array_equal(P @ [1.0, 2.0, 3.0], [0.0, 2.0, 3.0])


def test_p_degenerate():
    with pytest.raises(DegenerateProjectionError):
        projection_operator([1.0, 0.0, 0.0], [0.0, 1.0, 0.0])


@settings(max_examples=300)
@given(vec3, vec3)
def test_p_properties(u, s):
    assume(np.linalg.norm(u) > 1e-3 and np.linalg.norm(s) > 1e-3)
    assume(abs(s @ u) >= 0.1 * np.linalg.norm(s) * np.linalg.norm(u))
    P = projection_operator(u, s)
    np.testing.assert_allclose(P @ u, 0.0, atol=1e-12 * np.linalg.norm(u) * 10)
    np.testing.assert_allclose(s @ P, 0.0, atol=1e-12 * np.linalg.norm(s) * 10)
    assert np.linalg.norm(P @ P - P) <= 1e-10
    assert np.linalg.matrix_rank(P, tol=1e-9) == 2


@settings(max_examples=200)
@given(vec3)
def test_symmetric_p_is_orthogonal_projector(q):
    assume(np.linalg.norm(q) > 1e-3)
    sv = np.linalg.svd(projection_operator(q, q), compute_uv=False)
    np.testing.assert_allclose(sv, [1.0, 1.0, 0.0], atol=1e-9)


def test_l_trivial():
    L = l_operator([0.0, 0.0, 1.0], [0.0, 0.0, 1.0], np.eye(3))
    expected = np.zeros((3, 3))
    expected[2, 2] = 1.0
    np.testing.assert_array_equal(L, expected)
    np.testing.assert_array_equal(L @ [0.0, 0.0, 5.0], [0.0, 0.0, 5.0])


@settings(max_examples=300)
@given(rotations, st.floats(-1, 1), st.floats(-1, 1), rotations)
def test_inverse_characteristic(R1, ux, uy, Rn):
    q1 = homogeneous([ux, uy])
    n = Rn[:, 2]
    assume(abs(n @ R1 @ q1) > 1e-3)
    L = l_operator(q1, n, R1)
    np.testing.assert_allclose(R1 @ L + projection_operator(R1 @ q1, n), np.eye(3), atol=1e-10)


def test_l_grazing():
    with pytest.raises(GrazingIncidenceError):
        l_operator([0.0, 0.0, 1.0], [1.0, 0.0, 0.0], np.eye(3))


def test_depth_nadir():
    pose = Pose([0.0, 0.0, 100.0], NADIR)
    contact = SurfaceContact(np.zeros(3), np.array([0.0, 0.0, 1.0]))
    assert depth_from_plane(pose, [0.0, 0.0, 1.0], contact) == pytest.approx(100.0)


def test_depth_ignores_lateral_offset():
    pose = Pose([0.0, 0.0, 100.0], NADIR)
    contact = SurfaceContact(np.array([3.0, 4.0, 0.0]), np.array([0.0, 0.0, 1.0]))
    assert depth_from_plane(pose, [0.0, 0.0, 1.0], contact) == pytest.approx(100.0)


def test_depth_grazing():
    pose = Pose([0.0, 0.0, 100.0], NADIR)
    with pytest.raises(GrazingIncidenceError):
        depth_from_plane(pose, [0.0, 0.0, 1.0], SurfaceContact(np.zeros(3), np.array([1.0, 0.0, 0.0])))


@settings(max_examples=300)
@given(vec3, rotations, st.floats(-1, 1), st.floats(-1, 1), vec3, rotations)
def test_reconstructed_point_on_tangent_plane(p1, R1, ux, uy, ge, Rn):
    n = Rn[:, 2]
    q1 = homogeneous([ux, uy])
    assume(abs(n @ R1 @ q1) > 1e-2)
    lam = depth_from_plane(Pose(p1, R1), q1, SurfaceContact(ge, n))
    g = R1 @ q1 * lam + p1
    assert abs(n @ (g - ge)) <= 1e-9
    # the same point via the projector form G_E + P(R1 q1, N)(p1 - G_E)
    g_alt = ge + projection_operator(R1 @ q1, n) @ (p1 - ge)
    np.testing.assert_allclose(g_alt, g, atol=1e-8)


@settings(max_examples=100)
@given(vec3, rotations, vec3, rotations)
def test_relative_motion_round_trip(p1, R1, p2, R2):
    pose1, pose2 = Pose(p1, R1), Pose(p2, R2)
    m = relative_motion(pose1, pose2)
    # a point expressed in C1 maps to C2 by R12 v + p12
    g = np.array([1.0, -2.0, 3.0])
    np.testing.assert_allclose(m.R12 @ world_to_camera(pose1, g) + m.p12, world_to_camera(pose2, g), atol=1e-10)
    back = second_pose(pose1, m)
    np.testing.assert_allclose(back.p, p2, atol=1e-10)
    np.testing.assert_allclose(back.R, R2, atol=1e-12)


def test_relative_motion_validation():
    with pytest.raises(ValueError):
        RelativeMotion(np.zeros(3), np.zeros((3, 3)))
