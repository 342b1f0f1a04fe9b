import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mtta.autodiff import gradient_error
from mtta.kinematics import (
    N_BONES,
    PARENTS,
    REST_OFFSETS,
    Camera,
    KinematicsError,
    PoseFrame,
    Skeleton,
    axis_angle_to_matrix,
    fk_pose,
    forward_kinematics,
    forward_kinematics_var,
    matrix_to_rot6d,
    mpjpe,
    mpjpe_pa,
    project_2d,
    rot6d_to_matrix,
)

seeds = st.integers(0, 2**31)


def random_rotations(r, n):
    return axis_angle_to_matrix(r.normal(0, 1.5, (n, 3)))


def random_pose(r, n=None):
    shape = () if n is None else (n,)
    theta = matrix_to_rot6d(axis_angle_to_matrix(r.normal(0, 0.6, shape + (22, 3))))
    beta = r.uniform(0.7, 1.4, shape + (N_BONES,))
    psi = r.normal(0, 0.5, shape + (3,)) + np.array([0.0, 0.0, 4.0])
    return theta, beta, psi


def test_skeleton_tree_and_positive_bones():
    s = Skeleton()
    assert s.parent[0] == -1 and np.all(s.parent[1:] < np.arange(1, 22))
    assert np.all(s.length > 0)
    with pytest.raises(KinematicsError):
        Skeleton(parent=np.r_[-1, 2, PARENTS[2:]])


def test_rot6d_canonical_examples():
    np.testing.assert_allclose(rot6d_to_matrix([1, 0, 0, 0, 1, 0]), np.eye(3), atol=1e-15)
    R = rot6d_to_matrix([0, 1, 0, -1, 0, 0])
    np.testing.assert_allclose(R @ [1, 0, 0], [0, 1, 0], atol=1e-15)
    np.testing.assert_allclose(R @ [0, 1, 0], [-1, 0, 0], atol=1e-15)
    np.testing.assert_allclose(R @ [0, 0, 1], [0, 0, 1], atol=1e-15)
    np.testing.assert_array_equal(matrix_to_rot6d(np.eye(3)), [1, 0, 0, 0, 1, 0])


@given(seeds)
def test_rot6d_outputs_proper_rotations(seed):
    r = np.random.default_rng(seed).normal(size=(20, 6))
    R = rot6d_to_matrix(r)
    np.testing.assert_allclose(np.swapaxes(R, -1, -2) @ R, np.broadcast_to(np.eye(3), R.shape), atol=1e-10)
    np.testing.assert_allclose(np.linalg.det(R), 1.0, atol=1e-10)
    # projection property: applying the round trip once more changes nothing
    once = matrix_to_rot6d(R)
    np.testing.assert_allclose(matrix_to_rot6d(rot6d_to_matrix(once)), once, atol=1e-12)


def test_rot6d_round_trip_on_random_rotations(rng):
    R = random_rotations(rng, 100)
    assert np.abs(rot6d_to_matrix(matrix_to_rot6d(R)) - R).max() < 1e-9


def test_rot6d_degenerate_and_non_orthonormal_errors():
    with pytest.raises(KinematicsError):
        rot6d_to_matrix([0, 0, 0, 0, 1, 0])
    with pytest.raises(KinematicsError):
        rot6d_to_matrix([1, 0, 0, 2, 0, 0])
    with pytest.raises(KinematicsError):
        matrix_to_rot6d(np.diag([1.0, 2.0, 1.0]))


def test_fk_rest_pose_and_bone_scaling():
    skel = Skeleton()
    rest = fk_pose(skel, PoseFrame.rest())
    expected = np.zeros((22, 3))
    for j in range(1, 22):
        expected[j] = expected[PARENTS[j]] + REST_OFFSETS[j]
    np.testing.assert_allclose(rest, expected, atol=1e-12)
    doubled = forward_kinematics(skel, PoseFrame.rest().theta, np.full(N_BONES, 2.0), np.zeros(3))
    np.testing.assert_allclose(doubled, 2.0 * rest, atol=1e-12)


@given(seeds)
def test_fk_translation_equivariance(seed):
    r = np.random.default_rng(seed)
    skel = Skeleton()
    theta, beta, psi = random_pose(r)
    delta = r.normal(size=3)
    a = forward_kinematics(skel, theta, beta, psi + delta)
    b = forward_kinematics(skel, theta, beta, psi) + delta
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_fk_gradient_matches_differences(rng):
    skel = Skeleton()
    theta, beta, psi = random_pose(rng, 2)
    w = rng.normal(size=(2, 22, 3))
    err = gradient_error(lambda g, t, b, p: g.sum(forward_kinematics_var(g, skel, t, b, p) * w), [theta, beta, psi])
    assert err < 1e-4


def test_pose_frame_rejects_bad_beta():
    with pytest.raises(KinematicsError):
        PoseFrame(PoseFrame.rest().theta, np.full(N_BONES, 2.5), np.zeros(3))


def test_projection_examples():
    cam = Camera(focal=1000.0, principal_point=(500.0, 500.0), image_size=(1000.0, 1000.0))
    uv, vis = project_2d(cam, np.array([[0.0, 0.0, 2.0], [1.0, 0.0, 2.0], [3.0, 0.0, 1.0]]))
    np.testing.assert_allclose(uv, [[500, 500], [1000, 500], [3500, 500]])
    np.testing.assert_array_equal(vis, [True, True, False])
    with pytest.raises(KinematicsError):
        project_2d(cam, np.array([[0.0, 0.0, 0.05]]))


@given(seeds, st.floats(0.5, 3.0))
def test_projection_invariant_along_ray(seed, scale):
    p = np.random.default_rng(seed).normal(size=(22, 3)) * 0.3 + [0, 0, 3.0]
    cam = Camera()
    np.testing.assert_allclose(project_2d(cam, p * scale)[0], project_2d(cam, p)[0], atol=1e-9)


def test_camera_validation():
    with pytest.raises(KinematicsError):
        Camera(focal=0.0)
    with pytest.raises(KinematicsError):
        Camera(principal_point=(2000.0, 10.0))


def test_mpjpe_examples(rng):
    gt = rng.normal(size=(22, 3))
    assert mpjpe(gt, gt) == 0.0
    assert mpjpe(gt + rng.normal(size=3), gt) == pytest.approx(0.0, abs=1e-9)
    moved = gt.copy()
    moved[5, 0] += 0.010
    assert mpjpe(moved, gt) == pytest.approx(10.0 / 22.0, abs=1e-9)
    with pytest.raises(KinematicsError):
        mpjpe(gt, gt, np.r_[False, np.ones(21, bool)])


def test_mpjpe_pa_similarity_and_reflection(rng):
    gt = rng.normal(0, 0.3, (22, 3))
    R = axis_angle_to_matrix(rng.normal(size=3))
    assert mpjpe_pa(1.7 * gt @ R.T + [0.3, -2, 5], gt) < 1e-6
    mirrored = gt * [-1.0, 1.0, 1.0]
    assert mpjpe_pa(mirrored, gt) > 1.0
    with pytest.raises(KinematicsError):
        line = np.outer(np.linspace(0, 1, 22), [1.0, 2.0, 3.0])
        mpjpe_pa(line, line)


def test_mpjpe_pa_reflection_fix_beats_unconstrained_bound(rng):
    """Brute force: the best proper rotation can never beat the best orthogonal map (which may reflect)."""
    gt = rng.normal(0, 0.3, (22, 3))
    pred = gt * [-1.0, 1.0, 1.0]
    X, Y = pred - pred.mean(0), gt - gt.mean(0)
    U, S, Vt = np.linalg.svd(X.T @ Y)
    reflect = (Vt.T @ U.T)
    s = S.sum() / (X * X).sum()
    unconstrained = 1000 * np.linalg.norm(s * X @ reflect.T - Y, axis=1).mean()
    assert unconstrained < 1e-6 < mpjpe_pa(pred, gt)


@given(seeds)
def test_mpjpe_pa_never_exceeds_mpjpe(seed):
    r = np.random.default_rng(seed)
    gt = r.normal(0, 0.3, (22, 3))
    pred = gt + r.normal(0, r.uniform(0.01, 0.3), (22, 3))
    assert mpjpe_pa(pred, gt) <= mpjpe(pred, gt) + 1e-9


def test_metrics_batch_over_leading_dims(rng):
    gt = rng.normal(size=(4, 22, 3))
    pred = gt + rng.normal(0, 0.05, gt.shape)
    np.testing.assert_allclose(mpjpe(pred, gt), [mpjpe(p, q) for p, q in zip(pred, gt)])
    np.testing.assert_allclose(mpjpe_pa(pred, gt), [mpjpe_pa(p, q) for p, q in zip(pred, gt)])
