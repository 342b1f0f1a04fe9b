"""22-joint skeleton, 6D rotations, forward kinematics, projection and error metrics.

World frame: y up, the camera sits at the origin looking down +z.  The joint
layout and rest offsets follow the SMPL body joints (no hands).  Joint 0 is
the pelvis; every parent index is smaller than its child's.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels

from .autodiff import Graph, Var

N_JOINTS = 22
N_BONES = N_JOINTS - 1

JOINT_NAMES = (
    "pelvis", "l_hip", "r_hip", "spine1", "l_knee", "r_knee", "spine2",
    "l_ankle", "r_ankle", "spine3", "l_foot", "r_foot", "neck", "l_collar",
    "r_collar", "head", "l_shoulder", "r_shoulder", "l_elbow", "r_elbow",
    "l_wrist", "r_wrist",
)
PARENTS = np.array([-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19])

# offset of each joint from its parent in the rest pose, meters (row 0 unused)
REST_OFFSETS = np.array([
    [0.000, 0.000, 0.000],
    [0.058, -0.082, -0.018],
    [-0.060, -0.091, -0.014],
    [0.004, 0.124, -0.038],
    [0.043, -0.386, 0.008],
    [-0.043, -0.383, -0.005],
    [0.004, 0.138, 0.027],
    [-0.015, -0.427, -0.037],
    [0.019, -0.420, -0.034],
    [0.000, 0.056, 0.002],
    [0.041, -0.060, 0.122],
    [-0.035, -0.062, 0.130],
    [-0.013, 0.212, -0.033],
    [0.072, 0.120, -0.019],
    [-0.083, 0.119, -0.010],
    [0.010, 0.089, 0.050],
    [0.123, 0.045, -0.019],
    [-0.113, 0.047, -0.008],
    [0.255, -0.016, -0.021],
    [-0.260, -0.014, -0.036],
    [0.266, 0.009, -0.007],
    [-0.269, 0.007, -0.006],
])

# left/right joint pairs, used for mirror augmentation
MIRROR = np.array([0, 2, 1, 3, 5, 4, 6, 8, 7, 9, 11, 10, 12, 14, 13, 15, 17, 16, 19, 18, 21, 20])

IDENTITY_6D = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])


class KinematicsError(ValueError):
    pass


@dataclass(frozen=True)
class Skeleton:
    parent: np.ndarray = field(default_factory=lambda: PARENTS.copy())
    direction: np.ndarray = field(default_factory=lambda: _unit(REST_OFFSETS[1:]))
    length: np.ndarray = field(default_factory=lambda: np.linalg.norm(REST_OFFSETS[1:], axis=1))

    def __post_init__(self):
        if self.parent[0] != -1 or np.any(self.parent[1:] >= np.arange(1, N_JOINTS)):
            raise KinematicsError("parent array must be a tree rooted at joint 0 with parent < child")
        if np.any(self.length <= 0):
            raise KinematicsError("bone lengths must be positive")

    @property
    def offsets(self) -> np.ndarray:
        """(21, 3) rest offsets of joints 1..21."""
        return self.direction * self.length[:, None]


def _unit(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


@dataclass
class PoseFrame:
    theta: np.ndarray  # (22, 6)
    beta: np.ndarray   # (21,) per-bone scale
    psi: np.ndarray    # (3,) root translation, meters

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64).reshape(N_JOINTS, 6)
        self.beta = np.asarray(self.beta, dtype=np.float64).reshape(N_BONES)
        self.psi = np.asarray(self.psi, dtype=np.float64).reshape(3)
        if not np.isfinite(self.theta).all():
            raise KinematicsError("theta must be finite")
        if np.any(self.beta < 0.5) or np.any(self.beta > 2.0):
            raise KinematicsError("beta must lie in [0.5, 2.0]")

    @classmethod
    def rest(cls, psi=(0.0, 0.0, 0.0)):
        return cls(np.tile(IDENTITY_6D, (N_JOINTS, 1)), np.ones(N_BONES), psi)


@dataclass(frozen=True)
class Camera:
    focal: float = 1000.0
    principal_point: tuple = (500.0, 500.0)
    image_size: tuple = (1000.0, 1000.0)

    def __post_init__(self):
        if self.focal <= 0:
            raise KinematicsError("focal length must be positive")
        cx, cy = self.principal_point
        w, h = self.image_size
        if not (0 <= cx <= w and 0 <= cy <= h):
            raise KinematicsError("principal point must lie inside the image")


# -- rotations ---------------------------------------------------------------

def rot6d_to_matrix(r) -> np.ndarray:
    """Gram-Schmidt the two 3-vectors of ``r`` (..., 6) into rotation columns (..., 3, 3)."""
    r = np.asarray(r, dtype=np.float64)
    lead = r.shape[:-1]
    R, smallest = _kernels.rot6d_fwd(np.ascontiguousarray(r.reshape(-1, 6)))
    if smallest <= 1e-8:
        raise KinematicsError("rot6d: degenerate input (zero first vector or parallel vectors)")
    return R.reshape(lead + (3, 3))


def matrix_to_rot6d(R, tol: float | None = 1e-6) -> np.ndarray:
    """First two columns of ``R``; ``tol=None`` skips the orthonormality check."""
    R = np.asarray(R, dtype=np.float64)
    if tol is not None:
        err = np.abs(np.swapaxes(R, -1, -2) @ R - np.eye(3)).max(initial=0.0)
        if err > tol:
            raise KinematicsError(f"matrix_to_rot6d: input not orthonormal (error {err:.2e})")
    return np.concatenate([R[..., :, 0], R[..., :, 1]], axis=-1)


def axis_angle_to_matrix(aa) -> np.ndarray:
    """Rodrigues formula, (..., 3) -> (..., 3, 3)."""
    aa = np.asarray(aa, dtype=np.float64)
    angle = np.linalg.norm(aa, axis=-1)[..., None, None]
    safe = np.where(angle > 1e-12, angle, 1.0)
    k = aa / safe[..., 0]
    K = np.zeros(aa.shape[:-1] + (3, 3))
    K[..., 0, 1], K[..., 0, 2] = -k[..., 2], k[..., 1]
    K[..., 1, 0], K[..., 1, 2] = k[..., 2], -k[..., 0]
    K[..., 2, 0], K[..., 2, 1] = -k[..., 1], k[..., 0]
    R = np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)
    return np.where(angle > 1e-12, R, np.eye(3))


def yaw_matrix(yaw) -> np.ndarray:
    """Rotation about world y, (...,) -> (..., 3, 3)."""
    yaw = np.asarray(yaw, dtype=np.float64)
    c, s = np.cos(yaw), np.sin(yaw)
    R = np.zeros(yaw.shape + (3, 3))
    R[..., 0, 0], R[..., 0, 2] = c, s
    R[..., 1, 1] = 1.0
    R[..., 2, 0], R[..., 2, 2] = -s, c
    return R


def _rot6d_vjp(r, g):
    """Vector-Jacobian product of :func:`rot6d_to_matrix` at ``r`` for cotangent ``g``."""
    out = _kernels.rot6d_vjp(np.ascontiguousarray(r.reshape(-1, 6)), np.ascontiguousarray(g.reshape(-1, 3, 3)))
    return out.reshape(r.shape)


def rot6d_to_matrix_var(g: Graph, r: Var) -> Var:
    rv = r.value
    R = rot6d_to_matrix(rv)
    return g.custom("rot6d", [r], R, lambda gr: (_rot6d_vjp(rv, gr),))


# -- forward kinematics ------------------------------------------------------

def _fk_from_matrices(skel: Skeleton, local, beta, psi):
    """Global rotations (..., 22, 3, 3) and joint positions (..., 22, 3) from local rotations."""
    batch = local.shape[:-3]
    bone = np.broadcast_to(np.asarray(beta)[..., :, None] * skel.offsets, batch + (N_BONES, 3))
    G, P = _kernels.fk_fwd(np.ascontiguousarray(local.reshape(-1, N_JOINTS, 3, 3)),
                           np.ascontiguousarray(bone.reshape(-1, N_BONES, 3)),
                           np.ascontiguousarray(np.broadcast_to(psi, batch + (3,)).reshape(-1, 3)), skel.parent)
    return G.reshape(batch + (N_JOINTS, 3, 3)), P.reshape(batch + (N_JOINTS, 3))


def forward_kinematics(skel: Skeleton, theta, beta, psi) -> np.ndarray:
    """Joint positions (..., 22, 3) from 6D rotations (..., 22, 6), scales (..., 21), root (..., 3)."""
    local = rot6d_to_matrix(np.asarray(theta).reshape(np.shape(theta)[:-1] + (6,)))
    return _fk_from_matrices(skel, local, np.asarray(beta, dtype=np.float64),
                             np.asarray(psi, dtype=np.float64))[1]


def fk_pose(skel: Skeleton, pose: PoseFrame) -> np.ndarray:
    return forward_kinematics(skel, pose.theta, pose.beta, pose.psi)


def forward_kinematics_var(g: Graph, skel: Skeleton, theta: Var, beta: Var, psi: Var) -> Var:
    """Differentiable FK; theta (B, 22, 6), beta (B, 21), psi (B, 3) -> (B, 22, 3)."""
    local_v = rot6d_to_matrix_var(g, theta)
    local, bv, pv = local_v.value, beta.value, psi.value
    if bv.shape != local.shape[:-3] + (N_BONES,) or pv.shape != local.shape[:-3] + (3,):
        raise KinematicsError(f"fk: beta {bv.shape} and psi {pv.shape} must match batch {local.shape[:-3]}")
    G, P = _fk_from_matrices(skel, local, bv, pv)
    offsets = skel.offsets
    flat = (np.ascontiguousarray(G.reshape(-1, N_JOINTS, 3, 3)), np.ascontiguousarray(local.reshape(-1, N_JOINTS, 3, 3)),
            np.ascontiguousarray((bv[..., :, None] * offsets).reshape(-1, N_BONES, 3)))

    def vjp(gp):
        dL, dbone, droot = _kernels.fk_vjp(*flat, skel.parent, np.ascontiguousarray(gp.reshape(-1, N_JOINTS, 3)))
        dbeta = np.einsum("nbk,bk->nb", dbone, offsets)
        return dL.reshape(local.shape), dbeta.reshape(bv.shape), droot.reshape(pv.shape)
    return g.custom("fk", [local_v, beta, psi], P, vjp)


# -- projection --------------------------------------------------------------

def project_2d(cam: Camera, joints):
    """Pinhole projection; returns (uv (..., 2), visible (...,) bool)."""
    joints = np.asarray(joints, dtype=np.float64)
    z = joints[..., 2]
    if np.any(z <= 0.1):
        raise KinematicsError("project_2d: joint depth must exceed 0.1 m")
    cx, cy = cam.principal_point
    u = cam.focal * joints[..., 0] / z + cx
    v = cam.focal * joints[..., 1] / z + cy
    w, h = cam.image_size
    visible = (u >= 0) & (u <= w) & (v >= 0) & (v <= h)
    return np.stack([u, v], axis=-1), visible


def project_var(g: Graph, cam: Camera, joints: Var) -> Var:
    """Differentiable pinhole projection, (..., 3) -> (..., 2) pixels.

    Depth is clamped at 0.1 m so a diverging estimator cannot divide by zero.
    """
    jv = joints.value
    z = np.maximum(jv[..., 2], 0.1)
    clamped = jv[..., 2] > 0.1
    cx, cy = cam.principal_point
    f = cam.focal
    uv = np.stack([f * jv[..., 0] / z + cx, f * jv[..., 1] / z + cy], axis=-1)

    def vjp(gu):
        du, dv = gu[..., 0], gu[..., 1]
        dj = np.empty(jv.shape)
        dj[..., 0] = f * du / z
        dj[..., 1] = f * dv / z
        dj[..., 2] = -(f * jv[..., 0] * du + f * jv[..., 1] * dv) / (z * z) * clamped
        return (dj,)
    return g.custom("project", [joints], uv, vjp)


# -- metrics -----------------------------------------------------------------

def _valid_mask(gt, gt_valid):
    if gt_valid is None:
        return np.ones(gt.shape[:-1], dtype=bool)
    return np.broadcast_to(np.asarray(gt_valid, dtype=bool), gt.shape[:-1])


def mpjpe(pred, gt, gt_valid=None):
    """Root-aligned mean per-joint position error in millimeters (batched over leading dims)."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    valid = _valid_mask(gt, gt_valid)
    if not valid[..., 0].all():
        raise KinematicsError("mpjpe: root joint must be valid")
    d = np.linalg.norm((pred - pred[..., :1, :]) - (gt - gt[..., :1, :]), axis=-1)
    n = valid.sum(axis=-1)
    return 1000.0 * (d * valid).sum(axis=-1) / n


def procrustes_align(pred, gt, valid=None):
    """Similarity-align ``pred`` (..., J, 3) onto ``gt`` using joints in ``valid``."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    w = _valid_mask(gt, valid).astype(np.float64)[..., None]
    n = w.sum(axis=-2, keepdims=True)
    if np.any(n < 3):
        raise KinematicsError("mpjpe_pa: need at least 3 valid joints")
    mu_p = (pred * w).sum(axis=-2, keepdims=True) / n
    mu_g = (gt * w).sum(axis=-2, keepdims=True) / n
    X = (pred - mu_p) * w
    Y = (gt - mu_g) * w
    sx = np.linalg.svd(X, compute_uv=False)
    if np.any(sx[..., 1] <= 1e-9 * np.maximum(sx[..., 0], 1e-300)):
        raise KinematicsError("mpjpe_pa: valid joints are collinear")
    H = np.swapaxes(X, -1, -2) @ Y
    U, S, Vt = np.linalg.svd(H)
    V = np.swapaxes(Vt, -1, -2)
    d = np.sign(np.linalg.det(V @ np.swapaxes(U, -1, -2)))
    d = np.where(d == 0, 1.0, d)
    D = np.zeros(H.shape)
    D[..., 0, 0] = 1.0
    D[..., 1, 1] = 1.0
    D[..., 2, 2] = d
    R = V @ D @ np.swapaxes(U, -1, -2)
    scale = (S[..., 0] + S[..., 1] + d * S[..., 2]) / (X * X).sum(axis=(-1, -2))
    aligned = scale[..., None, None] * (pred - mu_p) @ np.swapaxes(R, -1, -2) + mu_g
    return aligned


def mpjpe_pa(pred, gt, gt_valid=None):
    """Procrustes-aligned MPJPE in millimeters (rotation + uniform scale + translation)."""
    gt = np.asarray(gt, dtype=np.float64)
    valid = _valid_mask(gt, gt_valid)
    aligned = procrustes_align(pred, gt, valid)
    d = np.linalg.norm(aligned - gt, axis=-1)
    return 1000.0 * (d * valid).sum(axis=-1) / valid.sum(axis=-1)
