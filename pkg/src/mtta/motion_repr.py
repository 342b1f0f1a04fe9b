"""Pose windows <-> the 197-wide per-frame motion vector consumed by the denoiser.

Per frame the vector is laid out as::

    [0]        pelvis height (psi.y)
    [1]        pelvis yaw change since the previous frame, rad (0 on the first frame)
    [2:134]    22 x 6D rotations, pelvis with its world-y twist removed
    [134:197]  21 x 3 root-relative joint positions (world orientation)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from .kinematics import (
    N_BONES,
    N_JOINTS,
    KinematicsError,
    Skeleton,
    forward_kinematics,
    _fk_from_matrices,
    matrix_to_rot6d,
    rot6d_to_matrix,
    yaw_matrix,
)

WINDOW = 16
FPS = 15
PHI_DIM = 197
Y_ROOT = slice(0, 1)
OMEGA = slice(1, 2)
THETA_PLUS = slice(2, 2 + 6 * N_JOINTS)
J_PLUS = slice(2 + 6 * N_JOINTS, PHI_DIM)


@dataclass
class MotionWindow:
    theta: np.ndarray  # (t, 22, 6)
    beta: np.ndarray   # (21,) shared by every frame
    psi: np.ndarray    # (t, 3)

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        self.beta = np.asarray(self.beta, dtype=np.float64).reshape(N_BONES)
        self.psi = np.asarray(self.psi, dtype=np.float64)
        t = self.theta.shape[0]
        if self.theta.shape != (t, N_JOINTS, 6) or self.psi.shape != (t, 3):
            raise ValueError(f"window shapes inconsistent: theta {self.theta.shape}, psi {self.psi.shape}")


@dataclass
class PhiSequence:
    phi: np.ndarray   # (t, 197)
    mask: np.ndarray  # (t,) True where the frame was masked out

    def __post_init__(self):
        self.phi = np.asarray(self.phi, dtype=np.float64)
        if self.phi.shape[-1] != PHI_DIM:
            raise ValueError(f"phi width must be {PHI_DIM}, got {self.phi.shape[-1]}")
        if self.mask is None:
            self.mask = np.zeros(self.phi.shape[:-1], dtype=bool)
        self.mask = np.asarray(self.mask, dtype=bool)


def wrap_angle(x):
    """Map angles into (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(x, dtype=np.float64), 2.0 * np.pi)


def split_yaw(R):
    """Swing-twist about world y: ``R = yaw_matrix(yaw) @ S`` with S twist-free.

    Returns (yaw, S).
    """
    R = np.asarray(R, dtype=np.float64)
    q = Rotation.from_matrix(R.reshape(-1, 3, 3)).as_quat()  # x, y, z, w
    twist_norm = np.hypot(q[:, 1], q[:, 3])
    if np.any(twist_norm < 1e-6):
        raise KinematicsError("split_yaw: twist about y is undefined for this rotation")
    yaw = wrap_angle(2.0 * np.arctan2(q[:, 1], q[:, 3])).reshape(R.shape[:-2])
    S = yaw_matrix(-yaw) @ R
    return yaw, S


def pelvis_yaw(theta) -> np.ndarray:
    return split_yaw(rot6d_to_matrix(np.asarray(theta)[..., 0, :]))[0]


def to_phi_arrays(theta, beta, psi, skel: Skeleton) -> np.ndarray:
    """Vectorized conversion: theta (..., t, 22, 6), beta (..., 21), psi (..., t, 3) -> (..., t, 197)."""
    theta = np.asarray(theta, dtype=np.float64)
    psi = np.asarray(psi, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    lead = theta.shape[:-2]
    R = rot6d_to_matrix(theta)
    yaw, S = split_yaw(R[..., 0, :, :])
    omega = np.zeros(lead)
    omega[..., 1:] = wrap_angle(np.diff(yaw, axis=-1))
    rots = R.copy()
    rots[..., 0, :, :] = S
    theta_plus = matrix_to_rot6d(rots, tol=None).reshape(lead + (6 * N_JOINTS,))
    beta_f = np.broadcast_to(beta[..., None, :], lead + (N_BONES,))
    joints = _fk_from_matrices(skel, R, beta_f, np.zeros(lead + (3,)))[1]
    j_plus = joints[..., 1:, :].reshape(lead + (3 * N_BONES,))
    return np.concatenate([psi[..., 1:2], omega[..., None], theta_plus, j_plus], axis=-1)


def to_phi(w: MotionWindow, skel: Skeleton) -> PhiSequence:
    phi = to_phi_arrays(w.theta, w.beta, w.psi, skel)
    return PhiSequence(phi, np.zeros(len(phi), dtype=bool))


def from_phi_arrays(phi, yaw0) -> np.ndarray:
    """Recover 6D rotations (..., t, 22, 6); pelvis yaw accumulates omega from ``yaw0``."""
    phi = np.asarray(phi, dtype=np.float64)
    lead = phi.shape[:-1]
    yaw = np.asarray(yaw0, dtype=np.float64)[..., None] + np.cumsum(phi[..., 1], axis=-1)
    R = rot6d_to_matrix(phi[..., THETA_PLUS].reshape(lead + (N_JOINTS, 6)))
    R[..., 0, :, :] = yaw_matrix(yaw) @ R[..., 0, :, :]
    return matrix_to_rot6d(R, tol=None)


def from_phi(p: PhiSequence, yaw0: float, skel: Skeleton | None = None) -> np.ndarray:
    """Pose rotations theta' (t, 22, 6).  j_plus is not used to drive the pose."""
    return from_phi_arrays(p.phi, yaw0)


def augment_arrays(phi, rng: np.random.Generator, noise_sigma: float = 0.015, mask_prob: float = 0.25):
    """Gaussian noise on every channel, then whole-frame zero masking. Returns (phi, mask)."""
    phi = np.asarray(phi, dtype=np.float64)
    out = phi + rng.normal(0.0, noise_sigma, phi.shape) if noise_sigma > 0 else phi.copy()
    mask = rng.random(phi.shape[:-1]) < mask_prob if mask_prob > 0 else np.zeros(phi.shape[:-1], bool)
    out[mask] = 0.0
    return out, mask


def augment(p: PhiSequence, rng: np.random.Generator, noise_sigma: float = 0.015,
            mask_prob: float = 0.25) -> PhiSequence:
    phi, mask = augment_arrays(p.phi, rng, noise_sigma, mask_prob)
    return PhiSequence(phi, mask | p.mask)


def mirror_pose(theta, beta, psi):
    """Left/right mirror across the x = 0 plane: swap sides, conjugate rotations by diag(-1, 1, 1)."""
    from .kinematics import MIRROR
    M = np.diag([-1.0, 1.0, 1.0])
    R = rot6d_to_matrix(np.asarray(theta))[..., MIRROR, :, :]
    theta_m = matrix_to_rot6d(M @ R @ M)
    bone_perm = MIRROR[1:] - 1
    beta_m = np.asarray(beta)[..., bone_perm]
    psi_m = np.asarray(psi, dtype=np.float64) * np.array([-1.0, 1.0, 1.0])
    return theta_m, beta_m, psi_m
