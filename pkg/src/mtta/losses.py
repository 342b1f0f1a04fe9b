"""Loss terms shared by pre-training and adaptation."""

from __future__ import annotations

import numpy as np

from .autodiff import Graph, Var
from .kinematics import Camera, Skeleton, forward_kinematics_var, project_var


def l1(g: Graph, x: Var, target) -> Var:
    """Mean absolute error against a constant target."""
    return g.mean(g.abs(x - g.stop_gradient(g._wrap(target))))


def smooth_l1_loss(g: Graph, x: Var, target, weight=None) -> Var:
    """Mean smooth-L1 (beta 1); with ``weight`` the elementwise terms are weighted and summed."""
    e = g.smooth_l1(x - g.stop_gradient(g._wrap(target)))
    if weight is None:
        return g.mean(e)
    return g.sum(e * g.constant(weight))


def image_scale(cam: Camera) -> np.ndarray:
    return 2.0 / np.asarray(cam.image_size, dtype=np.float64)


def reprojection_loss(g: Graph, skel: Skeleton, cam: Camera, theta: Var, beta: Var, psi: Var,
                      keypoints, confidence) -> Var:
    """Confidence-weighted mean |projection - detection| in normalized image units.

    Undetected joints (confidence 0) carry no weight.
    """
    joints = forward_kinematics_var(g, skel, theta, beta, psi)
    uv = project_var(g, cam, joints)
    conf = np.asarray(confidence, dtype=np.float64)
    total = 2.0 * conf.sum()
    if total <= 0:
        return g.constant(0.0)
    w = (conf[..., None] * image_scale(cam)) / total
    err = g.abs(uv - g.constant(np.asarray(keypoints, dtype=np.float64)))
    return g.sum(err * g.constant(np.broadcast_to(w, err.shape)))


# -- per-member losses for ensembles (leading axis = member) --------------------

def member_l1(g: Graph, x: Var, target) -> Var:
    """(E,) mean absolute error of each member (fused; the target is a constant)."""
    d = (x.value - np.asarray(target, dtype=np.float64)).reshape(x.shape[0], -1)
    n = d.shape[1]
    sign = np.sign(d)

    def vjp(gv):
        return ((sign * (gv[:, None] / n)).reshape(x.shape),)
    return g.custom("member_l1", [x], np.abs(d).mean(axis=1), vjp)


def member_smooth_l1(g: Graph, x: Var, target, weight) -> Var:
    """(E,) weighted sum of smooth-L1 (beta 1) terms per member; ``weight`` broadcasts against one member."""
    d = x.value - np.asarray(target, dtype=np.float64)
    a = np.abs(d)
    c = np.minimum(a, 1.0)
    w = np.broadcast_to(np.asarray(weight, dtype=np.float64), d.shape[1:])
    per = (c * (a - 0.5 * c) * w).reshape(len(d), -1).sum(axis=1)

    def vjp(gv):
        return (np.clip(d, -1.0, 1.0) * w * gv.reshape((-1,) + (1,) * (d.ndim - 1)),)
    return g.custom("member_smooth_l1", [x], per, vjp)


def member_reprojection(g: Graph, skel: Skeleton, cam: Camera, theta: Var, beta: Var, psi: Var,
                        keypoints, confidence) -> Var:
    """(E,) confidence-weighted reprojection error of each member in normalized image units."""
    joints = forward_kinematics_var(g, skel, theta, beta, psi)
    uv = project_var(g, cam, joints)
    conf = np.asarray(confidence, dtype=np.float64)
    total = 2.0 * conf.reshape(len(conf), -1).sum(axis=1)
    scale = np.where(total > 0, 1.0 / np.where(total > 0, total, 1.0), 0.0)
    w = conf[..., None] * image_scale(cam) * scale.reshape((-1,) + (1,) * (conf.ndim))
    err = g.abs(uv - g.constant(np.asarray(keypoints, dtype=np.float64)))
    return g.sum((err * g.constant(w)).reshape(len(conf), -1), axis=1)
