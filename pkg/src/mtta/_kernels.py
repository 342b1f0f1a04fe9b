"""Compiled inner loops for the per-joint and per-parameter hot paths.

Every kernel works on C-contiguous float64 arrays with a flattened batch axis.
"""

from __future__ import annotations

import math

import numba as nb
import numpy as np

_jit = nb.njit(cache=True, nogil=True)


@_jit
def rot6d_fwd(r):
    """(n, 6) -> rotation matrices (n, 3, 3) plus the smallest norm met during Gram-Schmidt."""
    n = r.shape[0]
    R = np.empty((n, 3, 3))
    smallest = np.inf
    for i in range(n):
        a0, a1, a2 = r[i, 0], r[i, 1], r[i, 2]
        c0, c1, c2 = r[i, 3], r[i, 4], r[i, 5]
        n1 = math.sqrt(a0 * a0 + a1 * a1 + a2 * a2)
        smallest = min(smallest, n1)
        if n1 == 0.0:
            n1 = 1.0
        b0, b1, b2 = a0 / n1, a1 / n1, a2 / n1
        d = b0 * c0 + b1 * c1 + b2 * c2
        u0, u1, u2 = c0 - d * b0, c1 - d * b1, c2 - d * b2
        nu = math.sqrt(u0 * u0 + u1 * u1 + u2 * u2)
        smallest = min(smallest, nu)
        if nu == 0.0:
            nu = 1.0
        e0, e1, e2 = u0 / nu, u1 / nu, u2 / nu
        R[i, 0, 0], R[i, 1, 0], R[i, 2, 0] = b0, b1, b2
        R[i, 0, 1], R[i, 1, 1], R[i, 2, 1] = e0, e1, e2
        R[i, 0, 2] = b1 * e2 - b2 * e1
        R[i, 1, 2] = b2 * e0 - b0 * e2
        R[i, 2, 2] = b0 * e1 - b1 * e0
    return R, smallest


@_jit
def rot6d_vjp(r, g):
    """Cotangent of the 6D input given cotangent ``g`` (n, 3, 3) of the Gram-Schmidt matrices."""
    n = r.shape[0]
    out = np.empty((n, 6))
    a1 = np.empty(3)
    a2 = np.empty(3)
    b1 = np.empty(3)
    b2 = np.empty(3)
    g1 = np.empty(3)
    g2 = np.empty(3)
    g3 = np.empty(3)
    for i in range(n):
        for k in range(3):
            a1[k] = r[i, k]
            a2[k] = r[i, 3 + k]
            g1[k] = g[i, k, 0]
            g2[k] = g[i, k, 1]
            g3[k] = g[i, k, 2]
        n1 = math.sqrt(a1[0] ** 2 + a1[1] ** 2 + a1[2] ** 2)
        for k in range(3):
            b1[k] = a1[k] / n1
        d = b1[0] * a2[0] + b1[1] * a2[1] + b1[2] * a2[2]
        for k in range(3):
            b2[k] = a2[k] - d * b1[k]
        nu = math.sqrt(b2[0] ** 2 + b2[1] ** 2 + b2[2] ** 2)
        for k in range(3):
            b2[k] /= nu
        # b3 = b1 x b2
        db2_0 = g2[0] + (g3[1] * b1[2] - g3[2] * b1[1])
        db2_1 = g2[1] + (g3[2] * b1[0] - g3[0] * b1[2])
        db2_2 = g2[2] + (g3[0] * b1[1] - g3[1] * b1[0])
        db1_0 = g1[0] + (b2[1] * g3[2] - b2[2] * g3[1])
        db1_1 = g1[1] + (b2[2] * g3[0] - b2[0] * g3[2])
        db1_2 = g1[2] + (b2[0] * g3[1] - b2[1] * g3[0])
        p = b2[0] * db2_0 + b2[1] * db2_1 + b2[2] * db2_2
        du0 = (db2_0 - b2[0] * p) / nu
        du1 = (db2_1 - b2[1] * p) / nu
        du2 = (db2_2 - b2[2] * p) / nu
        b1du = b1[0] * du0 + b1[1] * du1 + b1[2] * du2
        out[i, 3] = du0 - b1[0] * b1du
        out[i, 4] = du1 - b1[1] * b1du
        out[i, 5] = du2 - b1[2] * b1du
        db1_0 -= d * du0 + b1du * a2[0]
        db1_1 -= d * du1 + b1du * a2[1]
        db1_2 -= d * du2 + b1du * a2[2]
        q = b1[0] * db1_0 + b1[1] * db1_1 + b1[2] * db1_2
        out[i, 0] = (db1_0 - b1[0] * q) / n1
        out[i, 1] = (db1_1 - b1[1] * q) / n1
        out[i, 2] = (db1_2 - b1[2] * q) / n1
    return out


@_jit
def fk_fwd(local, bone, psi, parents):
    """Global rotations (n, J, 3, 3) and joint positions (n, J, 3); parents precede children."""
    n, J = local.shape[0], local.shape[1]
    G = np.empty((n, J, 3, 3))
    P = np.empty((n, J, 3))
    for b in range(n):
        for a in range(3):
            P[b, 0, a] = psi[b, a]
            for c in range(3):
                G[b, 0, a, c] = local[b, 0, a, c]
        for j in range(1, J):
            p = parents[j]
            for a in range(3):
                s = P[b, p, a]
                for c in range(3):
                    s += G[b, p, a, c] * bone[b, j - 1, c]
                    acc = 0.0
                    for k in range(3):
                        acc += G[b, p, a, k] * local[b, j, k, c]
                    G[b, j, a, c] = acc
                P[b, j, a] = s
    return G, P


@_jit
def fk_vjp(G, local, bone, parents, gp):
    """Cotangents of (local rotations, bone vectors, root) for position cotangent ``gp`` (n, J, 3)."""
    n, J = local.shape[0], local.shape[1]
    dP = gp.copy()
    dG = np.zeros((n, J, 3, 3))
    dL = np.empty((n, J, 3, 3))
    dbone = np.empty((n, J - 1, 3))
    droot = np.empty((n, 3))
    for b in range(n):
        for j in range(J - 1, 0, -1):
            p = parents[j]
            for a in range(3):
                dP[b, p, a] += dP[b, j, a]
            for c in range(3):
                s = 0.0
                for a in range(3):
                    s += G[b, p, a, c] * dP[b, j, a]
                dbone[b, j - 1, c] = s
            for a in range(3):
                for c in range(3):
                    s = dP[b, j, a] * bone[b, j - 1, c]
                    for k in range(3):
                        s += dG[b, j, a, k] * local[b, j, c, k]
                    dG[b, p, a, c] += s
            for a in range(3):
                for c in range(3):
                    s = 0.0
                    for k in range(3):
                        s += G[b, p, k, a] * dG[b, j, k, c]
                    dL[b, j, a, c] = s
        for a in range(3):
            droot[b, a] = dP[b, 0, a]
            for c in range(3):
                dL[b, 0, a, c] = dG[b, 0, a, c]
    return dL, dbone, droot


@nb.njit(cache=True, nogil=True, fastmath=True)
def adam_update(data, grad, m, v, b1, b2, eps, c1, c2, lr, decay):
    """One fused Adam(W) pass; ``c1``/``c2`` are the bias corrections, ``decay`` multiplies the weights first."""
    for i in range(data.shape[0]):
        g = grad[i]
        mi = b1 * m[i] + (1.0 - b1) * g
        vi = b2 * v[i] + (1.0 - b2) * g * g
        m[i] = mi
        v[i] = vi
        data[i] = data[i] * decay - lr * (mi / c1) / (math.sqrt(vi / c2) + eps)
