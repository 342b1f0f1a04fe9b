"""Pose estimator F, motion denoiser M = (E, D), optimizer and weight snapshots.

Every model keeps all of its parameters in one flat float64 vector; named
arrays are views into it.  That makes snapshots, EMA blends and the
on-disk format plain vector operations.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _kernels
from .autodiff import Graph, Var
from .kinematics import IDENTITY_6D, N_BONES, N_JOINTS, Camera
from .motion_repr import PHI_DIM, WINDOW

MAGIC = b"MTTA"
FORMAT_VERSION = 1
N_NUISANCE = 8
F_INPUT = N_JOINTS * 5 + N_NUISANCE
REL_SCALE = 100.0  # pixels per unit of the centroid-relative keypoint features


class LayoutError(ValueError):
    pass


@dataclass(frozen=True)
class WeightSnapshot:
    data: np.ndarray
    layout: tuple

    def __post_init__(self):
        self.data.setflags(write=False)


class ParamSet:
    """Named parameter arrays backed by one flat vector (and a matching gradient vector).

    With ``ensemble=E`` the set holds E independent members.  Storage is
    member-major, so member ``i`` is the contiguous block ``data.reshape(E, -1)[i]``
    with the same layout as a single model, while every named view gains a
    leading axis of length E.  ``expand`` inserts singleton axes after the
    ensemble axis for the named arrays (biases that must broadcast over a batch).
    """

    def __init__(self, layout, ensemble: int | None = None, expand: dict | None = None):
        self.layout = tuple((name, tuple(int(s) for s in shape)) for name, shape in layout)
        self.ensemble = ensemble
        self.member_size = sum(math.prod(shape) for _, shape in self.layout)
        n_members = ensemble or 1
        self.data = np.zeros(n_members * self.member_size)
        self.grad = np.zeros(n_members * self.member_size)
        self.views: dict[str, np.ndarray] = {}
        self.grad_views: dict[str, np.ndarray] = {}
        expand = expand or {}
        pos = 0
        for name, shape in self.layout:
            n = math.prod(shape)
            if ensemble is None:
                self.views[name] = self.data[pos:pos + n].reshape(shape)
                self.grad_views[name] = self.grad[pos:pos + n].reshape(shape)
            else:
                full = (ensemble,) + (1,) * expand.get(name, 0) + shape
                self.views[name] = self.members()[:, pos:pos + n].reshape(full)
                self.grad_views[name] = self.grad.reshape(ensemble, -1)[:, pos:pos + n].reshape(full)
            pos += n

    @property
    def signature(self) -> tuple:
        return (self.layout, self.ensemble)

    def __getitem__(self, name):
        return self.views[name]

    def members(self) -> np.ndarray:
        """(E, member_size) view of the data (E = 1 without an ensemble)."""
        return self.data.reshape(self.ensemble or 1, self.member_size)

    def bind(self, g: Graph) -> dict[str, Var]:
        return {name: g.param(self.views[name], self.grad_views[name]) for name, _ in self.layout}

    def zero_grad(self):
        self.grad[:] = 0.0

    def snapshot(self) -> WeightSnapshot:
        return WeightSnapshot(self.data.copy(), self.signature)

    def load(self, snap: WeightSnapshot) -> None:
        if snap.layout != self.signature:
            raise LayoutError("snapshot layout does not match this model")
        self.data[:] = snap.data

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: self.views[name] for name, _ in self.layout}


def ema_blend(a: WeightSnapshot, b: WeightSnapshot, mu: float) -> WeightSnapshot:
    """``mu * a + (1 - mu) * b``; the endpoints return exact copies."""
    if a.layout != b.layout:
        raise LayoutError("ema_blend: layouts differ")
    if not 0.0 <= mu <= 1.0:
        raise ValueError(f"ema_blend: mu must lie in [0, 1], got {mu}")
    if mu == 1.0:
        return WeightSnapshot(a.data.copy(), a.layout)
    if mu == 0.0:
        return WeightSnapshot(b.data.copy(), b.layout)
    return WeightSnapshot(mu * a.data + (1.0 - mu) * b.data, a.layout)


def weight_hash(params: ParamSet, member: int | None = None) -> str:
    import hashlib
    data = params.data if member is None else params.members()[member]
    return hashlib.sha256(np.ascontiguousarray(data).tobytes()).hexdigest()[:16]


# -- optimizer ---------------------------------------------------------------

def cosine_lr(step: int, total: int, lr_max: float, lr_min: float) -> float:
    """Cosine annealing from ``lr_max`` at step 0 to ``lr_min`` at step ``total - 1``."""
    if total <= 1:
        return lr_max
    frac = min(max(step / (total - 1), 0.0), 1.0)
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * frac))


class Adam:
    """Adam over a flat vector; ``weight_decay`` is decoupled (AdamW)."""

    def __init__(self, size: int, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, params: ParamSet, lr: float) -> None:
        self.t += 1
        _kernels.adam_update(params.data, params.grad, self.m, self.v, self.b1, self.b2, self.eps,
                             1.0 - self.b1 ** self.t, 1.0 - self.b2 ** self.t, lr, 1.0 - lr * self.weight_decay)


# -- pose estimator ----------------------------------------------------------

@dataclass
class PoseOutput:
    theta: Var  # (B, 22, 6)
    beta: Var   # (B, 21)
    psi: Var    # (B, 3)


def observation_features(keypoints, confidence, nuisance, cam: Camera) -> np.ndarray:
    """(B, 118) input vector.

    Keypoints enter twice: scaled to [-1, 1] and relative to the centroid of
    the detected joints (in units of ``REL_SCALE`` px).  Undetected joints are
    zeroed in both, followed by confidences and nuisance values.
    """
    kp = np.asarray(keypoints, dtype=np.float64)
    conf = np.asarray(confidence, dtype=np.float64)
    size = np.asarray(cam.image_size, dtype=np.float64)
    seen = (conf > 0)[..., None]
    norm = np.where(seen, 2.0 * kp / size - 1.0, 0.0)
    count = np.maximum(seen.sum(axis=-2, keepdims=True), 1)
    centroid = np.where(seen, kp, 0.0).sum(axis=-2, keepdims=True) / count
    rel = np.where(seen, (kp - centroid) / REL_SCALE, 0.0)
    lead = kp.shape[:-2]
    return np.concatenate([norm.reshape(lead + (2 * N_JOINTS,)), rel.reshape(lead + (2 * N_JOINTS,)), conf,
                           np.asarray(nuisance, dtype=np.float64)], axis=-1)


def _softplus_inv(y):
    return math.log(math.expm1(y))


class PoseEstimator:
    """MLP 118 -> hidden -> hidden with separate theta / beta / psi heads.

    With ``ensemble=E`` it holds E independent estimators evaluated together
    on inputs shaped (E, B, 118).
    """

    def __init__(self, hidden: int = 128, rng: np.random.Generator | None = None, ensemble: int | None = None):
        self.hidden = hidden
        self.ensemble = ensemble
        h = hidden
        layout = [
            ("fc1.w", (F_INPUT, h)), ("fc1.b", (h,)),
            ("fc2.w", (h, h)), ("fc2.b", (h,)),
            ("theta.w", (h, 6 * N_JOINTS)), ("theta.b", (6 * N_JOINTS,)),
            ("beta.w", (h, N_BONES)), ("beta.b", (N_BONES,)),
            ("psi.w", (h, 3)), ("psi.b", (3,)),
        ]
        self.params = ParamSet(layout, ensemble, {name: 1 for name, _ in layout if name.endswith(".b")})
        if rng is not None:
            self.init_weights(rng)

    def init_weights(self, rng: np.random.Generator) -> None:
        p = self.params
        p["fc1.w"][:] = rng.normal(0, math.sqrt(2.0 / F_INPUT), p["fc1.w"].shape)
        p["fc2.w"][:] = rng.normal(0, math.sqrt(2.0 / self.hidden), p["fc2.w"].shape)
        for head in ("theta", "beta", "psi"):
            p[f"{head}.w"][:] = rng.normal(0, 0.01, p[f"{head}.w"].shape)
        p["fc1.b"][:] = 0.0
        p["fc2.b"][:] = 0.0
        # a zero network would emit an invalid 6D rotation; start at the rest pose
        p["theta.b"][:] = np.tile(IDENTITY_6D, N_JOINTS)
        p["beta.b"][:] = math.log(0.5)  # 0.5 + 1.5 * sigmoid(x) == 1
        p["psi.b"][:] = [0.0, 0.0, _softplus_inv(3.9)]

    def forward(self, g: Graph, features) -> PoseOutput:
        w = self.params.bind(g)
        x = g._wrap(features)
        h1 = g.relu(x @ w["fc1.w"] + w["fc1.b"])
        h2 = g.relu(h1 @ w["fc2.w"] + w["fc2.b"])
        theta = (h2 @ w["theta.w"] + w["theta.b"]).reshape(*x.shape[:-1], N_JOINTS, 6)
        beta = 0.5 + 1.5 * g.sigmoid(h2 @ w["beta.w"] + w["beta.b"])
        raw = h2 @ w["psi.w"] + w["psi.b"]
        psi = g.concat([raw[..., 0:2], g.softplus(raw[..., 2:3]) + 0.1], axis=-1)
        return PoseOutput(theta, beta, psi)

    def replicate(self, n: int) -> "PoseEstimator":
        """Ensemble of ``n`` copies of this (single) model."""
        out = PoseEstimator(self.hidden, ensemble=n)
        out.params.members()[:] = self.params.data
        return out

    def member(self, i: int) -> "PoseEstimator":
        out = PoseEstimator(self.hidden)
        out.params.data[:] = self.params.members()[i]
        return out

    def predict(self, features):
        """Forward pass without keeping the graph; returns numpy (theta, beta, psi)."""
        out = self.forward(Graph(), features)
        return out.theta.value, out.beta.value, out.psi.value


# -- motion denoiser ---------------------------------------------------------

def _conv_layout(prefix, cout, cin, k):
    return [(f"{prefix}.w", (cout, cin, k)), (f"{prefix}.b", (cout,))]


class MotionDenoiser:
    """Temporal conv autoencoder: 16 frames x 197 -> 4 latents x d -> 16 x 197.

    Each encoder block halves time with a stride-2 conv followed by a residual
    unit; each decoder block runs a residual unit, repeats frames (nearest
    neighbour) and convolves.
    """

    def __init__(self, latent_dim: int = 32, width: int = 64, rng: np.random.Generator | None = None,
                 ensemble: int | None = None):
        self.latent_dim = latent_dim
        self.width = width
        self.ensemble = ensemble
        d, h = latent_dim, width
        layout = []
        layout += _conv_layout("enc.in", h, PHI_DIM, 1)
        for i in range(2):
            layout += _conv_layout(f"enc.down{i}", h, h, 3)
            layout += _conv_layout(f"enc.res{i}.c1", h, h, 3)
            layout += _conv_layout(f"enc.res{i}.c2", h, h, 1)
        layout += _conv_layout("enc.out", d, h, 3)
        layout += _conv_layout("dec.in", h, d, 3)
        for i in range(2):
            layout += _conv_layout(f"dec.res{i}.c1", h, h, 3)
            layout += _conv_layout(f"dec.res{i}.c2", h, h, 1)
            layout += _conv_layout(f"dec.up{i}", h, h, 3)
        layout += _conv_layout("dec.post", h, h, 3)
        layout += _conv_layout("dec.out", PHI_DIM, h, 1)
        self.params = ParamSet(layout, ensemble)
        if rng is not None:
            self.init_weights(rng)

    def init_weights(self, rng: np.random.Generator) -> None:
        for name, shape in self.params.layout:
            view = self.params[name]
            if name.endswith(".b"):
                view[:] = 0.0
                continue
            fan_in = shape[1] * shape[2]
            scale = math.sqrt(2.0 / fan_in)
            if ".c2." in name or name.startswith("dec.out"):
                scale *= 0.1
            view[:] = rng.normal(0.0, scale, view.shape)

    def _conv(self, g, w, name, x, stride=1):
        k = w[f"{name}.w"].shape[-1]
        return g.conv1d(x, w[f"{name}.w"], w[f"{name}.b"], stride=stride, padding=k // 2, time_major=True)

    def _res(self, g, w, name, x):
        y = self._conv(g, w, f"{name}.c1", g.relu(x))
        y = self._conv(g, w, f"{name}.c2", g.relu(y))
        return x + y

    def encode(self, g: Graph, phi, w=None) -> Var:
        """phi (B, 16, 197) -> z (B, 4, d); an ensemble takes (E, B, 16, 197)."""
        w = w or self.params.bind(g)
        x = g.relu(self._conv(g, w, "enc.in", g._wrap(phi)))
        for i in range(2):
            x = self._conv(g, w, f"enc.down{i}", x, stride=2)
            x = self._res(g, w, f"enc.res{i}", x)
        return self._conv(g, w, "enc.out", x)

    def decode(self, g: Graph, z, w=None) -> Var:
        """z (B, 4, d) -> phi (B, 16, 197)."""
        w = w or self.params.bind(g)
        x = g.relu(self._conv(g, w, "dec.in", g._wrap(z)))
        for i in range(2):
            x = self._res(g, w, f"dec.res{i}", x)
            x = g.upsample_nearest(x, 2, axis=-2)
            x = self._conv(g, w, f"dec.up{i}", x)
        x = g.relu(self._conv(g, w, "dec.post", x))
        return self._conv(g, w, "dec.out", x)

    def replicate(self, n: int) -> "MotionDenoiser":
        out = MotionDenoiser(self.latent_dim, self.width, ensemble=n)
        out.params.members()[:] = self.params.data
        return out

    def member(self, i: int) -> "MotionDenoiser":
        out = MotionDenoiser(self.latent_dim, self.width)
        out.params.data[:] = self.params.members()[i]
        return out

    def encode_np(self, phi) -> np.ndarray:
        return self.encode(Graph(), np.asarray(phi)).value

    def decode_np(self, z) -> np.ndarray:
        return self.decode(Graph(), np.asarray(z)).value

    @property
    def latent_len(self) -> int:
        return WINDOW // 4


# -- model file --------------------------------------------------------------

def save_arrays(path, arrays: dict[str, np.ndarray]) -> None:
    """Write named float64 arrays: magic, version, layout descriptor, raw little-endian data."""
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(arrays))]
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
    for arr in arrays.values():
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_arrays(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise LayoutError(f"{path}: not a model file (bad magic)")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != FORMAT_VERSION:
        raise LayoutError(f"{path}: unsupported format version {version}")
    pos = 12
    shapes = []
    for _ in range(count):
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos:pos + n].decode("utf-8")
        pos += n
        (ndim,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        shapes.append((name, shape))
    out = {}
    for name, shape in shapes:
        n = math.prod(shape)
        out[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).astype(np.float64).reshape(shape)
        pos += 8 * n
    if pos != len(buf):
        raise LayoutError(f"{path}: trailing bytes after parameter block")
    return out


def assign_arrays(params: ParamSet, arrays: dict[str, np.ndarray]) -> None:
    for name, shape in params.layout:
        if name not in arrays or arrays[name].shape != shape:
            got = arrays[name].shape if name in arrays else None
            raise LayoutError(f"parameter {name}: expected shape {shape}, file has {got}")
        params.views[name][:] = arrays[name]


def save_pose_estimator(path, model: PoseEstimator) -> None:
    save_arrays(path, model.params.arrays())


def load_pose_estimator(path) -> PoseEstimator:
    arrays = load_arrays(path)
    if "fc1.w" not in arrays:
        raise LayoutError(f"{path}: not a pose estimator file")
    model = PoseEstimator(hidden=arrays["fc1.w"].shape[1])
    assign_arrays(model.params, arrays)
    return model


def save_motion_model(path, model: MotionDenoiser, codebook) -> None:
    """Denoiser weights plus the embedded codebook ("codebook.layer{i}", "codebook.usage")."""
    arrays = dict(model.params.arrays())
    arrays.update(codebook.arrays())
    save_arrays(path, arrays)


def load_motion_model(path):
    """Returns (MotionDenoiser, ResidualCodebook)."""
    from .codebook import ResidualCodebook

    arrays = load_arrays(path)
    if "enc.out.w" not in arrays:
        raise LayoutError(f"{path}: not a motion denoiser file")
    d, h = arrays["enc.out.w"].shape[:2]
    model = MotionDenoiser(latent_dim=d, width=h)
    assign_arrays(model.params, arrays)
    return model, ResidualCodebook.from_arrays(arrays)
