"""Synthetic persons, their motion, a noisy 2D detector with domain shift, and batch streams.

Motion is built from four primitives (walk cycle, squat, arm reach, pelvis
sway) whose activity drifts smoothly over time.  A person keeps the same
bone scales and primitive habits for the whole stream.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator

import numpy as np

from .kinematics import (
    N_BONES,
    N_JOINTS,
    Camera,
    Skeleton,
    axis_angle_to_matrix,
    forward_kinematics,
    matrix_to_rot6d,
    project_2d,
)

PRIMITIVES = ("walk", "squat", "reach", "sway")
STREAM_FPS = 30
BATCH_FRAMES = 160
N_NUISANCE = 8

J = {name: i for i, name in enumerate((
    "pelvis", "l_hip", "r_hip", "spine1", "l_knee", "r_knee", "spine2",
    "l_ankle", "r_ankle", "spine3", "l_foot", "r_foot", "neck", "l_collar",
    "r_collar", "head", "l_shoulder", "r_shoulder", "l_elbow", "r_elbow",
    "l_wrist", "r_wrist"))}

# parameter ranges per primitive: (frequency Hz, amplitude rad)
RANGES = {
    "walk": ((0.6, 1.0), (0.25, 0.5)),
    "squat": ((0.15, 0.35), (0.3, 0.8)),
    "reach": ((0.15, 0.4), (0.4, 1.0)),
    "sway": ((0.1, 0.3), (0.15, 0.5)),
}


@dataclass
class PersonProfile:
    person_id: int
    beta: np.ndarray
    primitive_mix: np.ndarray          # (4,) weights, sum 1
    freq: np.ndarray                   # (4,) Hz
    amp: np.ndarray                    # (4,) rad
    phase: np.ndarray                  # (4,) rad
    position: np.ndarray = field(default_factory=lambda: np.array([0.0, -0.25, 4.2]))
    facing: float = np.pi              # base pelvis yaw; pi faces the camera
    seed: int = 0

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=np.float64)
        self.primitive_mix = np.asarray(self.primitive_mix, dtype=np.float64)
        if np.any(self.primitive_mix < 0) or abs(self.primitive_mix.sum() - 1.0) > 1e-9:
            raise ValueError("primitive_mix must be non-negative and sum to 1")
        if np.any(self.beta < 0.5) or np.any(self.beta > 2.0):
            raise ValueError("beta must lie in [0.5, 2.0]")


def random_profile(person_id: int, rng: np.random.Generator, scale_range=(0.88, 1.12)) -> PersonProfile:
    scale = rng.uniform(*scale_range)
    beta = np.clip(scale * rng.uniform(0.94, 1.06, N_BONES), 0.5, 2.0)
    mix = rng.dirichlet(np.full(len(PRIMITIVES), 1.2))
    freq = np.array([rng.uniform(*RANGES[p][0]) for p in PRIMITIVES])
    amp = np.array([rng.uniform(*RANGES[p][1]) for p in PRIMITIVES])
    phase = rng.uniform(0, 2 * np.pi, len(PRIMITIVES))
    pelvis_height = 0.93 * scale
    position = np.array([rng.uniform(-0.4, 0.4), pelvis_height - 1.2, rng.uniform(3.6, 4.8)])
    return PersonProfile(person_id, beta, mix, freq, amp, phase, position,
                         facing=np.pi + rng.uniform(-0.5, 0.5), seed=int(rng.integers(2**31)))


def pure_profile(primitive: str, freq: float = 0.8, amp: float = 0.4, person_id: int = 0) -> PersonProfile:
    """Single-primitive profile with unit bone scales (for tests and inspection)."""
    mix = np.array([1.0 if p == primitive else 0.0 for p in PRIMITIVES])
    return PersonProfile(person_id, np.ones(N_BONES), mix,
                         np.full(4, freq), np.full(4, amp), np.zeros(4))


class MotionGenerator:
    """Deterministic ground-truth motion for one profile; frames may be requested lazily."""

    def __init__(self, profile: PersonProfile, rng: np.random.Generator):
        self.profile = profile
        # slow drift of primitive activity (period 20-40 s) and per-joint texture (off for a single primitive)
        self.activity_period = rng.uniform(20.0, 40.0, len(PRIMITIVES))
        self.activity_phase = rng.uniform(0, 2 * np.pi, len(PRIMITIVES))
        self.texture_freq = rng.uniform(0.05, 0.3, (N_JOINTS, 3))
        self.texture_phase = rng.uniform(0, 2 * np.pi, (N_JOINTS, 3))
        self.texture_amp = 0.0 if profile.primitive_mix.max() > 0.999 else 0.03

    def activity(self, t: np.ndarray) -> np.ndarray:
        mix = self.profile.primitive_mix
        raw = mix[None] * (1.0 + 0.6 * np.sin(2 * np.pi * t[:, None] / self.activity_period + self.activity_phase))
        return raw / np.maximum(raw.sum(axis=1, keepdims=True), 1e-12)

    def frames(self, start: int, n: int, fps: float = STREAM_FPS):
        """Returns (theta (n, 22, 6), beta (21,), psi (n, 3))."""
        p = self.profile
        t = (start + np.arange(n)) / fps
        act = self.activity(t)
        aa = np.zeros((n, N_JOINTS, 3))
        root = np.tile(p.position, (n, 1))
        yaw = np.full(n, p.facing)

        # walk: alternating hip/shoulder swing, knee flexion, small pelvis bob
        w, (fw, aw, ph) = act[:, 0], (p.freq[0], p.amp[0], p.phase[0])
        s = np.sin(2 * np.pi * fw * t + ph)
        c = np.cos(2 * np.pi * fw * t + ph)
        aa[:, J["l_hip"], 0] += w * aw * s
        aa[:, J["r_hip"], 0] -= w * aw * s
        aa[:, J["l_knee"], 0] += w * 0.7 * aw * (1 - c)
        aa[:, J["r_knee"], 0] += w * 0.7 * aw * (1 + c)
        aa[:, J["l_shoulder"], 0] -= w * 0.8 * aw * s
        aa[:, J["r_shoulder"], 0] += w * 0.8 * aw * s
        aa[:, J["l_elbow"], 1] += w * 0.3 * aw * (1 + s)
        aa[:, J["r_elbow"], 1] -= w * 0.3 * aw * (1 - s)
        root[:, 1] += w * 0.015 * np.cos(4 * np.pi * fw * t + 2 * ph)

        # squat: hip and knee flexion with a pelvis dip
        w, (fs, as_, ph) = act[:, 1], (p.freq[1], p.amp[1], p.phase[1])
        q = 0.5 * (1 - np.cos(2 * np.pi * fs * t + ph)) * as_
        for side in ("l", "r"):
            aa[:, J[f"{side}_hip"], 0] -= w * q
            aa[:, J[f"{side}_knee"], 0] += w * 2.0 * q
            aa[:, J[f"{side}_ankle"], 0] -= w * q
        aa[:, J["spine1"], 0] += w * 0.4 * q
        root[:, 1] -= w * 0.25 * q * p.beta[3]

        # reach: alternating arm raises with elbow flexion
        w, (fr, ar, ph) = act[:, 2], (p.freq[2], p.amp[2], p.phase[2])
        ul = 0.5 * (1 - np.cos(2 * np.pi * fr * t + ph))
        ur = 0.5 * (1 - np.cos(2 * np.pi * fr * t + ph + np.pi))
        aa[:, J["l_shoulder"], 2] += w * ar * ul
        aa[:, J["r_shoulder"], 2] -= w * ar * ur
        aa[:, J["l_shoulder"], 1] += w * 0.5 * ar * ul
        aa[:, J["r_shoulder"], 1] -= w * 0.5 * ar * ur
        aa[:, J["l_elbow"], 1] += w * 0.8 * ar * ul
        aa[:, J["r_elbow"], 1] -= w * 0.8 * ar * ur

        # sway: pelvis yaw oscillation, spine counter-rotates
        w, (fy, ay, ph) = act[:, 3], (p.freq[3], p.amp[3], p.phase[3])
        sy = w * ay * np.sin(2 * np.pi * fy * t + ph)
        yaw = yaw + sy
        for name in ("spine1", "spine2", "spine3"):
            aa[:, J[name], 1] -= sy / 3.0

        if self.texture_amp:
            aa += self.texture_amp * np.sin(2 * np.pi * self.texture_freq * t[:, None, None] + self.texture_phase)

        R = axis_angle_to_matrix(aa)
        # relaxed stance: arms hang down
        R[:, J["l_shoulder"]] = R[:, J["l_shoulder"]] @ axis_angle_to_matrix(np.array([0.0, 0.0, -1.2]))
        R[:, J["r_shoulder"]] = R[:, J["r_shoulder"]] @ axis_angle_to_matrix(np.array([0.0, 0.0, 1.2]))
        yaw_aa = np.zeros((n, 3))
        yaw_aa[:, 1] = yaw
        R[:, 0] = axis_angle_to_matrix(yaw_aa) @ R[:, 0]
        theta = matrix_to_rot6d(R, tol=1e-8)
        return theta, p.beta.copy(), root


def generate_motion(profile: PersonProfile, n_frames: int, fps: float, rng: np.random.Generator):
    if n_frames <= 0:
        raise ValueError("n_frames must be positive")
    return MotionGenerator(profile, rng).frames(0, n_frames, fps)


# -- observation model --------------------------------------------------------

@dataclass
class DomainShift:
    keypoint_bias: np.ndarray = field(default_factory=lambda: np.zeros(2))  # pixels
    noise_scale: float = 1.0          # detector noise std = noise_scale * 2 px
    dropout_prob: float = 0.0
    radial_warp: float = 0.0
    nuisance_offset: np.ndarray = field(default_factory=lambda: np.zeros(N_NUISANCE))

    def __post_init__(self):
        self.keypoint_bias = np.asarray(self.keypoint_bias, dtype=np.float64).reshape(2)
        self.nuisance_offset = np.asarray(self.nuisance_offset, dtype=np.float64).reshape(N_NUISANCE)
        if not 0.0 <= self.dropout_prob <= 1.0:
            raise ValueError("dropout_prob must lie in [0, 1]")
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be non-negative")

    def differs_from(self, other: "DomainShift") -> bool:
        return (not np.array_equal(self.keypoint_bias, other.keypoint_bias)
                or self.noise_scale != other.noise_scale
                or self.dropout_prob != other.dropout_prob
                or self.radial_warp != other.radial_warp
                or not np.array_equal(self.nuisance_offset, other.nuisance_offset))

    def to_dict(self) -> dict:
        return {"keypoint_bias": self.keypoint_bias.tolist(), "noise_scale": self.noise_scale,
                "dropout_prob": self.dropout_prob, "radial_warp": self.radial_warp,
                "nuisance_offset": self.nuisance_offset.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "DomainShift":
        return cls(**d)


SOURCE_SHIFT = DomainShift()


def preset(name: str) -> DomainShift:
    """Named test-domain presets."""
    if name == "source":
        return DomainShift()
    if name == "standard":
        return DomainShift(keypoint_bias=[6.0, -4.0], noise_scale=3.0, dropout_prob=0.1,
                           radial_warp=0.15, nuisance_offset=np.full(N_NUISANCE, 0.6))
    if name == "corrupted":
        return DomainShift(keypoint_bias=[10.0, -6.0], noise_scale=5.0, dropout_prob=0.2,
                           radial_warp=0.25, nuisance_offset=np.full(N_NUISANCE, 1.0))
    raise KeyError(f"unknown domain shift preset {name!r}")


@dataclass
class Observations:
    """What the adapter may see: detector output only, no ground truth."""
    keypoints: np.ndarray   # (n, 22, 2) pixels, zero where dropped
    confidence: np.ndarray  # (n, 22) in [0, 1]
    nuisance: np.ndarray    # (n, 8)

    def __len__(self):
        return len(self.keypoints)

    def take(self, idx) -> "Observations":
        return Observations(self.keypoints[idx], self.confidence[idx], self.nuisance[idx])


@dataclass
class GroundTruth:
    theta: np.ndarray  # (n, 22, 6)
    beta: np.ndarray   # (21,)
    psi: np.ndarray    # (n, 3)

    def joints(self, skel: Skeleton) -> np.ndarray:
        return forward_kinematics(skel, self.theta, np.broadcast_to(self.beta, (len(self.theta), N_BONES)), self.psi)


@dataclass
class StreamBatch:
    person_id: int
    index: int
    obs: Observations
    gt: GroundTruth | None

    def __len__(self):
        return len(self.obs)


def radial_warp(uv, cam: Camera, k: float):
    c = np.asarray(cam.principal_point)
    d = uv - c
    r2 = np.sum(d * d, axis=-1, keepdims=True) / cam.focal ** 2
    return c + d * (1.0 + k * r2)


def observe(theta, beta, psi, cam: Camera, shift: DomainShift, rng: np.random.Generator,
            skel: Skeleton | None = None) -> Observations:
    skel = skel or Skeleton()
    n = len(theta)
    joints = forward_kinematics(skel, theta, np.broadcast_to(beta, (n, N_BONES)), psi)
    exact, _ = project_2d(cam, joints)
    kp = radial_warp(exact, cam, shift.radial_warp) if shift.radial_warp else exact.copy()
    kp = kp + shift.keypoint_bias
    if shift.noise_scale > 0:
        kp = kp + rng.normal(0.0, 2.0 * shift.noise_scale, kp.shape)
    err = np.linalg.norm(kp - exact, axis=-1)
    conf = np.exp(-err / 10.0)
    if shift.dropout_prob > 0:
        dropped = rng.random((n, N_JOINTS)) < shift.dropout_prob
        conf[dropped] = 0.0
        kp[dropped] = 0.0
    nuisance = shift.nuisance_offset + rng.normal(0.0, 0.1, (n, N_NUISANCE))
    return Observations(kp, conf, nuisance)


def stream_person(profile: PersonProfile, shift: DomainShift, total_minutes: float,
                  rng: np.random.Generator, cam: Camera | None = None,
                  skel: Skeleton | None = None) -> Iterator[StreamBatch]:
    """Lazily yield consecutive full 160-frame batches at 30 fps."""
    if total_minutes <= 0:
        raise ValueError("total_minutes must be positive")
    cam = cam or Camera()
    skel = skel or Skeleton()
    gen = MotionGenerator(profile, rng)
    n_batches = int(round(total_minutes * 60 * STREAM_FPS)) // BATCH_FRAMES
    for b in range(n_batches):
        theta, beta, psi = gen.frames(b * BATCH_FRAMES, BATCH_FRAMES, STREAM_FPS)
        obs = observe(theta, beta, psi, cam, shift, rng, skel)
        yield StreamBatch(profile.person_id, b, obs, GroundTruth(theta, beta, psi))


def n_batches_for(total_minutes: float) -> int:
    return int(round(total_minutes * 60 * STREAM_FPS)) // BATCH_FRAMES


# -- batch files --------------------------------------------------------------

BATCH_MAGIC = b"MTSB"
BATCH_VERSION = 1
FLAG_GT = 1
_HEADER = struct.Struct("<4sIIIII")


class StreamFileError(ValueError):
    pass


def write_batch(path, batch: StreamBatch, include_gt: bool = True) -> None:
    n = len(batch)
    has_gt = include_gt and batch.gt is not None
    header = _HEADER.pack(BATCH_MAGIC, BATCH_VERSION, batch.person_id, batch.index, n, FLAG_GT if has_gt else 0)
    obs = np.concatenate([batch.obs.keypoints.reshape(n, -1), batch.obs.confidence,
                          batch.obs.nuisance], axis=1)
    parts = [header, np.ascontiguousarray(obs, dtype="<f8").tobytes()]
    if has_gt:
        gt = np.concatenate([batch.gt.theta.reshape(n, -1), np.broadcast_to(batch.gt.beta, (n, N_BONES)),
                             batch.gt.psi], axis=1)
        parts.append(np.ascontiguousarray(gt, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def _read(path):
    buf = Path(path).read_bytes()
    magic, version, pid, idx, n, flags = _HEADER.unpack_from(buf, 0)
    if magic != BATCH_MAGIC or version != BATCH_VERSION:
        raise StreamFileError(f"{path}: not a stream batch file")
    width = 2 * N_JOINTS + N_JOINTS + N_NUISANCE
    obs = np.frombuffer(buf, "<f8", n * width, _HEADER.size).reshape(n, width).astype(np.float64)
    return buf, pid, idx, n, flags, obs


def read_observations(path) -> StreamBatch:
    """Adapter-side reader: returns the batch with ``gt=None``; the GT section is never decoded."""
    _, pid, idx, n, _, obs = _read(path)
    o = Observations(obs[:, :2 * N_JOINTS].reshape(n, N_JOINTS, 2),
                     obs[:, 2 * N_JOINTS:3 * N_JOINTS].copy(), obs[:, 3 * N_JOINTS:].copy())
    return StreamBatch(pid, idx, o, None)


def has_ground_truth(path) -> bool:
    with open(path, "rb") as fh:
        header = fh.read(_HEADER.size)
    return bool(_HEADER.unpack(header)[5] & FLAG_GT)


def read_ground_truth(path) -> GroundTruth:
    """Evaluation-side reader; fails when the file carries no GT section."""
    buf, _, _, n, flags, _ = _read(path)
    if not flags & FLAG_GT:
        raise StreamFileError(f"{path}: file has no ground-truth section")
    width_obs = 2 * N_JOINTS + N_JOINTS + N_NUISANCE
    width_gt = 6 * N_JOINTS + N_BONES + 3
    off = _HEADER.size + 8 * n * width_obs
    gt = np.frombuffer(buf, "<f8", n * width_gt, off).reshape(n, width_gt).astype(np.float64)
    return GroundTruth(gt[:, :6 * N_JOINTS].reshape(n, N_JOINTS, 6), gt[0, 6 * N_JOINTS:6 * N_JOINTS + N_BONES].copy(),
                       gt[:, -3:].copy())


def with_shift(shift: DomainShift, **changes) -> DomainShift:
    return replace(shift, **changes)


def batch_filename(person_id: int, index: int) -> str:
    return f"p{person_id:05d}_b{index:05d}.mtsb"


def list_batches(directory) -> dict[int, list[Path]]:
    """Batch files of a stream directory grouped by person, in batch order."""
    out: dict[int, list[tuple[int, Path]]] = {}
    for path in sorted(Path(directory).glob("*.mtsb")):
        with open(path, "rb") as fh:
            _, _, pid, idx, _, _ = _HEADER.unpack(fh.read(_HEADER.size))
        out.setdefault(pid, []).append((idx, path))
    return {pid: [p for _, p in sorted(items)] for pid, items in sorted(out.items())}


# -- prediction files ---------------------------------------------------------

PRED_MAGIC = b"MTPR"
PRED_VERSION = 1
_PRED_HEADER = struct.Struct("<4sII")
_PRED_RECORD = struct.Struct("<III")


def write_predictions(path, records) -> None:
    """``records``: iterable of (person_id, batch_idx, theta (n,22,6), beta (n,21), psi (n,3))."""
    records = list(records)
    parts = [_PRED_HEADER.pack(PRED_MAGIC, PRED_VERSION, len(records))]
    for pid, idx, theta, beta, psi in records:
        n = len(theta)
        parts.append(_PRED_RECORD.pack(pid, idx, n))
        body = np.concatenate([np.reshape(theta, (n, -1)), np.reshape(beta, (n, N_BONES)), np.reshape(psi, (n, 3))],
                              axis=1)
        parts.append(np.ascontiguousarray(body, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_predictions(path) -> list[tuple]:
    buf = Path(path).read_bytes()
    magic, version, count = _PRED_HEADER.unpack_from(buf, 0)
    if magic != PRED_MAGIC or version != PRED_VERSION:
        raise StreamFileError(f"{path}: not a predictions file")
    width = 6 * N_JOINTS + N_BONES + 3
    off = _PRED_HEADER.size
    out = []
    for _ in range(count):
        pid, idx, n = _PRED_RECORD.unpack_from(buf, off)
        off += _PRED_RECORD.size
        body = np.frombuffer(buf, "<f8", n * width, off).reshape(n, width).astype(np.float64)
        off += 8 * n * width
        out.append((pid, idx, body[:, :6 * N_JOINTS].reshape(n, N_JOINTS, 6),
                    body[:, 6 * N_JOINTS:6 * N_JOINTS + N_BONES].copy(), body[:, -3:].copy()))
    return out
