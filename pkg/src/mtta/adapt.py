"""Online test-time adaptation of F and M on streams of unlabeled batches.

Each batch runs ``cycles`` rounds of (F updates over minibatches, one M
update).  F is supervised by the denoised motion theta', the codebook anchor
motion theta*, the batch-mean shape beta' and the detected 2D keypoints.  M
is trained on the current estimates and on replayed motions decoded from
random codes of the frozen codebook.  After the batch F is blended back
toward its batch-start weights.

Several persons are adapted in lockstep: every model carries a leading
member axis and member ``e`` only ever sees person ``e``'s data.  Functions
here receive ``Observations`` only; ground truth stays with the caller.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Graph, GraphError
from .codebook import ResidualCodebook, drift_metric, sample_latents
from .config import AdaptConfig
from .kinematics import N_BONES, N_JOINTS, Camera, Skeleton, forward_kinematics, mpjpe, mpjpe_pa
from .losses import member_l1, member_reprojection, member_smooth_l1
from .motion_repr import PHI_DIM, WINDOW, augment_arrays, from_phi_arrays, pelvis_yaw, to_phi_arrays
from .networks import Adam, MotionDenoiser, PoseEstimator, WeightSnapshot, cosine_lr, ema_blend, observation_features
from .stream import BATCH_FRAMES, Observations


class BatchAborted(RuntimeError):
    pass


@dataclass
class WindowMap:
    sampled: np.ndarray   # (80,) original frame of each window slot, row-major over (window, position)
    nearest: np.ndarray   # (160,) window slot supervising each original frame

    @property
    def n_windows(self) -> int:
        return len(self.sampled) // WINDOW


def windows_from_batch(n_frames: int = BATCH_FRAMES) -> WindowMap:
    """Subsample 30 fps -> 15 fps and cut into 16-frame windows; odd frames use the preceding even frame."""
    if n_frames != BATCH_FRAMES:
        raise ValueError(f"batches must hold {BATCH_FRAMES} frames, got {n_frames}")
    return WindowMap(np.arange(0, n_frames, 2), np.arange(n_frames) // 2)


@dataclass
class Pretrained:
    f: PoseEstimator
    m: MotionDenoiser
    codebook: ResidualCodebook


@dataclass
class StackedObservations:
    keypoints: np.ndarray   # (E, n, 22, 2)
    confidence: np.ndarray  # (E, n, 22)
    nuisance: np.ndarray    # (E, n, 8)

    @classmethod
    def stack(cls, obs: list[Observations]) -> "StackedObservations":
        return cls(np.stack([o.keypoints for o in obs]), np.stack([o.confidence for o in obs]),
                   np.stack([o.nuisance for o in obs]))

    @property
    def n_frames(self) -> int:
        return self.keypoints.shape[1]


@dataclass
class Targets:
    theta_prime: np.ndarray          # (E, 160, 22, 6)
    theta_star: np.ndarray | None    # (E, 160, 22, 6); None without a codebook
    beta_prime: np.ndarray           # (E, 21)


@dataclass
class AdaptState:
    f: PoseEstimator                 # live estimators, one member per person
    m: MotionDenoiser                # live denoisers
    codebooks: list | None           # live codebooks (first k layers), one per person
    f_frozen: WeightSnapshot         # pre-trained F, replicated
    d_frozen: MotionDenoiser         # pre-trained M (single), used for replay
    cb_frozen: ResidualCodebook | None
    probes: np.ndarray               # fixed latents for the drift metric
    probe_frozen: np.ndarray         # their frozen decodings
    f_pre: WeightSnapshot | None = None
    m_pre: WeightSnapshot | None = None
    cb_pre: list | None = None
    targets: Targets | None = None
    opt_f: Adam | None = None
    opt_m: Adam | None = None
    f_step_count: int = 0
    m_step_count: int = 0

    @classmethod
    def create(cls, pre: Pretrained, cfg: AdaptConfig, rng: np.random.Generator, n_members: int = 1):
        frozen_cb = pre.codebook.truncated(cfg.k) if cfg.k > 0 else None
        codebooks = [frozen_cb.copy() for _ in range(n_members)] if frozen_cb is not None else None
        probe_source = frozen_cb if frozen_cb is not None else pre.codebook.truncated(1)
        probes = sample_latents(probe_source, rng, cfg.drift_probes, pre.m.latent_len)
        f = pre.f.replicate(n_members)
        d_frozen = pre.m.replicate(1).member(0)
        return cls(f=f, m=pre.m.replicate(n_members), codebooks=codebooks, f_frozen=f.params.snapshot(),
                   d_frozen=d_frozen, cb_frozen=frozen_cb, probes=probes,
                   probe_frozen=d_frozen.decode_np(probes))

    @property
    def n_members(self) -> int:
        return self.f.ensemble

    def reload(self, pre: Pretrained, cfg: AdaptConfig) -> None:
        """Return every member to the pre-trained weights."""
        self.f.params.members()[:] = pre.f.params.data
        self.m.params.members()[:] = pre.m.params.data
        if self.codebooks is not None:
            self.codebooks = [self.cb_frozen.copy() for _ in range(self.n_members)]

    def drift(self) -> np.ndarray:
        """Per-member drift of the live decoder away from the frozen one on the probe latents."""
        live = self.m.decode_np(np.broadcast_to(self.probes, (self.n_members,) + self.probes.shape))
        return np.array([drift_metric(lambda _: live[e], lambda _: self.probe_frozen, self.probes)
                         for e in range(self.n_members)])


# -- F update ---------------------------------------------------------------------

def f_objective(g: Graph, f: PoseEstimator, feats, obs: StackedObservations, theta_prime, theta_star,
                beta_prime, cfg: AdaptConfig, cam: Camera, skel: Skeleton):
    """Per-member L_F = L_p + l1 * L_s + l2 * L_2D + l3 * L_ach; returns (sum over members, parts)."""
    out = f.forward(g, feats)
    parts = {}
    per = g.constant(np.zeros(len(feats)))
    if cfg.use_pose_loss:
        parts["L_p"] = member_l1(g, out.theta, theta_prime)
        per = per + parts["L_p"]
    parts["L_s"] = member_l1(g, out.beta, np.broadcast_to(beta_prime[:, None], out.beta.shape))
    parts["L_2D"] = member_reprojection(g, skel, cam, out.theta, out.beta, out.psi, obs.keypoints, obs.confidence)
    per = per + cfg.lambda_s * parts["L_s"] + cfg.lambda_2d * parts["L_2D"]
    if cfg.anchor_active and theta_star is not None:
        parts["L_ach"] = member_l1(g, out.theta, theta_star)
        per = per + cfg.lambda_ach * parts["L_ach"]
    parts["L_F"] = per
    return g.sum(per), parts


def _take(obs: StackedObservations, idx) -> StackedObservations:
    return StackedObservations(obs.keypoints[:, idx], obs.confidence[:, idx], obs.nuisance[:, idx])


def adapt_f_step(state: AdaptState, feats, obs: StackedObservations, idx, cfg: AdaptConfig, lr: float,
                 cam: Camera, skel: Skeleton) -> dict:
    """One Adam step on F using frames ``idx`` of the batch; returns per-member losses."""
    t = state.targets
    star = t.theta_star[:, idx] if t.theta_star is not None else None
    g = Graph()
    state.f.params.zero_grad()
    try:
        total, parts = f_objective(g, state.f, feats[:, idx], _take(obs, idx), t.theta_prime[:, idx], star,
                                   t.beta_prime, cfg, cam, skel)
        if not np.isfinite(total.value):
            raise BatchAborted("non-finite L_F")
        g.backward(total)
    except GraphError as e:
        raise BatchAborted(f"F step: {e}") from e
    state.opt_f.step(state.f.params, lr)
    state.f_step_count += 1
    return {k: v.value.copy() for k, v in parts.items()}


# -- M update ---------------------------------------------------------------------

def prepare_replay(state: AdaptState, cfg: AdaptConfig, rng: np.random.Generator) -> np.ndarray | None:
    """Decode random frozen-codebook codes with the frozen decoder: (E, R, 16, 197)."""
    if not cfg.replay_active:
        return None
    n = state.n_members * cfg.replay_minibatch
    z = sample_latents(state.cb_frozen, rng, n, state.d_frozen.latent_len)
    return state.d_frozen.decode_np(z).reshape(state.n_members, cfg.replay_minibatch, WINDOW, PHI_DIM)


def estimate_phi(f: PoseEstimator, feats, wm: WindowMap, skel: Skeleton):
    """Current F estimates as phi windows.

    Returns (phi (E, W, 16, 197), beta' (E, 21), first-frame pelvis yaw (E, W)).
    """
    theta, beta, psi = f.predict(feats)
    n_e = len(theta)
    beta_prime = beta.mean(axis=1)
    th = theta[:, wm.sampled].reshape(n_e, wm.n_windows, WINDOW, N_JOINTS, 6)
    ps = psi[:, wm.sampled].reshape(n_e, wm.n_windows, WINDOW, 3)
    phi = to_phi_arrays(th, np.broadcast_to(beta_prime[:, None], (n_e, wm.n_windows, N_BONES)), ps, skel)
    return phi, beta_prime, pelvis_yaw(th[:, :, 0])


def refresh_targets(state: AdaptState, phi, beta_prime, yaw0, wm: WindowMap, z=None) -> Targets:
    """theta' = D(E(phi)) and theta* = D(sum of quantized codes), spread back to all frames."""
    if z is None:
        z = state.m.encode_np(phi)
    n_e, n_w = z.shape[:2]
    if state.codebooks is not None:
        anchors = np.stack([cb.quantize(z[e].reshape(-1, z.shape[-1])).c_sum.reshape(z.shape[1:])
                            for e, cb in enumerate(state.codebooks)])
        decoded = state.m.decode_np(np.concatenate([z, anchors], axis=1))
        yaw = np.concatenate([yaw0, yaw0], axis=1)
    else:
        decoded, yaw = state.m.decode_np(z), yaw0
    decoded[..., 0, 1] = 0.0  # first-frame yaw comes from the estimate itself
    theta = from_phi_arrays(decoded, yaw)  # (E, 2W or W, 16, 22, 6)

    def to_frames(th):
        return th.reshape(n_e, -1, N_JOINTS, 6)[:, wm.nearest]

    theta_star = to_frames(theta[:, n_w:]) if state.codebooks is not None else None
    return Targets(to_frames(theta[:, :n_w]), theta_star, beta_prime)


def m_weights(n_replay: int, n_test: int) -> np.ndarray:
    """Per-member weights turning the weighted sum into mean(replay term) + mean(test term)."""
    per = WINDOW * PHI_DIM
    w = np.empty((n_replay + n_test, 1, 1))
    w[:n_replay] = 1.0 / (n_replay * per) if n_replay else 0.0
    w[n_replay:] = 1.0 / (n_test * per)
    return w


def m_objective(g: Graph, m: MotionDenoiser, aug, clean, weight):
    """Per-member smooth-L1 reconstruction loss; returns (sum over members, per-member Var)."""
    w = m.params.bind(g)
    per = member_smooth_l1(g, m.decode(g, m.encode(g, aug, w), w), clean, weight)
    return g.sum(per), per


def adapt_m_step(state: AdaptState, feats, wm: WindowMap, replay, cfg: AdaptConfig, rng: np.random.Generator,
                 lr: float, skel: Skeleton) -> dict:
    """One Adam step on (E, D), codebook sync, then refresh theta', theta*, beta' for the next cycle."""
    phi, beta_prime, yaw0 = estimate_phi(state.f, feats, wm, skel)
    clean = phi if replay is None else np.concatenate([replay, phi], axis=1)
    aug, _ = augment_arrays(clean, rng, cfg.noise_sigma, cfg.mask_prob)
    n_rep = 0 if replay is None else replay.shape[1]
    g = Graph()
    state.m.params.zero_grad()
    try:
        loss, per = m_objective(g, state.m, aug, clean, m_weights(n_rep, phi.shape[1]))
        if not np.isfinite(loss.value):
            raise BatchAborted("non-finite L_M")
        g.backward(loss)
    except GraphError as e:
        raise BatchAborted(f"M step: {e}") from e
    state.opt_m.step(state.m.params, lr)
    state.m_step_count += 1
    latents = state.m.encode_np(clean)
    z_bar, z = latents[:, :n_rep], latents[:, n_rep:]
    if state.codebooks is not None:
        d = latents.shape[-1]
        for e, cb in enumerate(state.codebooks):
            if replay is not None:
                cb.update_from_latents(z_bar[e].reshape(-1, d), cfg.mu_c)
            if cfg.sync_test_latents:
                cb.update_from_latents(z[e].reshape(-1, d), cfg.mu_c)
    state.targets = refresh_targets(state, phi, beta_prime, yaw0, wm, z)
    return {"L_M": per.value.copy()}


# -- batch loop -------------------------------------------------------------------

@dataclass
class BatchResult:
    theta: np.ndarray   # (E, 160, 22, 6)
    beta: np.ndarray    # (E, 160, 21)
    psi: np.ndarray     # (E, 160, 3)
    telemetry: dict = field(default_factory=dict)


def adapt_batch(state: AdaptState, obs: StackedObservations, cfg: AdaptConfig, rng: np.random.Generator,
                cam: Camera | None = None, skel: Skeleton | None = None) -> BatchResult:
    """Adapt on one batch per member, then predict it with the adapted F."""
    cam = cam or Camera()
    skel = skel or Skeleton()
    t0 = time.perf_counter()
    if len(obs.keypoints) != state.n_members:
        raise ValueError(f"expected {state.n_members} members, got {len(obs.keypoints)}")
    wm = windows_from_batch(obs.n_frames)
    feats = observation_features(obs.keypoints, obs.confidence, obs.nuisance, cam)
    state.f_pre = state.f.params.snapshot()
    state.m_pre = state.m.params.snapshot()
    state.cb_pre = [cb.copy() for cb in state.codebooks] if state.codebooks is not None else None
    state.opt_f = Adam(state.f.params.data.size)
    state.opt_m = Adam(state.m.params.data.size)
    n_mb = math.ceil(obs.n_frames / cfg.minibatch)
    total_f = cfg.cycles * n_mb
    tel = {"f_losses": [], "m_losses": [], "cycles": 0, "f_steps": 0, "m_steps": 0, "aborted": ""}
    try:
        replay = prepare_replay(state, cfg, rng)
        phi, beta_prime, yaw0 = estimate_phi(state.f, feats, wm, skel)
        state.targets = refresh_targets(state, phi, beta_prime, yaw0, wm)
        step = 0
        for cycle in range(cfg.cycles):
            order = rng.permutation(obs.n_frames)
            for i in range(n_mb):
                idx = order[i * cfg.minibatch:(i + 1) * cfg.minibatch]
                lr = cosine_lr(step, total_f, cfg.lr, cfg.lr_min)
                tel["f_losses"].append(adapt_f_step(state, feats, obs, idx, cfg, lr, cam, skel))
                step += 1
            lr = cosine_lr(cycle, cfg.cycles, cfg.lr, cfg.lr_min)
            tel["m_losses"].append(adapt_m_step(state, feats, wm, replay, cfg, rng, lr, skel))
            tel["cycles"] += 1
    except (BatchAborted, GraphError) as e:
        state.f.params.load(state.f_pre)
        state.m.params.load(state.m_pre)
        state.codebooks = state.cb_pre
        tel["aborted"] = str(e)
    tel["f_steps"], tel["m_steps"] = len(tel["f_losses"]), len(tel["m_losses"])
    try:
        theta, beta, psi = state.f.predict(feats)
    except GraphError as e:
        n = (state.n_members, obs.n_frames)
        theta, beta, psi = np.full(n + (N_JOINTS, 6), np.nan), np.full(n + (N_BONES,), np.nan), np.full(n + (3,), np.nan)
        tel["aborted"] = tel["aborted"] or f"prediction: {e}"
    # an aborted batch already restored the batch-start weights
    if cfg.use_soft_reset and not tel["aborted"]:
        state.f.params.load(ema_blend(state.f_pre, state.f.params.snapshot(), cfg.mu_f))
    if cfg.mu_m is not None and not tel["aborted"]:
        state.m.params.load(ema_blend(state.m_pre, state.m.params.snapshot(), cfg.mu_m))
    nan = np.full(state.n_members, np.nan)
    last = tel["f_losses"][-n_mb:]
    tel["L_F"] = np.mean([r["L_F"] for r in last], axis=0) if last else nan
    tel["L_ach"] = np.mean([r.get("L_ach", np.zeros(state.n_members)) for r in last], axis=0) if last else nan
    tel["L_M"] = tel["m_losses"][-1]["L_M"] if tel["m_losses"] else nan
    tel["drift"] = state.drift()
    tel["codebook_util"] = (np.array([cb.utilization(cfg.usage_floor) for cb in state.codebooks])
                            if state.codebooks is not None else np.zeros(state.n_members))
    tel["wall_ms"] = (time.perf_counter() - t0) * 1000.0 if cfg.record_timing else 0.0
    return BatchResult(theta, beta, psi, tel)


# -- streams ----------------------------------------------------------------------

TELEMETRY_COLUMNS = ("person_id", "batch_idx", "mpjpe_mm", "mpjpe_pa_mm", "L_F", "L_M", "L_ach",
                     "drift", "codebook_util", "wall_ms")


def score(theta, beta, psi, gt, skel: Skeleton):
    """(MPJPE, MPJPE-PA) in mm averaged over one person's batch."""
    pred = forward_kinematics(skel, theta, beta, psi)
    ref = gt.joints(skel)
    return float(np.mean(mpjpe(pred, ref))), float(np.mean(mpjpe_pa(pred, ref)))


def adapt_streams(pre: Pretrained, streams, cfg: AdaptConfig, rng: np.random.Generator,
                  cam: Camera | None = None, skel: Skeleton | None = None, on_result=None) -> list[dict]:
    """Adapt through several persons' batch iterators in lockstep (one member each).

    Rows carry MPJPE / MPJPE-PA when a batch has ground truth.  All streams
    must yield the same number of batches.
    """
    cfg.validate()
    cam = cam or Camera()
    skel = skel or Skeleton()
    state = AdaptState.create(pre, cfg, rng, len(streams))
    rows = []
    for batches in zip(*streams, strict=True):
        if not cfg.continuous:
            state.reload(pre, cfg)
        result = adapt_batch(state, StackedObservations.stack([b.obs for b in batches]), cfg, rng, cam, skel)
        tel = result.telemetry
        per_member_ms = tel["wall_ms"] / len(batches)
        for e, batch in enumerate(batches):
            err = score(result.theta[e], result.beta[e], result.psi[e], batch.gt, skel) \
                if batch.gt is not None else (float("nan"), float("nan"))
            rows.append({"person_id": batch.person_id, "batch_idx": batch.index, "mpjpe_mm": err[0],
                         "mpjpe_pa_mm": err[1], "L_F": float(tel["L_F"][e]), "L_M": float(tel["L_M"][e]),
                         "L_ach": float(tel["L_ach"][e]), "drift": float(tel["drift"][e]),
                         "codebook_util": float(tel["codebook_util"][e]), "wall_ms": per_member_ms})
        if on_result is not None:
            on_result(batches, result)
    rows.sort(key=lambda r: (r["person_id"], r["batch_idx"]))
    return rows


def run_stream(pre: Pretrained, profiles, shift, cfg: AdaptConfig, seed: int, minutes: float,
               cam: Camera | None = None, skel: Skeleton | None = None) -> list[dict]:
    """Generate each person's stream and adapt on all of them; returns telemetry rows.

    A person's observations depend only on (seed, person id), never on the
    adaptation config, so every config sees identical data.
    """
    from .stream import stream_person
    streams = [stream_person(p, shift, minutes, np.random.default_rng([seed, p.person_id, 0]), cam, skel)
               for p in profiles]
    return adapt_streams(pre, streams, cfg, np.random.default_rng([seed, 1]), cam, skel)
