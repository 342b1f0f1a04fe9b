"""Source-domain pre-training of the pose estimator F and the motion denoiser M with its codebook."""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass

import numpy as np

from .autodiff import Graph, GraphError
from .codebook import ResidualCodebook
from .config import PretrainConfig
from .kinematics import N_BONES, Camera, Skeleton, forward_kinematics, mpjpe
from .losses import l1, reprojection_loss, smooth_l1_loss
from .motion_repr import WINDOW, augment_arrays, mirror_pose, to_phi_arrays
from .networks import Adam, MotionDenoiser, PoseEstimator, cosine_lr, observation_features
from .stream import STREAM_FPS, SOURCE_SHIFT, MotionGenerator, Observations, observe, random_profile


class DivergenceError(RuntimeError):
    pass


@dataclass
class Sequence:
    theta: np.ndarray  # (n, 22, 6) at 30 fps
    beta: np.ndarray   # (21,)
    psi: np.ndarray    # (n, 3)


@dataclass
class SourceCorpus:
    sequences: list     # ground-truth Sequence per profile (and mirror)
    theta: np.ndarray   # flattened frames for F
    beta: np.ndarray
    psi: np.ndarray
    obs: Observations
    features: np.ndarray


def source_sequences(cfg: PretrainConfig, rng: np.random.Generator, n_profiles: int | None = None,
                     minutes: float | None = None) -> list[Sequence]:
    n_profiles = cfg.n_source_profiles if n_profiles is None else n_profiles
    n_frames = int(round((cfg.source_minutes if minutes is None else minutes) * 60 * STREAM_FPS))
    seqs = []
    for pid in range(n_profiles):
        profile = random_profile(pid, rng)
        theta, beta, psi = MotionGenerator(profile, rng).frames(0, n_frames, STREAM_FPS)
        seqs.append(Sequence(theta, beta, psi))
        if cfg.mirror:
            seqs.append(Sequence(*mirror_pose(theta, beta, psi)))
    return seqs


def build_corpus(seqs: list[Sequence], rng: np.random.Generator, cam: Camera, skel: Skeleton) -> SourceCorpus:
    obs = [observe(s.theta, s.beta, s.psi, cam, SOURCE_SHIFT, rng, skel) for s in seqs]
    theta = np.concatenate([s.theta for s in seqs])
    beta = np.concatenate([np.broadcast_to(s.beta, (len(s.theta), N_BONES)) for s in seqs])
    psi = np.concatenate([s.psi for s in seqs])
    o = Observations(np.concatenate([x.keypoints for x in obs]), np.concatenate([x.confidence for x in obs]),
                     np.concatenate([x.nuisance for x in obs]))
    feats = observation_features(o.keypoints, o.confidence, o.nuisance, cam)
    return SourceCorpus(seqs, theta, beta, psi, o, feats)


def f_loss(g: Graph, model: PoseEstimator, feats, theta, beta, psi, obs: Observations,
           cam: Camera, skel: Skeleton, lambda_2d: float):
    out = model.forward(g, feats)
    loss = l1(g, out.theta, theta) + l1(g, out.beta, beta) + l1(g, out.psi, psi)
    if lambda_2d:
        loss = loss + lambda_2d * reprojection_loss(g, skel, cam, out.theta, out.beta, out.psi,
                                                    obs.keypoints, obs.confidence)
    return loss


def evaluate_f(model: PoseEstimator, feats, theta, beta, psi, skel: Skeleton) -> float:
    """Mean root-aligned MPJPE (mm) of F's predictions against ground truth."""
    pt, pb, pp = model.predict(feats)
    pred = forward_kinematics(skel, pt, pb, pp)
    gt = forward_kinematics(skel, theta, beta, psi)
    return float(np.mean(mpjpe(pred, gt)))


def _check(loss, what: str, step: int) -> float:
    value = float(loss.value)
    if not np.isfinite(value):
        raise DivergenceError(f"{what} diverged at step {step}: loss {value}")
    return value


def _monotone_warning(curve: list[float], log_every: int, what: str) -> None:
    w = max(1, 500 // log_every)
    if len(curve) < 2 * w:
        return
    ma = np.convolve(curve, np.ones(w) / w, mode="valid")[::w]
    if np.any(np.diff(ma) > 1e-3 * abs(ma[0])):
        warnings.warn(f"{what}: 500-step moving-average loss is not monotone", RuntimeWarning, stacklevel=2)


def pretrain_f(cfg: PretrainConfig, rng: np.random.Generator, corpus: SourceCorpus,
               holdout: SourceCorpus | None = None, cam: Camera | None = None,
               skel: Skeleton | None = None):
    """Supervised training of F on source observations; returns (model, report)."""
    cam = cam or Camera()
    skel = skel or Skeleton()
    model = PoseEstimator(cfg.f_hidden, rng)
    opt = Adam(model.params.data.size)
    n = len(corpus.theta)
    curve, acc = [], []
    t0 = time.perf_counter()
    for step in range(cfg.f_steps):
        idx = rng.integers(0, n, cfg.f_batch)
        g = Graph()
        model.params.zero_grad()
        try:
            loss = f_loss(g, model, corpus.features[idx], corpus.theta[idx], corpus.beta[idx],
                          corpus.psi[idx], corpus.obs.take(idx), cam, skel, cfg.f_lambda_2d)
            acc.append(_check(loss, "pretrain_f", step))
            g.backward(loss)
        except GraphError as e:
            raise DivergenceError(f"pretrain_f diverged at step {step}: {e}") from e
        opt.step(model.params, cosine_lr(step, cfg.f_steps, cfg.f_lr, cfg.f_lr_min))
        if len(acc) == cfg.log_every or step == cfg.f_steps - 1:
            curve.append(float(np.mean(acc)))
            acc = []
    _monotone_warning(curve, cfg.log_every, "pretrain_f")
    report = {"loss_curve": curve, "seconds": time.perf_counter() - t0,
              "train_mpjpe_mm": evaluate_f(model, corpus.features[:4000], corpus.theta[:4000],
                                           corpus.beta[:4000], corpus.psi[:4000], skel)}
    if holdout is not None:
        report["source_mpjpe_mm"] = evaluate_f(model, holdout.features, holdout.theta, holdout.beta,
                                               holdout.psi, skel)
    return model, report


class WindowSampler:
    """Random 16-frame windows at 15 fps drawn from ground-truth sequences, as phi arrays."""

    def __init__(self, seqs: list[Sequence], skel: Skeleton):
        self.phis = []
        for s in seqs:
            for offset in (0, 1):
                theta, psi = s.theta[offset::2], s.psi[offset::2]
                if len(theta) >= WINDOW:
                    self.phis.append(to_phi_arrays(theta, s.beta, psi, skel))
        if not self.phis:
            raise ValueError("no sequence is long enough for a window")
        self.lengths = np.array([len(p) - WINDOW + 1 for p in self.phis])
        self.cum = np.cumsum(self.lengths)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        flat = rng.integers(0, self.cum[-1], n)
        seq = np.searchsorted(self.cum, flat, side="right")
        start = flat - np.concatenate([[0], self.cum[:-1]])[seq]
        out = np.stack([self.phis[s][a:a + WINDOW] for s, a in zip(seq, start)])
        out[:, 0, 1] = 0.0  # yaw change is relative to the window's own first frame
        return out


def denoising_errors(model: MotionDenoiser, phi, rng: np.random.Generator, noise_sigma: float,
                     mask_prob: float):
    """(reconstruction error, input error): mean |D(E(aug)) - clean| and mean |aug - clean|."""
    aug, _ = augment_arrays(phi, rng, noise_sigma, mask_prob)
    recon = model.decode_np(model.encode_np(aug))
    return float(np.mean(np.abs(recon - phi))), float(np.mean(np.abs(aug - phi)))


def pretrain_m(cfg: PretrainConfig, rng: np.random.Generator, seqs: list[Sequence],
               holdout: list[Sequence] | None = None, skel: Skeleton | None = None):
    """Denoising autoencoder training with simultaneous EMA clustering of its latents.

    Returns (model, codebook, report).
    """
    skel = skel or Skeleton()
    sampler = WindowSampler(seqs, skel)
    model = MotionDenoiser(cfg.latent_dim, cfg.width, rng)
    cb = ResidualCodebook.zeros(cfg.depth, cfg.n_codes, cfg.latent_dim)
    opt = Adam(model.params.data.size, betas=cfg.m_betas, weight_decay=cfg.m_weight_decay)
    curve, acc, util_curve = [], [], []
    pools: list[list[np.ndarray]] = [[] for _ in range(cfg.depth)]
    revived = 0
    t0 = time.perf_counter()
    for step in range(cfg.m_steps):
        clean = sampler.sample(rng, cfg.m_batch)
        aug, _ = augment_arrays(clean, rng, cfg.noise_sigma, cfg.mask_prob)
        g = Graph()
        model.params.zero_grad()
        try:
            w = model.params.bind(g)
            z = model.encode(g, aug, w)
            loss = smooth_l1_loss(g, model.decode(g, z, w), clean)
            acc.append(_check(loss, "pretrain_m", step))
            g.backward(loss)
        except GraphError as e:
            raise DivergenceError(f"pretrain_m diverged at step {step}: {e}") from e
        opt.step(model.params, cosine_lr(step, cfg.m_steps, cfg.m_lr, cfg.m_lr_min))

        # clustering sees detached latents only
        latents = z.value.reshape(-1, cfg.latent_dim)
        if step == 0:
            cb.seed_kmeanspp(latents, rng)
        q = cb.update_from_latents(latents, cfg.mu_pt)
        for i in range(cfg.depth):
            pools[i] = (pools[i] + [q.layer_inputs[:, i]])[-10:]
        if cfg.revive_every and (step + 1) % cfg.revive_every == 0 and step + 1 < cfg.m_steps:
            revived += cb.revive_dead_codes([np.concatenate(p) for p in pools], cfg.usage_floor, rng)
        if len(acc) == cfg.log_every or step == cfg.m_steps - 1:
            curve.append(float(np.mean(acc)))
            util_curve.append(cb.utilization(cfg.usage_floor))
            acc = []
    _monotone_warning(curve, cfg.log_every, "pretrain_m")
    report = {"loss_curve": curve, "utilization_curve": util_curve, "seconds": time.perf_counter() - t0,
              "utilization": cb.utilization(cfg.usage_floor), "revived_codes": revived}
    eval_seqs = holdout if holdout else seqs
    phi = WindowSampler(eval_seqs, skel).sample(rng, 256)
    recon, inp = denoising_errors(model, phi, rng, cfg.noise_sigma, cfg.mask_prob)
    report.update(recon_error=recon, input_error=inp, denoising_gain=inp - recon)
    return model, cb, report


@dataclass
class PretrainResult:
    f: PoseEstimator
    m: MotionDenoiser
    codebook: ResidualCodebook
    report: dict


def pretrain(cfg: PretrainConfig, rng: np.random.Generator, cam: Camera | None = None,
             skel: Skeleton | None = None) -> PretrainResult:
    cfg.validate()
    cam = cam or Camera()
    skel = skel or Skeleton()
    seqs = source_sequences(cfg, rng)
    held = source_sequences(cfg, rng, n_profiles=2, minutes=0.5)
    corpus = build_corpus(seqs, rng, cam, skel)
    holdout = build_corpus(held, rng, cam, skel)
    f, f_report = pretrain_f(cfg, rng, corpus, holdout, cam, skel)
    m, cb, m_report = pretrain_m(cfg, rng, seqs, held, skel)
    return PretrainResult(f, m, cb, {"f": f_report, "m": m_report})
