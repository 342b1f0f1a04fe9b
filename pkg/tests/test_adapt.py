import dataclasses

import numpy as np
import pytest

import mtta.adapt as adapt_mod
from mtta.adapt import (
    AdaptState,
    StackedObservations,
    Targets,
    adapt_batch,
    adapt_f_step,
    adapt_m_step,
    adapt_streams,
    estimate_phi,
    f_objective,
    m_weights,
    prepare_replay,
    refresh_targets,
    run_stream,
    windows_from_batch,
)
from mtta.autodiff import Graph
from mtta.config import AdaptConfig, ConfigError
from mtta.kinematics import Camera, Skeleton, forward_kinematics, project_2d
from mtta.networks import ema_blend, observation_features, weight_hash
from mtta.stream import (
    batch_filename,
    list_batches,
    preset,
    random_profile,
    read_observations,
    stream_person,
    write_batch,
)

CAM, SKEL = Camera(), Skeleton()
FAST = dict(cycles=2)


def profiles(n=2):
    return [random_profile(100 + i, np.random.default_rng(100 + i)) for i in range(n)]


def batches(n_batches=2, n_persons=2, seed=0):
    streams = [list(stream_person(p, preset("standard"), n_batches * 160 / 1800 + 1e-9,
                                  np.random.default_rng([seed, p.person_id])))
               for p in profiles(n_persons)]
    return [StackedObservations.stack([s[b].obs for s in streams]) for b in range(n_batches)]


def new_state(pre, cfg, seed=0, n=2):
    return AdaptState.create(pre, cfg, np.random.default_rng(seed), n)


def prepared(pre, cfg, obs):
    """State with batch-start bookkeeping and bootstrapped targets, as adapt_batch sets it up."""
    st = new_state(pre, cfg)
    rng = np.random.default_rng(1)
    wm = windows_from_batch(obs.n_frames)
    feats = observation_features(obs.keypoints, obs.confidence, obs.nuisance, CAM)
    st.f_pre, st.m_pre = st.f.params.snapshot(), st.m.params.snapshot()
    from mtta.networks import Adam
    st.opt_f, st.opt_m = Adam(st.f.params.data.size), Adam(st.m.params.data.size)
    phi, beta_prime, yaw0 = estimate_phi(st.f, feats, wm, SKEL)
    st.targets = refresh_targets(st, phi, beta_prime, yaw0, wm)
    return st, feats, wm, rng


def cb_hash(st):
    return [cb.layers.tobytes() + cb.usage.tobytes() for cb in st.codebooks]


def test_windows_from_batch():
    wm = windows_from_batch(160)
    assert wm.n_windows == 5 and len(wm.sampled) == 80
    assert wm.sampled[0] == 0 and wm.nearest[0] == 0
    assert set(wm.nearest) == set(range(80))
    assert np.all(np.abs(wm.sampled[wm.nearest] - np.arange(160)) <= 1)
    with pytest.raises(ValueError):
        windows_from_batch(100)


def test_config_validation():
    for bad in (dict(cycles=0), dict(lambda_ach=-1.0), dict(mu_f=1.5), dict(mu_c=-0.1), dict(k=-1),
                dict(mu_m=2.0), dict(minibatch=0)):
        with pytest.raises(ConfigError):
            AdaptConfig(**bad).validate()


def test_f_step_leaves_m_and_codebook_untouched(tiny_pre):
    obs = batches(1)[0]
    st, feats, wm, rng = prepared(tiny_pre, AdaptConfig(), obs)
    m_before, cbs, f_before = weight_hash(st.m.params), cb_hash(st), weight_hash(st.f.params)
    adapt_f_step(st, feats, obs, np.arange(32), AdaptConfig(), 5e-5, CAM, SKEL)
    assert weight_hash(st.m.params) == m_before and cb_hash(st) == cbs
    assert weight_hash(st.f.params) != f_before


def test_m_step_leaves_f_untouched(tiny_pre):
    obs = batches(1)[0]
    cfg = AdaptConfig()
    st, feats, wm, rng = prepared(tiny_pre, cfg, obs)
    f_before, m_before = weight_hash(st.f.params), weight_hash(st.m.params)
    adapt_m_step(st, feats, wm, prepare_replay(st, cfg, rng), cfg, rng, 5e-5, SKEL)
    assert weight_hash(st.f.params) == f_before
    assert weight_hash(st.m.params) != m_before


def test_frozen_copies_never_change(tiny_pre):
    cfg = AdaptConfig(**FAST)
    st = new_state(tiny_pre, cfg)
    frozen = (st.f_frozen.data.tobytes(), weight_hash(st.d_frozen.params), st.cb_frozen.layers.tobytes(),
              st.cb_frozen.usage.tobytes())
    pre_hashes = (weight_hash(tiny_pre.f.params), weight_hash(tiny_pre.m.params))
    rng = np.random.default_rng(0)
    for obs in batches(2):
        adapt_batch(st, obs, cfg, rng)
    assert frozen == (st.f_frozen.data.tobytes(), weight_hash(st.d_frozen.params), st.cb_frozen.layers.tobytes(),
                      st.cb_frozen.usage.tobytes())
    assert pre_hashes == (weight_hash(tiny_pre.f.params), weight_hash(tiny_pre.m.params))
    assert st.f_step_count > 0


def _one_batch(pre, **overrides):
    cfg = AdaptConfig(**{**FAST, **overrides})
    st = new_state(pre, cfg)
    obs = batches(1)[0]
    start = st.f.params.snapshot()
    res = adapt_batch(st, obs, cfg, np.random.default_rng(3))
    return start, st.f.params.snapshot(), res


def test_soft_reset_endpoints_and_blend(tiny_pre):
    start, adapted, res_plain = _one_batch(tiny_pre, use_soft_reset=False)
    assert not np.array_equal(start.data, adapted.data)
    _, after_one, _ = _one_batch(tiny_pre, mu_f=1.0)
    assert np.array_equal(after_one.data, start.data)
    _, after_zero, _ = _one_batch(tiny_pre, mu_f=0.0)
    assert np.array_equal(after_zero.data, adapted.data)
    _, after_mid, res_mid = _one_batch(tiny_pre, mu_f=0.95)
    assert np.array_equal(after_mid.data, 0.95 * start.data + (1 - 0.95) * adapted.data)
    assert np.array_equal(after_mid.data, ema_blend(start, adapted, 0.95).data)
    # the batch itself is predicted with the adapted weights, before blending
    assert np.array_equal(res_mid.theta, res_plain.theta)


def test_default_schedule_runs_twelve_cycles(tiny_pre):
    cfg = AdaptConfig()
    st = new_state(tiny_pre, cfg)
    res = adapt_batch(st, batches(1)[0], cfg, np.random.default_rng(0))
    tel = res.telemetry
    assert tel["cycles"] == 12 and tel["m_steps"] == 12 and tel["f_steps"] == 12 * 5
    assert tel["aborted"] == ""
    assert res.theta.shape == (2, 160, 22, 6) and res.beta.shape == (2, 160, 21) and res.psi.shape == (2, 160, 3)


def test_adaptation_is_deterministic(tiny_pre):
    cfg = AdaptConfig(**FAST)
    out = []
    for _ in range(2):
        st = new_state(tiny_pre, cfg)
        rng = np.random.default_rng(7)
        out.append([adapt_batch(st, o, cfg, rng).theta for o in batches(2)])
    for a, b in zip(*out):
        assert np.array_equal(a, b)


def test_members_do_not_interact(tiny_pre):
    cfg = AdaptConfig(**FAST, use_self_replay=False, mask_prob=0.0, noise_sigma=0.0)
    obs = batches(1, n_persons=2)[0]
    st = new_state(tiny_pre, cfg)
    both = adapt_batch(st, obs, cfg, np.random.default_rng(0)).theta
    alt = dataclasses.replace(obs, keypoints=obs.keypoints.copy())
    alt.keypoints[1] += 5.0
    st = new_state(tiny_pre, cfg)
    changed = adapt_batch(st, alt, cfg, np.random.default_rng(0)).theta
    assert np.array_equal(both[0], changed[0]) and not np.array_equal(both[1], changed[1])


def test_anchor_is_a_constant_target(tiny_pre):
    obs = batches(1)[0]
    cfg = AdaptConfig()
    st, feats, wm, rng = prepared(tiny_pre, cfg, obs)
    t = st.targets
    assert not np.array_equal(t.theta_star, t.theta_prime)
    idx = np.arange(16)
    o = StackedObservations(obs.keypoints[:, idx], obs.confidence[:, idx], obs.nuisance[:, idx])

    def run(star):
        g = Graph()
        st.f.params.zero_grad()
        st.m.params.zero_grad()
        total, parts = f_objective(g, st.f, feats[:, idx], o, t.theta_prime[:, idx], star, t.beta_prime,
                                   cfg, CAM, SKEL)
        g.backward(total)
        return parts["L_ach"].value.copy(), st.m.params.grad.copy()
    base, m_grad = run(t.theta_star[:, idx])
    shifted, _ = run(t.theta_star[:, idx] + 1e-3)
    assert np.all(shifted != base)
    assert not np.any(m_grad)


def test_anchor_weight_zero_drops_the_term(tiny_pre):
    obs = batches(1)[0]
    cfg = AdaptConfig(lambda_ach=0.0)
    st, feats, wm, rng = prepared(tiny_pre, cfg, obs)
    t = st.targets
    g = Graph()
    _, parts = f_objective(g, st.f, feats, obs, t.theta_prime, t.theta_star, t.beta_prime, cfg, CAM, SKEL)
    assert "L_ach" not in parts
    expected = parts["L_p"].value + 0.001 * parts["L_s"].value + 0.1 * parts["L_2D"].value
    np.testing.assert_allclose(parts["L_F"].value, expected, rtol=1e-14)


def test_fixed_point_gives_zero_loss_and_gradient(tiny_pre):
    cfg = AdaptConfig()
    st = new_state(tiny_pre, cfg, n=1)
    for head in ("theta", "beta", "psi"):
        st.f.params[f"{head}.w"][:] = 0.0
    feats = np.random.default_rng(0).normal(size=(1, 8, 118))
    theta, beta, psi = st.f.predict(feats)
    uv, _ = project_2d(CAM, forward_kinematics(SKEL, theta, beta, psi))
    obs = StackedObservations(uv, np.ones((1, 8, 22)), np.zeros((1, 8, 8)))
    g = Graph()
    st.f.params.zero_grad()
    total, parts = f_objective(g, st.f, feats, obs, theta, theta, beta.mean(axis=1), cfg, CAM, SKEL)
    g.backward(total)
    assert total.value == 0.0
    assert not np.any(st.f.params.grad)


def test_replay_uses_frozen_decoder(tiny_pre):
    cfg = AdaptConfig()
    obs = batches(1)[0]
    st, feats, wm, rng = prepared(tiny_pre, cfg, obs)
    replay = prepare_replay(st, cfg, np.random.default_rng(4))
    assert replay.shape == (2, 4, 16, 197)
    adapt_m_step(st, feats, wm, replay, cfg, rng, 5e-5, SKEL)
    np.testing.assert_array_equal(prepare_replay(st, cfg, np.random.default_rng(4)), replay)
    assert prepare_replay(st, AdaptConfig(use_self_replay=False), rng) is None
    assert prepare_replay(st, AdaptConfig(k=0), rng) is None


def test_m_weights_average_each_term():
    w = m_weights(4, 5)
    per = 16 * 197
    assert w[:4].sum() * per == pytest.approx(1.0) and w[4:].sum() * per == pytest.approx(1.0)
    assert np.all(m_weights(0, 5)[0:] * per * 5 == pytest.approx(1.0))


def test_non_finite_batch_is_aborted_and_restored(tiny_pre):
    cfg = AdaptConfig(**FAST)
    st = new_state(tiny_pre, cfg)
    good, bad = batches(2)
    adapt_batch(st, good, cfg, np.random.default_rng(0))
    f_before, m_before, cbs = weight_hash(st.f.params), weight_hash(st.m.params), cb_hash(st)
    bad = dataclasses.replace(bad, keypoints=bad.keypoints.copy())
    bad.keypoints[0, 3] = np.nan
    tel = adapt_batch(st, bad, cfg, np.random.default_rng(0)).telemetry
    assert tel["aborted"]
    assert weight_hash(st.f.params) == f_before and weight_hash(st.m.params) == m_before
    assert cb_hash(st) == cbs


def test_non_continuous_mode_restarts_every_batch(tiny_pre, monkeypatch):
    cfg = AdaptConfig(**FAST, continuous=False, use_soft_reset=False)
    start_hashes = []
    original = adapt_mod.adapt_batch

    def spy(state, *args, **kwargs):
        start_hashes.append(weight_hash(state.f.params))
        return original(state, *args, **kwargs)
    monkeypatch.setattr(adapt_mod, "adapt_batch", spy)
    rows = run_stream(tiny_pre, profiles(2), preset("standard"), cfg, seed=0, minutes=3 * 160 / 1800 + 1e-9)
    assert len(rows) == 2 * 3
    expected = weight_hash(tiny_pre.f.replicate(2).params)
    assert start_hashes == [expected] * 3


def test_streams_without_ground_truth(tiny_pre, tmp_path):
    for p in profiles(2):
        for b in stream_person(p, preset("standard"), 2 * 160 / 1800 + 1e-9, np.random.default_rng(0)):
            write_batch(tmp_path / batch_filename(p.person_id, b.index), b, include_gt=False)
    files = list_batches(tmp_path)
    streams = [(read_observations(f) for f in paths) for paths in files.values()]
    rows = adapt_streams(tiny_pre, streams, AdaptConfig(**FAST), np.random.default_rng(0))
    assert len(rows) == 4
    assert all(np.isnan(r["mpjpe_mm"]) for r in rows)
    assert all(np.isfinite(r["L_F"]) and np.isfinite(r["drift"]) for r in rows)
    assert {f.name for f in dataclasses.fields(StackedObservations)} == {"keypoints", "confidence", "nuisance"}
    assert {f.name for f in dataclasses.fields(Targets)} == {"theta_prime", "theta_star", "beta_prime"}


def test_run_stream_rows(tiny_pre):
    rows = run_stream(tiny_pre, profiles(2), preset("standard"), AdaptConfig(**FAST), seed=1,
                      minutes=2 * 160 / 1800 + 1e-9)
    assert [(r["person_id"], r["batch_idx"]) for r in rows] == [(100, 0), (100, 1), (101, 0), (101, 1)]
    assert all(r["mpjpe_mm"] > 0 and r["mpjpe_pa_mm"] <= r["mpjpe_mm"] for r in rows)
    assert set(rows[0]) == set(adapt_mod.TELEMETRY_COLUMNS)
