import math

import numpy as np
import pytest

from mtta.autodiff import Graph
from mtta.codebook import ResidualCodebook
from mtta.kinematics import Camera
from mtta.networks import (
    F_INPUT,
    Adam,
    LayoutError,
    MotionDenoiser,
    ParamSet,
    PoseEstimator,
    cosine_lr,
    ema_blend,
    load_arrays,
    load_motion_model,
    load_pose_estimator,
    observation_features,
    save_arrays,
    save_motion_model,
    save_pose_estimator,
    weight_hash,
)
from mtta.selftest import param_gradient_error


def small_f(rng, ensemble=None):
    return PoseEstimator(hidden=8, rng=rng, ensemble=ensemble)


def test_snapshot_is_frozen_and_reloads(rng):
    f = small_f(rng)
    snap = f.params.snapshot()
    with pytest.raises(ValueError):
        snap.data[0] = 1.0
    f.params.data += 1.0
    f.params.load(snap)
    np.testing.assert_array_equal(f.params.data, snap.data)
    with pytest.raises(LayoutError):
        PoseEstimator(hidden=4).params.load(snap)


def test_ema_blend_endpoints_and_interior(rng):
    a, b = small_f(rng).params.snapshot(), small_f(rng).params.snapshot()
    assert np.array_equal(ema_blend(a, b, 1.0).data, a.data)
    assert np.array_equal(ema_blend(a, b, 0.0).data, b.data)
    np.testing.assert_array_equal(ema_blend(a, b, 0.95).data, 0.95 * a.data + (1 - 0.95) * b.data)
    with pytest.raises(ValueError):
        ema_blend(a, b, 1.2)
    with pytest.raises(LayoutError):
        ema_blend(a, PoseEstimator(hidden=4).params.snapshot(), 0.5)


def test_weight_hash_tracks_every_element(rng):
    f = small_f(rng, ensemble=2)
    h, h1 = weight_hash(f.params), weight_hash(f.params, 1)
    f.params.members()[0, -1] += 1e-12
    assert weight_hash(f.params) != h and weight_hash(f.params, 1) == h1


def test_cosine_schedule():
    assert cosine_lr(0, 10, 5e-5, 1e-6) == 5e-5
    assert cosine_lr(9, 10, 5e-5, 1e-6) == pytest.approx(1e-6, abs=1e-18)
    assert cosine_lr(0, 1, 5e-5, 1e-6) == 5e-5
    lrs = [cosine_lr(i, 60, 5e-5, 1e-6) for i in range(60)]
    assert all(x >= y for x, y in zip(lrs, lrs[1:]))
    assert lrs[30] == pytest.approx(1e-6 + 0.5 * (5e-5 - 1e-6) * (1 + math.cos(math.pi * 30 / 59)))


def test_adam_first_steps_match_closed_form():
    p = ParamSet([("w", (3,))])
    p.data[:] = [1.0, -2.0, 0.5]
    g1, g2 = np.array([0.3, -1.0, 2.0]), np.array([-0.1, 0.4, 1.0])
    opt = Adam(3)
    p.grad[:] = g1
    opt.step(p, 0.01)
    np.testing.assert_allclose(p.data, [1.0, -2.0, 0.5] - 0.01 * g1 / (np.abs(g1) + 1e-8), rtol=1e-12)
    before = p.data.copy()
    p.grad[:] = g2
    opt.step(p, 0.01)
    m = (0.9 * 0.1 * g1 + 0.1 * g2) / (1 - 0.9 ** 2)
    v = (0.999 * 0.001 * g1 ** 2 + 0.001 * g2 ** 2) / (1 - 0.999 ** 2)
    np.testing.assert_allclose(p.data, before - 0.01 * m / (np.sqrt(v) + 1e-8), rtol=1e-10)


def test_pose_estimator_starts_at_rest(rng):
    f = small_f(rng)
    for head in ("theta", "beta", "psi"):
        f.params[f"{head}.w"][:] = 0.0
    theta, beta, psi = f.predict(rng.normal(size=(5, F_INPUT)))
    np.testing.assert_allclose(theta, np.broadcast_to([1, 0, 0, 0, 1, 0], (5, 22, 6)))
    np.testing.assert_allclose(beta, 1.0, atol=1e-15)
    np.testing.assert_allclose(psi[:, 2], 4.0, rtol=1e-12)  # softplus(b) + 0.1


def test_ensemble_members_match_standalone_models(rng):
    f = small_f(rng, ensemble=3)
    f.params.data[:] = rng.normal(0, 0.1, f.params.data.shape)
    x = rng.normal(size=(3, 4, F_INPUT))
    theta, beta, psi = f.predict(x)
    for e in range(3):
        t, b, p = f.member(e).predict(x[e])
        np.testing.assert_allclose(theta[e], t, atol=1e-13)
        np.testing.assert_allclose(psi[e], p, atol=1e-13)
    m = MotionDenoiser(4, 6, rng, ensemble=2)
    z = rng.normal(size=(2, 3, 4, 4))
    out = m.decode_np(z)
    np.testing.assert_allclose(out[1], m.member(1).decode_np(z[1]), atol=1e-13)


def test_member_gradients_are_isolated(rng):
    f = small_f(rng, ensemble=2)
    x = rng.normal(size=(2, 4, F_INPUT))
    g = Graph()
    out = f.forward(g, x)
    f.params.zero_grad()
    g.backward(g.sum(out.theta[0]))
    grads = f.params.grad.reshape(2, -1)
    assert np.any(grads[0] != 0) and np.all(grads[1] == 0)


def test_replicate_copies_weights(rng):
    f = small_f(rng)
    ens = f.replicate(3)
    for e in range(3):
        np.testing.assert_array_equal(ens.params.members()[e], f.params.data)


def test_denoiser_shapes(rng):
    m = MotionDenoiser(latent_dim=5, width=6, rng=rng)
    phi = rng.normal(size=(4, 16, 197))
    z = m.encode_np(phi)
    assert z.shape == (4, 4, 5) and m.latent_len == 4
    assert m.decode_np(z).shape == (4, 16, 197)
    ens = MotionDenoiser(5, 6, rng, ensemble=2)
    assert ens.encode_np(rng.normal(size=(2, 3, 16, 197))).shape == (2, 3, 4, 5)


def test_pose_estimator_parameter_gradients(rng):
    f = small_f(rng)
    f.params.data[:] += rng.normal(0, 0.05, f.params.data.shape)
    x = rng.normal(size=(3, F_INPUT))
    w = rng.normal(size=(3, 22, 6))

    def loss():
        g = Graph()
        out = f.forward(g, x)
        return g, g.sum(out.theta * w) + g.sum(g.square(out.beta)) + g.sum(out.psi)
    coords = rng.choice(f.params.data.size, 60, replace=False)
    assert param_gradient_error(f.params, loss, coords) < 1e-4


def test_denoiser_parameter_gradients(rng):
    m = MotionDenoiser(latent_dim=3, width=4, rng=rng)
    phi = rng.normal(size=(2, 16, 197))
    w = rng.normal(size=(2, 16, 197))

    def loss():
        g = Graph()
        return g, g.sum(m.decode(g, m.encode(g, phi)) * w)
    coords = rng.choice(m.params.data.size, 60, replace=False)
    assert param_gradient_error(m.params, loss, coords) < 1e-4


def test_observation_features():
    rng = np.random.default_rng(0)
    kp = rng.uniform(0, 500, (3, 22, 2))
    conf = rng.uniform(0.1, 1, (3, 22))
    conf[0, 5] = 0.0
    feats = observation_features(kp, conf, np.zeros((3, 8)), Camera())
    assert feats.shape == (3, F_INPUT)
    assert feats[0, 10] == 0.0 and feats[0, 11] == 0.0  # dropped joint zeroed in the normalized block
    assert feats[0, 44 + 10] == 0.0 and feats[0, 44 + 11] == 0.0
    np.testing.assert_array_equal(feats[:, 88:110], conf)


def test_model_files_round_trip(tmp_path, rng):
    f = small_f(rng)
    save_pose_estimator(tmp_path / "f.mtta", f)
    back = load_pose_estimator(tmp_path / "f.mtta")
    assert back.hidden == 8 and weight_hash(back.params) == weight_hash(f.params)

    m = MotionDenoiser(4, 6, rng)
    cb = ResidualCodebook(rng.normal(size=(3, 5, 4)), rng.uniform(size=(3, 5)))
    save_motion_model(tmp_path / "m.mtta", m, cb)
    m2, cb2 = load_motion_model(tmp_path / "m.mtta")
    assert weight_hash(m2.params) == weight_hash(m.params)
    assert np.array_equal(cb2.layers, cb.layers) and np.array_equal(cb2.usage, cb.usage)


def test_model_file_errors(tmp_path, rng):
    f = small_f(rng)
    arrays = dict(f.params.arrays())
    arrays["fc2.w"] = np.zeros((8, 9))
    save_arrays(tmp_path / "bad.mtta", arrays)
    with pytest.raises(LayoutError, match="fc2.w"):
        load_pose_estimator(tmp_path / "bad.mtta")
    with pytest.raises(LayoutError):
        load_motion_model(tmp_path / "bad.mtta")
    (tmp_path / "magic.mtta").write_bytes(b"NOPE" + bytes(8))
    with pytest.raises(LayoutError, match="magic"):
        load_arrays(tmp_path / "magic.mtta")
    save_pose_estimator(tmp_path / "ok.mtta", f)
    (tmp_path / "long.mtta").write_bytes((tmp_path / "ok.mtta").read_bytes() + b"x")
    with pytest.raises(LayoutError, match="trailing"):
        load_arrays(tmp_path / "long.mtta")
