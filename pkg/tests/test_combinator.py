import numpy as np
import pytest

from conftest import random_features, straightline_combinator
from sacc.audio_io import MultichannelWaveform
from sacc.combinator import (
    SaccParams,
    backward,
    forward,
    init_params,
    load_params,
    sacc_features,
    save_params,
    zeros_like_params,
)
from sacc.errors import ContractError, FormatError
from sacc.spectral import LOG_FLOOR, MVN_EPS, MagnitudeFeatures, MelConfig, StftConfig, mvn


def _zero_params(f, d):
    return SaccParams(wq=np.zeros((f, d)), bq=np.zeros(d), wk=np.zeros((f, d)),
                      bk=np.zeros(d), wv=np.zeros((f, 1)), bv=np.zeros(1))


def test_param_count_matches_reported_size():
    assert init_params(0, n_bins=257, width=256).param_count == 132_354


def test_init_deterministic_per_seed():
    a = init_params(42)
    b = init_params(42)
    c = init_params(43)
    assert np.array_equal(a.wq, b.wq) and np.array_equal(a.wv, b.wv)
    assert not np.array_equal(a.wq, c.wq)


def test_init_glorot_bounds_and_zero_biases():
    p = init_params(7, n_bins=100, width=50)
    lim = np.sqrt(6.0 / 150.0)
    assert np.abs(p.wq).max() <= lim and np.abs(p.wk).max() <= lim
    assert np.abs(p.wv).max() <= np.sqrt(6.0 / 101.0)
    assert np.all(p.bq == 0) and np.all(p.bk == 0) and np.all(p.bv == 0)


def test_zero_params_give_uniform_attention_and_channel_mean():
    rng = np.random.default_rng(0)
    t, c, f = 6, 4, 9
    feats = random_features(rng, t, c, f)
    acts = forward(feats, _zero_params(f, 5))
    assert np.allclose(acts.att, 1.0 / c)
    assert np.all(acts.value == 0.0)
    assert np.allclose(acts.w, 1.0 / c)
    assert np.allclose(acts.combined, feats.mag.mean(axis=1), rtol=1e-12)


def test_identical_channels_uniform_weights():
    rng = np.random.default_rng(1)
    t, c, f = 5, 3, 9
    one = rng.uniform(0.1, 2.0, size=(t, 1, f))
    mag = np.repeat(one, c, axis=1)
    feats = MagnitudeFeatures(mag=mag, normalized_logmag=mvn(np.log(mag), axis=0))
    acts = forward(feats, init_params(2, n_bins=f, width=5))
    assert np.abs(acts.w - 1.0 / c).max() < 1e-12
    assert np.allclose(acts.combined, mag[:, 0, :], rtol=1e-12)


def test_single_channel_passthrough():
    rng = np.random.default_rng(2)
    feats = random_features(rng, 5, 1, 9)
    acts = forward(feats, init_params(3, n_bins=9, width=5))
    assert np.all(acts.w == 1.0)
    assert np.allclose(acts.combined, feats.mag[:, 0, :], rtol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_forward_matches_straightline_oracle(seed):
    rng = np.random.default_rng(seed)
    t, c, f, d = 5, 3, 9, 5
    feats = random_features(rng, t, c, f)
    params = init_params(seed + 50, n_bins=f, width=d)
    acts = forward(feats, params)
    att, w, s = straightline_combinator(feats.normalized_logmag, feats.mag,
                                        params.wq, params.bq, params.wk, params.bk,
                                        params.wv, params.bv)
    assert np.abs(acts.att - att).max() < 1e-12
    assert np.abs(acts.w[:, :, 0] - w).max() < 1e-12
    assert np.abs(acts.combined - s).max() < 1e-12


def test_weight_normalization_and_convexity():
    rng = np.random.default_rng(3)
    for _ in range(20):
        t = int(rng.integers(2, 12))
        c = int(rng.choice([2, 4, 8]))
        feats = random_features(rng, t, c, 17)
        acts = forward(feats, init_params(9, n_bins=17, width=6))
        assert np.abs(acts.w.sum(axis=1) - 1.0).max() < 1e-6
        lo = feats.mag.min(axis=1) - 1e-12
        hi = feats.mag.max(axis=1) + 1e-12
        assert np.all(acts.combined >= lo) and np.all(acts.combined <= hi)


def test_channel_permutation_equivariance():
    rng = np.random.default_rng(4)
    feats = random_features(rng, 7, 5, 11)
    params = init_params(11, n_bins=11, width=4)
    base = forward(feats, params)
    perm = rng.permutation(5)
    permuted = MagnitudeFeatures(mag=feats.mag[:, perm],
                                 normalized_logmag=feats.normalized_logmag[:, perm])
    acts = forward(permuted, params)
    assert np.abs(acts.w[:, :, 0] - base.w[:, perm, 0]).max() < 1e-12
    assert np.abs(acts.combined - base.combined).max() < 1e-12


def test_global_gain_leaves_weights_invariant_and_scales_output():
    rng = np.random.default_rng(5)
    t, c, f = 8, 4, 13
    mag = rng.uniform(0.1, 2.0, size=(t, c, f))
    params = init_params(13, n_bins=f, width=6)
    base = forward(MagnitudeFeatures(mag, mvn(np.log(mag), axis=0)), params)
    for alpha in (0.5, 2.0):
        scaled_mag = alpha * mag
        acts = forward(MagnitudeFeatures(scaled_mag, mvn(np.log(scaled_mag), axis=0)), params)
        assert np.abs(acts.w - base.w).max() < 1e-9
        assert np.abs(acts.combined - alpha * base.combined).max() < 1e-9 * alpha


def test_shape_mismatch_rejected():
    rng = np.random.default_rng(6)
    feats = random_features(rng, 4, 3, 9)
    with pytest.raises(ContractError):
        forward(feats, init_params(0, n_bins=10, width=4))


def test_backward_zero_upstream_gives_zero_gradients():
    rng = np.random.default_rng(7)
    feats = random_features(rng, 4, 3, 9)
    params = init_params(1, n_bins=9, width=5)
    acts = forward(feats, params)
    grads, d_mag = backward(feats, params, acts, np.zeros_like(acts.combined))
    for name in ("wq", "bq", "wk", "bk", "wv", "bv"):
        assert np.all(getattr(grads, name) == 0.0)
    assert np.all(d_mag == 0.0)


def test_softmax_jacobian_block_against_finite_differences():
    """diag(p) - p p^T applied to an upstream vector, checked per coordinate."""
    rng = np.random.default_rng(8)
    z = rng.standard_normal(6)
    up = rng.standard_normal(6)

    def softmax(v):
        e = np.exp(v - v.max())
        return e / e.sum()

    p = softmax(z)
    analytic = p * (up - np.dot(up, p))
    h = 1e-6
    for i in range(6):
        zp, zm = z.copy(), z.copy()
        zp[i] += h
        zm[i] -= h
        fd = (np.dot(up, softmax(zp)) - np.dot(up, softmax(zm))) / (2 * h)
        assert abs(fd - analytic[i]) < 1e-8


def _scalar_loss_and_grads(mag, params, d_combined):
    nlm = mvn(np.log(np.maximum(mag, LOG_FLOOR)), axis=0)
    feats = MagnitudeFeatures(mag=mag, normalized_logmag=nlm)
    acts = forward(feats, params)
    loss = float(np.sum(d_combined * acts.combined))
    grads, d_mag = backward(feats, params, acts, d_combined)
    return loss, grads, d_mag


def test_backward_every_coordinate_against_finite_differences():
    """Exact reverse-mode gradients through both softmaxes, the projections,
    and the log+MVN path, for parameters and the magnitude input."""
    rng = np.random.default_rng(9)
    t, c, f, d = 4, 3, 9, 5
    mag = rng.uniform(0.2, 2.0, size=(t, c, f))
    params = init_params(21, n_bins=f, width=d)
    d_combined = rng.standard_normal((t, f))
    _, grads, d_mag = _scalar_loss_and_grads(mag, params, d_combined)
    h = 1e-5

    def check(analytic, fd):
        denom = max(abs(analytic), abs(fd))
        if denom < 1e-10:
            return
        assert abs(analytic - fd) / denom < 1e-6

    for name in ("wq", "bq", "wk", "bk", "wv", "bv"):
        arr = getattr(params, name)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + h
            lp = _scalar_loss_and_grads(mag, params, d_combined)[0]
            arr[idx] = orig - h
            lm = _scalar_loss_and_grads(mag, params, d_combined)[0]
            arr[idx] = orig
            check(getattr(grads, name)[idx], (lp - lm) / (2 * h))

    for idx in np.ndindex(mag.shape):
        orig = mag[idx]
        mag[idx] = orig + h
        lp = _scalar_loss_and_grads(mag, params, d_combined)[0]
        mag[idx] = orig - h
        lm = _scalar_loss_and_grads(mag, params, d_combined)[0]
        mag[idx] = orig
        check(d_mag[idx], (lp - lm) / (2 * h))


def test_backward_rejects_mismatched_activations():
    rng = np.random.default_rng(10)
    feats = random_features(rng, 4, 3, 9)
    params = init_params(1, n_bins=9, width=5)
    acts = forward(feats, params)
    other = random_features(rng, 4, 4, 9)
    with pytest.raises(ContractError):
        backward(other, params, acts, np.zeros((4, 9)))
    with pytest.raises(ContractError):
        backward(feats, params, acts, np.zeros((5, 9)))


def test_checkpoint_roundtrip(tmp_path):
    params = init_params(99, n_bins=33, width=8)
    path = tmp_path / "p.ckpt"
    save_params(params, path)
    back = load_params(path)
    for name in ("wq", "bq", "wk", "bk", "wv", "bv"):
        assert np.array_equal(getattr(back, name), getattr(params, name))


def test_checkpoint_bad_magic_rejected(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"NOTACKPT" + b"\x00" * 64)
    with pytest.raises(FormatError):
        load_params(path)


def test_checkpoint_bytes_deterministic(tmp_path):
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_params(init_params(5, n_bins=17, width=4), a)
    save_params(init_params(5, n_bins=17, width=4), b)
    assert a.read_bytes() == b.read_bytes()


def test_features_identical_channels_match_single_channel():
    rng = np.random.default_rng(11)
    n = 400 + 9 * 160
    mono = rng.standard_normal((n, 1))
    multi = np.repeat(mono, 4, axis=1)
    cfg = StftConfig()
    mel = MelConfig()
    params = init_params(0)
    multi_feats = sacc_features(MultichannelWaveform(multi, 16000), params, cfg, mel)
    mono_feats = sacc_features(MultichannelWaveform(mono, 16000), params, cfg, mel)
    assert multi_feats.shape == (10, 64)
    assert np.abs(multi_feats - mono_feats).max() < 1e-9


def test_features_output_shape_for_any_channel_count():
    rng = np.random.default_rng(12)
    n = 400 + 4 * 160
    for c in (1, 2, 8):
        feats = sacc_features(MultichannelWaveform(rng.standard_normal((n, c)), 16000),
                              init_params(0))
        assert feats.shape == (5, 64)
