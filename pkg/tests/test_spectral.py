import numpy as np
import pytest

from sacc.audio_io import MultichannelWaveform
from sacc.errors import ContractError
from sacc.spectral import (
    LOG_FLOOR,
    MelConfig,
    StftConfig,
    hann_window,
    log_mel,
    magnitude_and_normalize,
    mel_filterbank,
    mvn,
    stft,
)

CFG = StftConfig()


def _wave(rng, n, c=1):
    return MultichannelWaveform(rng.standard_normal((n, c)), 16000)


def test_default_geometry():
    assert CFG.win_samples == 400
    assert CFG.hop_samples == 160
    assert CFG.n_bins == 257


def test_frame_count_formula():
    rng = np.random.default_rng(0)
    for n in (400, 401, 559, 560, 16000):
        spec = stft(_wave(rng, n), CFG)
        assert spec.n_frames == 1 + (n - 400) // 160


def test_zero_input_zero_bins():
    spec = stft(MultichannelWaveform(np.zeros((1000, 2)), 16000), CFG)
    assert np.all(spec.bins == 0)


def test_sine_peak_bin():
    t = np.arange(400) / 16000
    sine = np.sin(2 * np.pi * 1000 * t)
    spec = stft(MultichannelWaveform(sine[:, None], 16000), CFG)
    assert np.argmax(np.abs(spec.bins[0, 0])) == round(1000 * 512 / 16000) == 32


def test_too_short_input_rejected():
    with pytest.raises(ContractError):
        stft(MultichannelWaveform(np.zeros((399, 1)), 16000), CFG)


def test_wrong_sample_rate_rejected():
    with pytest.raises(ContractError):
        stft(MultichannelWaveform(np.zeros((999, 1)), 8000), CFG)


def test_parseval_per_frame():
    """Windowed-frame energy equals one-sided weighted spectral energy."""
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2000, 3))
    spec = stft(MultichannelWaveform(x, 16000), CFG)
    frames = np.lib.stride_tricks.sliding_window_view(x, 400, axis=0)[::160]
    time_energy = np.sum((frames * hann_window(400)[None, None, :]) ** 2)
    weights = np.full(257, 2.0)
    weights[0] = weights[-1] = 1.0
    freq_energy = np.sum(weights * np.abs(spec.bins) ** 2) / 512
    assert abs(time_energy - freq_energy) / time_energy < 1e-12


def test_stft_linearity():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((1200, 2))
    y = rng.standard_normal((1200, 2))
    a, b = 1.7, -0.3
    lhs = stft(MultichannelWaveform(a * x + b * y, 16000), CFG).bins
    rhs = a * stft(MultichannelWaveform(x, 16000), CFG).bins \
        + b * stft(MultichannelWaveform(y, 16000), CFG).bins
    assert np.max(np.abs(lhs - rhs)) / np.max(np.abs(lhs)) < 1e-10


def test_mvn_statistics():
    rng = np.random.default_rng(5)
    spec = stft(_wave(rng, 8000, 2), CFG)
    feats = magnitude_and_normalize(spec)
    assert np.abs(feats.normalized_logmag.mean(axis=0)).max() < 1e-5
    assert np.abs(feats.normalized_logmag.var(axis=0) - 1.0).max() < 1e-3
    assert np.array_equal(feats.mag, np.abs(spec.bins))


def test_mvn_constant_bin_guarded():
    x = np.tile(np.array([[3.0, 1.0, 2.0]]), (10, 1))
    assert np.all(mvn(x, axis=0) == 0.0)


def test_mvn_idempotent():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((50, 7))
    once = mvn(x, axis=0)
    twice = mvn(once, axis=0)
    assert np.abs(twice - once).max() < 1e-7


def test_degenerate_utterance_rejected():
    rng = np.random.default_rng(7)
    spec = stft(_wave(rng, 400), CFG)  # exactly one frame
    with pytest.raises(ContractError):
        magnitude_and_normalize(spec)


def test_mel_filters_have_positive_area():
    filt = mel_filterbank(MelConfig(), 257, 16000)
    assert filt.shape == (64, 257)
    assert np.all(filt.sum(axis=1) > 0)


def test_mel_covers_inner_bins():
    filt = mel_filterbank(MelConfig(), 257, 16000)
    freqs = np.arange(257) * 16000 / 512
    inner = (freqs > 0) & (freqs < 8000)
    assert np.all(filt.sum(axis=0)[inner] > 0)


def test_single_bin_activates_overlapping_filters_only():
    filt = mel_filterbank(MelConfig(), 257, 16000)
    bin_4k = round(4000 * 512 / 16000)
    active = np.nonzero(filt[:, bin_4k])[0]
    assert 1 <= active.size <= 2
    rng = np.random.default_rng(8)
    x = np.zeros((12, 257))
    x[:, bin_4k] = rng.uniform(0.5, 2.0, size=12)
    out = log_mel(x, MelConfig())
    inactive = np.setdiff1d(np.arange(64), active)
    assert np.all(out[:, inactive] == 0.0)  # constant floor, zeroed by MVN
    assert np.all(np.abs(out[:, active]).max(axis=0) > 0.1)


def test_log_mel_constant_rows_zero():
    rng = np.random.default_rng(9)
    x = np.tile(rng.uniform(0.5, 1.5, size=(1, 257)), (20, 1))
    out = log_mel(x, MelConfig())
    assert out.shape == (20, 64)
    assert np.abs(out).max() < 1e-9


def test_log_mel_shape_contract():
    with pytest.raises(ContractError):
        log_mel(np.zeros((1, 257)), MelConfig())
