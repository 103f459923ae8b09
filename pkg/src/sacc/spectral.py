"""STFT analysis, magnitude normalization, and log-Mel features.

Shared by the attention combinator and every baseline so that all frontends
are compared in the same feature space. Everything here is pure and operates
on in-memory arrays; time is always axis 0.

Conventions: frames are Hann-windowed (periodic window), zero-padded to
``fft_size`` and transformed one-sided, so F = fft_size/2 + 1. Utterance-level
mean/variance normalization (MVN) uses the biased 1/T variance and a fixed
epsilon so that digitally silent bins stay finite and differentiable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .audio_io import MultichannelWaveform
from .errors import ContractError

LOG_FLOOR = 1e-10
MVN_EPS = 1e-8


@dataclass(frozen=True)
class StftConfig:
    win_ms: float = 25.0
    hop_ms: float = 10.0
    fft_size: int = 512
    sample_rate_hz: int = 16000

    @property
    def win_samples(self) -> int:
        return int(round(self.win_ms * self.sample_rate_hz / 1000.0))

    @property
    def hop_samples(self) -> int:
        return int(round(self.hop_ms * self.sample_rate_hz / 1000.0))

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1

    @property
    def bin_freqs_hz(self) -> np.ndarray:
        return np.arange(self.n_bins) * (self.sample_rate_hz / self.fft_size)

    def __post_init__(self):
        if self.fft_size < self.win_samples:
            raise ContractError(
                f"fft_size {self.fft_size} < window of {self.win_samples} samples"
            )


@dataclass
class Spectrogram:
    """One-sided complex STFT, shape (T, C, F); carries its analysis config."""

    bins: np.ndarray
    config: StftConfig

    @property
    def n_frames(self) -> int:
        return self.bins.shape[0]

    @property
    def n_channels(self) -> int:
        return self.bins.shape[1]

    @property
    def n_bins(self) -> int:
        return self.bins.shape[2]


@dataclass
class MagnitudeFeatures:
    """Linear magnitude and its log+MVN form, both (T, C, F).

    ``normalized_logmag`` has (approximately) zero mean and unit variance over
    time within each (channel, frequency) bin; it feeds the attention
    projections, while ``mag`` feeds the channel combination itself.
    """

    mag: np.ndarray
    normalized_logmag: np.ndarray


@dataclass(frozen=True)
class MelConfig:
    n_filters: int = 64
    f_min_hz: float = 0.0
    f_max_hz: float = 8000.0


def hann_window(n: int) -> np.ndarray:
    """Periodic Hann window of length n."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def stft(wave: MultichannelWaveform, cfg: StftConfig = StftConfig()) -> Spectrogram:
    """Multichannel STFT, output (T, C, F) with T = 1 + (N - win) // hop.

    No centering or padding is applied at the utterance edges; the waveform
    must contain at least one full window.
    """
    if wave.sample_rate_hz != cfg.sample_rate_hz:
        raise ContractError(
            f"waveform rate {wave.sample_rate_hz} != config rate {cfg.sample_rate_hz}; "
            "resampling is out of scope, supply 16 kHz input"
        )
    win = cfg.win_samples
    hop = cfg.hop_samples
    n = wave.n_samples
    if n < win:
        raise ContractError(f"signal of {n} samples shorter than one {win}-sample window")
    frames = np.lib.stride_tricks.sliding_window_view(wave.samples, win, axis=0)[::hop]
    windowed = frames * hann_window(win)[None, None, :]
    bins = np.fft.rfft(windowed, n=cfg.fft_size, axis=-1)
    return Spectrogram(bins=bins, config=cfg)


def mvn(x: np.ndarray, axis: int = 0) -> np.ndarray:
    """Zero-mean unit-variance normalization along ``axis`` (biased variance)."""
    mu = x.mean(axis=axis, keepdims=True)
    var = x.var(axis=axis, keepdims=True)
    return (x - mu) / np.sqrt(var + MVN_EPS)


def mvn_with_scale(x: np.ndarray, axis: int = 0):
    """MVN plus the per-bin scale sqrt(var + eps), needed for its backward."""
    mu = x.mean(axis=axis, keepdims=True)
    var = x.var(axis=axis, keepdims=True)
    scale = np.sqrt(var + MVN_EPS)
    return (x - mu) / scale, scale


def mvn_backward(d_out: np.ndarray, normalized: np.ndarray, scale: np.ndarray,
                 axis: int = 0) -> np.ndarray:
    """Gradient of MVN w.r.t. its input.

    Mean and variance are themselves functions of the input, so this is the
    batch-norm style backward, not a plain 1/scale.
    """
    m_d = d_out.mean(axis=axis, keepdims=True)
    m_dy = (d_out * normalized).mean(axis=axis, keepdims=True)
    return (d_out - m_d - normalized * m_dy) / scale


def magnitude_and_normalize(spec: Spectrogram) -> MagnitudeFeatures:
    """|STFT| plus utterance-level log-domain MVN per (channel, frequency)."""
    if spec.n_frames < 2:
        raise ContractError("need at least 2 frames for utterance statistics")
    mag = np.abs(spec.bins)
    logmag = np.log(np.maximum(mag, LOG_FLOOR))
    return MagnitudeFeatures(mag=mag, normalized_logmag=mvn(logmag, axis=0))


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(mel: MelConfig, n_bins: int, sample_rate_hz: int = 16000) -> np.ndarray:
    """Triangular filters on the Mel scale, shape (n_filters, n_bins).

    Filters partition [f_min, f_max]; adjacent triangles overlap so every FFT
    bin strictly inside the range has positive total weight.
    """
    fft_size = 2 * (n_bins - 1)
    freqs = np.arange(n_bins) * (sample_rate_hz / fft_size)
    edges = mel_to_hz(np.linspace(hz_to_mel(mel.f_min_hz), hz_to_mel(mel.f_max_hz),
                                  mel.n_filters + 2))
    filt = np.zeros((mel.n_filters, n_bins))
    for m in range(mel.n_filters):
        lo, mid, hi = edges[m], edges[m + 1], edges[m + 2]
        up = (freqs - lo) / (mid - lo)
        down = (hi - freqs) / (hi - mid)
        filt[m] = np.maximum(0.0, np.minimum(up, down))
    if np.any(filt.sum(axis=1) <= 0.0):
        raise ContractError(
            f"{mel.n_filters} Mel filters over {n_bins} bins leaves empty filters; "
            "reduce n_filters or raise the FFT resolution"
        )
    return filt


def log_mel(frame_features: np.ndarray, mel: MelConfig = MelConfig(),
            sample_rate_hz: int = 16000) -> np.ndarray:
    """Log Mel-band energies of a (T, F) magnitude array, MVN per band."""
    feats, _ = log_mel_with_cache(frame_features, mel, sample_rate_hz)
    return feats


def log_mel_with_cache(frame_features: np.ndarray, mel: MelConfig = MelConfig(),
                       sample_rate_hz: int = 16000):
    """log_mel plus the intermediates needed to backpropagate through it."""
    x = np.asarray(frame_features, dtype=np.float64)
    if x.ndim != 2:
        raise ContractError(f"expected (T, F) input, got shape {x.shape}")
    if x.shape[0] < 2:
        raise ContractError("need at least 2 frames for utterance statistics")
    filt = mel_filterbank(mel, x.shape[1], sample_rate_hz)
    energies = x @ filt.T
    log_e = np.log(np.maximum(energies, LOG_FLOOR))
    feats, scale = mvn_with_scale(log_e, axis=0)
    cache = {"filt": filt, "energies": energies, "normalized": feats, "scale": scale}
    return feats, cache


def log_mel_backward(cache: dict, d_feats: np.ndarray) -> np.ndarray:
    """Gradient of log_mel w.r.t. its (T, F) input."""
    d_log = mvn_backward(d_feats, cache["normalized"], cache["scale"], axis=0)
    energies = cache["energies"]
    d_energies = np.where(energies > LOG_FLOOR, d_log / np.maximum(energies, LOG_FLOOR), 0.0)
    return d_energies @ cache["filt"]
