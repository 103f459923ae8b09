"""Baseline frontends: MVDR with a CDR mask, channel selection, delay-and-sum.

The MVDR weights follow the covariance formulation
``h_f = (Phi_v^-1 Phi_s u) / tr[Phi_v^-1 Phi_s]`` per frequency, applied as
``Y[t, f] = sum_c X[t, c, f] * conj(h[f, c])``. Speech/noise covariances are
estimated utterance-level from a coherence-to-diffuse-ratio mask computed on
one microphone pair against the diffuse-field model
``gamma(f) = sinc(2 pi f d / c)``.

All operations are pure per utterance.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
from scipy.signal import lfilter

from .audio_io import MultichannelWaveform
from .errors import ContractError, NumericError
from .spectral import Spectrogram

SPEED_OF_SOUND_M_S = 343.0
COHERENCE_LIMIT = 1.0 - 1e-6


@dataclass
class CdrMask:
    """Per time-frequency speech weight in [0, 1]."""

    mask: np.ndarray  # (T, F)


@dataclass
class CovariancePair:
    """Per-frequency noise/speech covariance matrices, each (F, C, C) Hermitian.

    speech_fallback_bins counts frequencies whose mask column summed to zero,
    where the speech covariance fell back to the unweighted sample covariance.
    """

    phi_v: np.ndarray
    phi_s: np.ndarray
    speech_fallback_bins: int = 0


@dataclass
class BeamformerWeights:
    h: np.ndarray  # (F, C) complex


@dataclass
class ReferenceSelector:
    """One-hot reference microphone choice."""

    u: np.ndarray

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float64)
        if self.u.ndim != 1 or np.count_nonzero(self.u == 1.0) != 1 or self.u.sum() != 1.0:
            raise ContractError("u must be one-hot")

    @classmethod
    def from_index(cls, n_channels: int, index: int) -> "ReferenceSelector":
        u = np.zeros(n_channels)
        u[index] = 1.0
        return cls(u)

    @property
    def index(self) -> int:
        return int(np.argmax(self.u))


def diffuse_coherence(freqs_hz: np.ndarray, spacing_m: float,
                      c: float = SPEED_OF_SOUND_M_S) -> np.ndarray:
    """Spherically isotropic field coherence sin(x)/x with x = 2 pi f d / c."""
    # np.sinc is the normalized sinc, so divide the argument by pi.
    return np.sinc(2.0 * np.asarray(freqs_hz) * spacing_m / c)


def estimate_cdr_mask(spec: Spectrogram, mic_pair=(3, 4), spacing_m: float = 0.033,
                      smoothing: float = 0.97) -> CdrMask:
    """CDR-based speech mask from the complex coherence of one mic pair.

    The pair's cross/auto spectra are smoothed over time by a first-order
    recursion (coefficient ``smoothing``), and the CDR comes from the
    DOA-independent estimator against the diffuse model; the mask is
    cdr / (cdr + 1), clamped to [0, 1].
    """
    i, j = mic_pair
    if i == j:
        raise ContractError("CDR mask needs two distinct channels")
    if spacing_m <= 0:
        raise ContractError("spacing must be positive")
    x_i = spec.bins[:, i, :]
    x_j = spec.bins[:, j, :]

    inst = np.stack([x_i * np.conj(x_j),
                     (x_i * np.conj(x_i)).real.astype(complex),
                     (x_j * np.conj(x_j)).real.astype(complex)], axis=-1)
    b, a = [1.0 - smoothing], [1.0, -smoothing]
    zi = smoothing * inst[0][None, ...]
    smoothed, _ = lfilter(b, a, inst, axis=0, zi=zi)
    phi_ij, phi_ii, phi_jj = smoothed[..., 0], smoothed[..., 1].real, smoothed[..., 2].real

    coh = phi_ij / np.sqrt(np.maximum(phi_ii * phi_jj, 1e-300))
    mag = np.abs(coh)
    coh = np.where(mag > COHERENCE_LIMIT, coh * (COHERENCE_LIMIT / np.maximum(mag, 1e-300)), coh)

    gamma = diffuse_coherence(spec.config.bin_freqs_hz, spacing_m)
    gamma = np.clip(gamma, -COHERENCE_LIMIT, COHERENCE_LIMIT)[None, :]

    re = coh.real
    mag2 = np.abs(coh) ** 2
    arg = gamma**2 * re**2 - gamma**2 * mag2 + gamma**2 - 2.0 * gamma * re + mag2
    cdr = (gamma * re - mag2 - np.sqrt(np.maximum(arg, 0.0))) / (mag2 - 1.0)
    cdr = np.clip(cdr, 0.0, 1e7)
    return CdrMask(mask=np.clip(cdr / (cdr + 1.0), 0.0, 1.0))


def estimate_covariances(spec: Spectrogram, mask: CdrMask,
                         loading: float = 1e-6) -> CovariancePair:
    """Mask-weighted speech/noise covariances with diagonal loading on noise.

    phi_s[f] averages mask-weighted frame outer products, phi_v[f] the
    (1 - mask)-weighted ones. Hermitian symmetry is enforced explicitly and
    phi_v receives loading * trace / C on its diagonal for invertibility.
    """
    x = spec.bins
    t, c, f = x.shape
    m = np.asarray(mask.mask, dtype=np.float64)
    if m.shape != (t, f):
        raise ContractError(f"mask shape {m.shape} != (T, F)={(t, f)}")

    def weighted(weights):
        num = np.einsum("tf,tcf,tdf->fcd", weights, x, np.conj(x))
        den = weights.sum(axis=0)
        return num, den

    num_s, den_s = weighted(m)
    num_v, den_v = weighted(1.0 - m)

    fallback = den_s <= 0.0
    n_fallback = int(np.count_nonzero(fallback))
    if n_fallback:
        unweighted = np.einsum("tcf,tdf->fcd", x, np.conj(x)) / t
        num_s[fallback] = unweighted[fallback]
        den_s[fallback] = 1.0
    phi_s = num_s / den_s[:, None, None]
    # A zero noise-weight column legitimately yields the zero matrix.
    phi_v = num_v / np.where(den_v > 0.0, den_v, 1.0)[:, None, None]

    phi_s = 0.5 * (phi_s + np.conj(np.swapaxes(phi_s, 1, 2)))
    phi_v = 0.5 * (phi_v + np.conj(np.swapaxes(phi_v, 1, 2)))
    traces = np.trace(phi_v, axis1=1, axis2=2).real
    phi_v = phi_v + (loading * traces / c)[:, None, None] * np.eye(c)
    return CovariancePair(phi_v=phi_v, phi_s=phi_s, speech_fallback_bins=n_fallback)


def mvdr_weights(cov: CovariancePair, ref: ReferenceSelector) -> BeamformerWeights:
    """Per-frequency weights (Phi_v^-1 Phi_s u) / tr[Phi_v^-1 Phi_s]."""
    f, c, _ = cov.phi_v.shape
    if ref.u.shape[0] != c:
        raise ContractError(f"reference selector has {ref.u.shape[0]} entries for {c} channels")
    try:
        ratio = np.linalg.solve(cov.phi_v, cov.phi_s)
    except np.linalg.LinAlgError:
        for fi in range(f):
            try:
                np.linalg.solve(cov.phi_v[fi], cov.phi_s[fi])
            except np.linalg.LinAlgError:
                raise NumericError(f"noise covariance singular at frequency bin {fi}") from None
        raise
    traces = np.trace(ratio, axis1=1, axis2=2)
    bad = np.abs(traces) < 1e-300
    if np.any(bad):
        raise NumericError(f"zero-trace MVDR normalization at frequency bin {int(np.argmax(bad))}")
    h = (ratio @ ref.u.astype(complex)) / traces[:, None]
    if not np.all(np.isfinite(h)):
        bad_f = int(np.argwhere(~np.isfinite(h))[0][0])
        raise NumericError(f"non-finite MVDR weights at frequency bin {bad_f}")
    return BeamformerWeights(h=h)


def apply_beamformer(spec: Spectrogram, weights: BeamformerWeights) -> np.ndarray:
    """Y[t, f] = sum_c X[t, c, f] * conj(h[f, c]); output (T, F) complex."""
    if weights.h.shape != (spec.n_bins, spec.n_channels):
        raise ContractError(
            f"weights shape {weights.h.shape} != (F, C)={(spec.n_bins, spec.n_channels)}"
        )
    return np.einsum("tcf,fc->tf", spec.bins, np.conj(weights.h))


def mvdr_enhance(spec: Spectrogram, mic_pair=None, spacing_m: float = 0.033,
                 ref_index=None) -> np.ndarray:
    """Full CDR-masked MVDR chain on one utterance; output (T, F) complex."""
    c = spec.n_channels
    if ref_index is None:
        ref_index = (c - 1) // 2
    if mic_pair is None:
        mic_pair = (ref_index, ref_index + 1) if ref_index + 1 < c else (ref_index - 1, ref_index)
    mask = estimate_cdr_mask(spec, mic_pair=mic_pair, spacing_m=spacing_m)
    cov = estimate_covariances(spec, mask)
    weights = mvdr_weights(cov, ReferenceSelector.from_index(c, ref_index))
    return apply_beamformer(spec, weights)


def middle_channel_index(n_channels: int) -> int:
    """0-based middle channel; the 4th microphone of an 8-channel array."""
    return (n_channels - 1) // 2


def select_channel(wave: MultichannelWaveform, policy: str, seed: int = 0,
                   utterance_id: str = "", test_mode: bool = False) -> MultichannelWaveform:
    """Single-distant-mic / random-distant-mic channel pick.

    "sdm" always takes the middle channel. "rdm" draws one channel uniformly,
    deterministic per (seed, utterance_id); at test time it degrades to the
    middle channel.
    """
    c = wave.n_channels
    if policy == "sdm":
        return wave.channel(middle_channel_index(c))
    if policy == "rdm":
        if test_mode:
            return wave.channel(middle_channel_index(c))
        digest = hashlib.sha256(f"{seed}:{utterance_id}".encode()).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        return wave.channel(int(rng.integers(c)))
    raise ContractError(f"unknown channel policy {policy!r}")


def delay_and_sum(spec: Spectrogram, steering_delay_s: np.ndarray) -> np.ndarray:
    """Phase-aligned channel average: (1/C) sum_c X * exp(+j 2 pi f tau_c)."""
    tau = np.asarray(steering_delay_s, dtype=np.float64)
    if tau.shape != (spec.n_channels,):
        raise ContractError(f"need one delay per channel, got shape {tau.shape}")
    if not np.all(np.isfinite(tau)):
        raise ContractError("delays must be finite")
    phase = np.exp(2j * np.pi * np.outer(tau, spec.config.bin_freqs_hz))
    return np.einsum("tcf,cf->tf", spec.bins, phase) / spec.n_channels
