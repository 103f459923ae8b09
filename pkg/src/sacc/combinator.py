"""Self-attention channel combinator: parameters, forward pass, exact gradients.

Per frame, normalized log magnitudes are projected to query/key (width D) and
a scalar value per channel. Scaled dot-product attention over channels feeds a
channel softmax, and the resulting weights convexly combine the *linear*
channel magnitudes into a single-channel magnitude spectrogram.

The backward pass is hand-derived reverse mode through both softmaxes, the
affine projections, and the log+MVN normalization (whose statistics depend on
the input), so gradients are exact rather than approximated. Parameters are
never mutated here; optimization lives in :mod:`sacc.trainer`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .audio_io import MultichannelWaveform
from .errors import ContractError, FormatError
from .spectral import (
    LOG_FLOOR,
    MVN_EPS,
    MagnitudeFeatures,
    MelConfig,
    StftConfig,
    log_mel_backward,
    log_mel_with_cache,
    magnitude_and_normalize,
    mvn_backward,
    stft,
)

CHECKPOINT_MAGIC = b"SACCCKPT"
CHECKPOINT_LAYOUT_VERSION = 1
PARAM_FIELDS = ("wq", "bq", "wk", "bk", "wv", "bv")


@dataclass
class SaccParams:
    """Projection weights; also reused as the container for their gradients."""

    wq: np.ndarray  # (F, D)
    bq: np.ndarray  # (D,)
    wk: np.ndarray  # (F, D)
    bk: np.ndarray  # (D,)
    wv: np.ndarray  # (F, 1)
    bv: np.ndarray  # (1,)

    @property
    def n_bins(self) -> int:
        return self.wq.shape[0]

    @property
    def width(self) -> int:
        return self.wq.shape[1]

    @property
    def param_count(self) -> int:
        return sum(getattr(self, f).size for f in PARAM_FIELDS)

    def copy(self) -> "SaccParams":
        return SaccParams(*(getattr(self, f).copy() for f in PARAM_FIELDS))

    def flat(self) -> np.ndarray:
        return np.concatenate([getattr(self, f).ravel() for f in PARAM_FIELDS])

    def set_flat_coord(self, index: int, value: float) -> None:
        """Write one scalar coordinate addressed in flat() order (test probes)."""
        for f in PARAM_FIELDS:
            arr = getattr(self, f)
            if index < arr.size:
                arr.ravel()[index] = value
                return
            index -= arr.size
        raise ContractError(f"coordinate {index} out of range")


def zeros_like_params(params: SaccParams) -> SaccParams:
    return SaccParams(*(np.zeros_like(getattr(params, f)) for f in PARAM_FIELDS))


def init_params(seed: int, n_bins: int = 257, width: int = 256) -> SaccParams:
    """Glorot-uniform weights, zero biases; deterministic per seed."""
    if n_bins < 1 or width < 1:
        raise ContractError("n_bins and width must be >= 1")
    rng = np.random.default_rng(seed)
    lim_qk = np.sqrt(6.0 / (n_bins + width))
    lim_v = np.sqrt(6.0 / (n_bins + 1))
    return SaccParams(
        wq=rng.uniform(-lim_qk, lim_qk, size=(n_bins, width)),
        bq=np.zeros(width),
        wk=rng.uniform(-lim_qk, lim_qk, size=(n_bins, width)),
        bk=np.zeros(width),
        wv=rng.uniform(-lim_v, lim_v, size=(n_bins, 1)),
        bv=np.zeros(1),
    )


def save_params(params: SaccParams, path) -> None:
    """Checkpoint as a JSON header plus raw little-endian float64 payload.

    The byte layout is fully deterministic (no archive timestamps), so two
    identical training runs produce bit-identical files.
    """
    header = {
        "layout_version": CHECKPOINT_LAYOUT_VERSION,
        "n_bins": params.n_bins,
        "width": params.width,
        "fields": list(PARAM_FIELDS),
        "dtype": "<f8",
    }
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        blob = json.dumps(header, sort_keys=True).encode()
        fh.write(len(blob).to_bytes(4, "little"))
        fh.write(blob)
        for f in PARAM_FIELDS:
            fh.write(np.ascontiguousarray(getattr(params, f), dtype="<f8").tobytes())


def load_params(path) -> SaccParams:
    with open(path, "rb") as fh:
        if fh.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise FormatError(f"{path}: not a parameter checkpoint")
        size = int.from_bytes(fh.read(4), "little")
        header = json.loads(fh.read(size).decode())
        if header.get("layout_version") != CHECKPOINT_LAYOUT_VERSION:
            raise FormatError(f"{path}: unsupported layout version {header.get('layout_version')}")
        n_bins, width = header["n_bins"], header["width"]
        shapes = {"wq": (n_bins, width), "bq": (width,), "wk": (n_bins, width),
                  "bk": (width,), "wv": (n_bins, 1), "bv": (1,)}
        arrays = {}
        for f in header["fields"]:
            shape = shapes[f]
            count = int(np.prod(shape))
            data = np.frombuffer(fh.read(count * 8), dtype="<f8", count=count)
            arrays[f] = data.reshape(shape).astype(np.float64)
    return SaccParams(**arrays)


@dataclass
class SaccActivations:
    """Every intermediate tensor the backward pass needs.

    att rows are a softmax over the last channel axis; w is a softmax over the
    channel axis; combined is the single-channel magnitude output.
    """

    query: np.ndarray  # (T, C, D)
    key: np.ndarray  # (T, C, D)
    value: np.ndarray  # (T, C, 1)
    att: np.ndarray  # (T, C, C)
    w: np.ndarray  # (T, C, 1)
    combined: np.ndarray  # (T, F)
    combine_domain: str = "linear"


def _softmax(x: np.ndarray, axis: int) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def _softmax_backward(p: np.ndarray, d_p: np.ndarray, axis: int) -> np.ndarray:
    """Apply J = diag(p) - p p^T along ``axis`` for softmax output p."""
    inner = (d_p * p).sum(axis=axis, keepdims=True)
    return p * (d_p - inner)


def forward(feats: MagnitudeFeatures, params: SaccParams,
            combine_domain: str = "linear") -> SaccActivations:
    """Run the combinator on (T, C, F) features.

    ``combine_domain`` selects what the channel weights are applied to:
    "linear" (default) combines the linear magnitudes, "normalized_log" is an
    experimentation alternative combining the normalized log magnitudes.
    """
    nlm = feats.normalized_logmag
    if nlm.ndim != 3:
        raise ContractError(f"expected (T, C, F) features, got shape {nlm.shape}")
    if nlm.shape[2] != params.n_bins:
        raise ContractError(f"feature bins {nlm.shape[2]} != parameter bins {params.n_bins}")
    if feats.mag.shape != nlm.shape:
        raise ContractError("mag and normalized_logmag shapes differ")
    if combine_domain not in ("linear", "normalized_log"):
        raise ContractError(f"unknown combine_domain {combine_domain!r}")

    t, c, f = nlm.shape
    flat = nlm.reshape(t * c, f)
    query = (flat @ params.wq).reshape(t, c, -1) + params.bq
    key = (flat @ params.wk).reshape(t, c, -1) + params.bk
    value = (flat @ params.wv).reshape(t, c, 1) + params.bv
    scores = (query @ np.swapaxes(key, 1, 2)) / np.sqrt(params.width)
    att = _softmax(scores, axis=2)
    w = _softmax(att @ value, axis=1)
    source = feats.mag if combine_domain == "linear" else nlm
    combined = (np.swapaxes(w, 1, 2) @ source)[:, 0, :]
    return SaccActivations(query=query, key=key, value=value, att=att, w=w,
                           combined=combined, combine_domain=combine_domain)


def backward(feats: MagnitudeFeatures, params: SaccParams, acts: SaccActivations,
             d_combined: np.ndarray):
    """Exact reverse-mode gradients of the combined output.

    Returns (d_params, d_mag) where d_params mirrors SaccParams and d_mag is
    the (T, C, F) gradient w.r.t. the linear magnitude input, including the
    path through log+MVN into the projections (MVN statistics are treated as
    functions of the input, not constants).
    """
    nlm = feats.normalized_logmag
    t, c, f = nlm.shape
    if acts.query.shape != (t, c, params.width) or acts.att.shape != (t, c, c):
        raise ContractError("activations do not match the features/params provided")
    d_combined = np.asarray(d_combined, dtype=np.float64)
    if d_combined.shape != (t, f):
        raise ContractError(f"upstream gradient must be (T, F)={t, f}, got {d_combined.shape}")

    source = feats.mag if acts.combine_domain == "linear" else nlm
    w = acts.w[:, :, 0]
    d_w = (source @ d_combined[:, :, None])[:, :, 0]
    d_source = w[:, :, None] * d_combined[:, None, :]

    d_r = _softmax_backward(w, d_w, axis=1)[:, :, None]
    d_att = d_r @ np.swapaxes(acts.value, 1, 2)
    d_value = np.swapaxes(acts.att, 1, 2) @ d_r
    d_scores = _softmax_backward(acts.att, d_att, axis=2) / np.sqrt(params.width)
    d_query = d_scores @ acts.key
    d_key = np.swapaxes(d_scores, 1, 2) @ acts.query

    flat = nlm.reshape(t * c, f)
    grads = SaccParams(
        wq=flat.T @ d_query.reshape(t * c, -1),
        bq=d_query.sum(axis=(0, 1)),
        wk=flat.T @ d_key.reshape(t * c, -1),
        bk=d_key.sum(axis=(0, 1)),
        wv=flat.T @ d_value.reshape(t * c, -1),
        bv=d_value.sum(axis=(0, 1)),
    )

    d_nlm = (d_query.reshape(t * c, -1) @ params.wq.T
             + d_key.reshape(t * c, -1) @ params.wk.T
             + d_value.reshape(t * c, -1) @ params.wv.T).reshape(t, c, f)
    if acts.combine_domain == "normalized_log":
        d_nlm += d_source
        d_mag = np.zeros_like(feats.mag)
    else:
        d_mag = d_source.copy()

    # MVN scale is recomputed from mag; cheaper than caching and keeps the
    # forward signature free of gradient-only state.
    logmag = np.log(np.maximum(feats.mag, LOG_FLOOR))
    scale = np.sqrt(logmag.var(axis=0, keepdims=True) + MVN_EPS)
    d_logmag = mvn_backward(d_nlm, nlm, scale, axis=0)
    d_mag += np.where(feats.mag > LOG_FLOOR, d_logmag / np.maximum(feats.mag, LOG_FLOOR), 0.0)
    return grads, d_mag


@dataclass
class PipelineCache:
    feats: MagnitudeFeatures
    acts: SaccActivations
    logmel_cache: dict


def pipeline_forward(wave: MultichannelWaveform, params: SaccParams,
                     cfg: StftConfig = StftConfig(), mel: MelConfig = MelConfig()):
    """Waveform -> STFT -> magnitude+MVN -> attention combination -> log-Mel.

    Returns the (T, n_filters) ASR-style features plus the cache consumed by
    :func:`pipeline_backward`.
    """
    feats = magnitude_and_normalize(stft(wave, cfg))
    acts = forward(feats, params)
    logmel, logmel_cache = log_mel_with_cache(acts.combined, mel, cfg.sample_rate_hz)
    return logmel, PipelineCache(feats=feats, acts=acts, logmel_cache=logmel_cache)


def pipeline_backward(params: SaccParams, cache: PipelineCache, d_logmel: np.ndarray):
    """Gradients of the full feature pipeline w.r.t. the parameters."""
    d_combined = log_mel_backward(cache.logmel_cache, d_logmel)
    grads, _ = backward(cache.feats, params, cache.acts, d_combined)
    return grads


def sacc_features(wave: MultichannelWaveform, params: SaccParams,
                  cfg: StftConfig = StftConfig(), mel: MelConfig = MelConfig()) -> np.ndarray:
    """End-to-end feature map; deterministic for fixed inputs and parameters."""
    logmel, _ = pipeline_forward(wave, params, cfg, mel)
    return logmel
