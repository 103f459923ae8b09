"""Intermediate-output inspection for the channel combinator.

Emits, for one utterance: the per-channel normalized log spectrograms, the
time-averaged attention matrix with its diagonal zeroed (the diagonal would
otherwise overshadow the cross-channel structure), and per-channel weight
traces smoothed with a 30-frame moving average. Outputs are plain CSV/JSON
data files; rendering is left to external tooling.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .audio_io import MultichannelWaveform
from .combinator import SaccParams, forward
from .errors import ContractError
from .spectral import MelConfig, StftConfig, magnitude_and_normalize, stft

TRACE_SMOOTHING_FRAMES = 30


@dataclass
class AnalysisBundle:
    norm_logmag_per_channel: np.ndarray  # (C, T, F)
    time_avg_attention: np.ndarray  # (C, C), diagonal zeroed
    weight_traces: np.ndarray  # (C, T), smoothed, values in [0, 1]


def moving_average(x: np.ndarray, window: int = TRACE_SMOOTHING_FRAMES) -> np.ndarray:
    """Centered moving average along the last axis, truncated at the edges.

    The effective window shrinks near the boundaries instead of padding, so a
    unit impulse in the interior maps to exactly ``window`` samples of
    1/window.
    """
    if window < 1:
        raise ContractError("window must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    half_left = window // 2
    half_right = window - half_left - 1
    cs = np.concatenate([np.zeros(x.shape[:-1] + (1,)), np.cumsum(x, axis=-1)], axis=-1)
    t = np.arange(n)
    lo = np.maximum(t - half_left, 0)
    hi = np.minimum(t + half_right + 1, n)
    return (cs[..., hi] - cs[..., lo]) / (hi - lo)


def compute_analysis(wave: MultichannelWaveform, params: SaccParams,
                     cfg: StftConfig = StftConfig(),
                     smoothing_frames: int = TRACE_SMOOTHING_FRAMES) -> AnalysisBundle:
    """Run the combinator on one utterance and collect its intermediates."""
    if wave.n_channels < 2:
        raise ContractError("analysis needs at least 2 channels")
    feats = magnitude_and_normalize(stft(wave, cfg))
    acts = forward(feats, params)
    att_mean = acts.att.mean(axis=0)
    att_mean = att_mean - np.diag(np.diag(att_mean))
    traces = moving_average(acts.w[:, :, 0].T, smoothing_frames)
    return AnalysisBundle(
        norm_logmag_per_channel=np.transpose(feats.normalized_logmag, (1, 0, 2)),
        time_avg_attention=att_mean,
        weight_traces=traces,
    )


def write_bundle(bundle: AnalysisBundle, out_dir) -> None:
    """Write the bundle as diffable CSV files plus a small JSON descriptor."""
    os.makedirs(out_dir, exist_ok=True)
    np.savetxt(os.path.join(out_dir, "time_avg_attention.csv"),
               bundle.time_avg_attention, delimiter=",", fmt="%.10g")
    np.savetxt(os.path.join(out_dir, "weight_traces.csv"),
               bundle.weight_traces.T, delimiter=",", fmt="%.10g",
               header=",".join(f"ch{c}" for c in range(bundle.weight_traces.shape[0])),
               comments="")
    for c in range(bundle.norm_logmag_per_channel.shape[0]):
        np.savetxt(os.path.join(out_dir, f"norm_logmag_ch{c}.csv"),
                   bundle.norm_logmag_per_channel[c], delimiter=",", fmt="%.10g")
    c, t, f = bundle.norm_logmag_per_channel.shape
    with open(os.path.join(out_dir, "bundle.json"), "w") as fh:
        json.dump({
            "n_channels": c,
            "n_frames": t,
            "n_bins": f,
            "trace_smoothing_frames": TRACE_SMOOTHING_FRAMES,
            "files": {
                "time_avg_attention": "time_avg_attention.csv",
                "weight_traces": "weight_traces.csv",
                "norm_logmag": [f"norm_logmag_ch{i}.csv" for i in range(c)],
            },
        }, fh, sort_keys=True, indent=2)
        fh.write("\n")
