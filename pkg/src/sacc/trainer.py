"""Desk-scale surrogate training and evaluation for the channel combinator.

The combinator is trained to regress the log-Mel features of its output onto
those of the direct-path clean reference (L1 or L2), optimized with Adam at a
constant learning rate and utterance-level batches. This keeps the
"frontend output feeds the log-Mel feature pipeline" contract while staying
runnable on a laptop; no ASR backend or WER is involved.

Also provides a finite-difference gradient checker over the full pipeline and
a multi-frontend signal-level evaluation (log-Mel distortion, output SNR).
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass

import numpy as np

from .audio_io import DatasetManifest, MultichannelWaveform, read_wav
from .beamformers import delay_and_sum, mvdr_enhance, select_channel
from .combinator import (
    SaccParams,
    forward,
    pipeline_backward,
    pipeline_forward,
    save_params,
    zeros_like_params,
)
from .errors import ConfigError, ContractError, TrainingDivergedError
from .spectral import (
    LOG_FLOOR,
    MelConfig,
    StftConfig,
    log_mel,
    magnitude_and_normalize,
    mel_filterbank,
    stft,
)

LOG_TO_DB = 20.0 / math.log(10.0)  # amplitude-log to decibels


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 4
    max_epochs: int = 30
    patience: int = 5
    loss: str = "l1_logmel"
    seed: int = 0
    frames_per_clip: int = 300
    max_steps: int | None = None
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.lr < 0:
            raise ConfigError("lr must be >= 0")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.loss not in ("l1_logmel", "l2_logmel"):
            raise ConfigError(f"unknown loss {self.loss!r}")


def load_train_config(path=None) -> TrainConfig:
    if path is None:
        return TrainConfig()
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read train config {path}: {exc}") from exc
    known = {f.name for f in TrainConfig.__dataclass_fields__.values()}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
    return TrainConfig(**raw)


@dataclass
class TrainReport:
    train_losses: list
    val_losses: list
    best_epoch: int
    checkpoint_path: str
    stopped_early: bool = False

    def to_json(self) -> str:
        return json.dumps({
            "train_losses": self.train_losses,
            "val_losses": self.val_losses,
            "best_epoch": self.best_epoch,
            "checkpoint_path": self.checkpoint_path,
            "stopped_early": self.stopped_early,
        }, sort_keys=True, indent=2)


def surrogate_loss(output_logmel: np.ndarray, reference_logmel: np.ndarray, kind: str):
    """Mean absolute/squared error over (T, M) features with its exact gradient."""
    a = np.asarray(output_logmel, dtype=np.float64)
    b = np.asarray(reference_logmel, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError(f"shape mismatch {a.shape} vs {b.shape}")
    diff = a - b
    n = diff.size
    if kind == "l2_logmel":
        return float(np.mean(diff**2)), 2.0 * diff / n
    if kind == "l1_logmel":
        return float(np.mean(np.abs(diff))), np.sign(diff) / n
    raise ContractError(f"unknown loss kind {kind!r}")


@dataclass
class AdamState:
    m: SaccParams
    v: SaccParams
    t: int = 0

    @classmethod
    def for_params(cls, params: SaccParams) -> "AdamState":
        return cls(m=zeros_like_params(params), v=zeros_like_params(params))


def adam_step(params: SaccParams, grads: SaccParams, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """In-place Adam update; a zero gradient (or lr=0) leaves params unchanged."""
    state.t += 1
    for name in ("wq", "bq", "wk", "bk", "wv", "bv"):
        g = getattr(grads, name)
        m = getattr(state.m, name)
        v = getattr(state.v, name)
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g**2
        m_hat = m / (1.0 - beta1**state.t)
        v_hat = v / (1.0 - beta2**state.t)
        getattr(params, name)[...] -= lr * m_hat / (np.sqrt(v_hat) + eps)


def _split_bucket(scene_id: str) -> int:
    digest = hashlib.sha256(scene_id.encode()).digest()
    return int.from_bytes(digest[:4], "little") % 1000


@dataclass
class _Clip:
    wave: MultichannelWaveform
    target: np.ndarray
    scene_id: str


def _load_clips(manifest: DatasetManifest, cfg: TrainConfig, stft_cfg: StftConfig,
                mel: MelConfig) -> list:
    max_samples = stft_cfg.win_samples + (cfg.frames_per_clip - 1) * stft_cfg.hop_samples
    clips = []
    for entry in manifest.entries:
        mix = read_wav(manifest.resolve(entry.mixture_path))
        ref = read_wav(manifest.resolve(entry.clean_reference_path))
        n = min(mix.n_samples, ref.n_samples, max_samples)
        wave = MultichannelWaveform(mix.samples[:n], mix.sample_rate_hz)
        ref_mag = np.abs(stft(MultichannelWaveform(ref.samples[:n], ref.sample_rate_hz),
                              stft_cfg).bins[:, 0, :])
        target = _logmel_features(ref_mag, mel, stft_cfg.sample_rate_hz, normalize=True)
        clips.append(_Clip(wave=wave, target=target, scene_id=entry.scene_id))
    return clips


def _logmel_features(mag: np.ndarray, mel: MelConfig, sample_rate_hz: int,
                     normalize: bool) -> np.ndarray:
    if normalize:
        return log_mel(mag, mel, sample_rate_hz)
    filt = mel_filterbank(mel, mag.shape[1], sample_rate_hz)
    return np.log(np.maximum(mag @ filt.T, LOG_FLOOR))


def _clip_loss_and_grads(clip: _Clip, params: SaccParams, cfg: TrainConfig,
                         stft_cfg: StftConfig, mel: MelConfig, want_grads: bool):
    feats, cache = pipeline_forward(clip.wave, params, stft_cfg, mel)
    loss, d_feats = surrogate_loss(feats, clip.target, cfg.loss)
    if not want_grads:
        return loss, None
    return loss, pipeline_backward(params, cache, d_feats)


def train(manifest: DatasetManifest, cfg: TrainConfig, init: SaccParams,
          checkpoint_path: str, stft_cfg: StftConfig = StftConfig(),
          mel: MelConfig = MelConfig()) -> TrainReport:
    """Adam training with early stopping; persists the best-validation params.

    Deterministic for a fixed seed and serial execution: batches are visited
    in a seed-derived order and gradients are accumulated in that order.
    Scenes are split ~(1 - val_fraction)/val_fraction by a stable hash of
    scene_id; degenerate splits fall back to training and validating on all.
    """
    if not manifest.entries:
        raise ConfigError("empty manifest")
    clips = _load_clips(manifest, cfg, stft_cfg, mel)
    cut = int(round(cfg.val_fraction * 1000))
    train_clips = [c for c in clips if _split_bucket(c.scene_id) >= cut]
    val_clips = [c for c in clips if _split_bucket(c.scene_id) < cut]
    if not train_clips or not val_clips:
        train_clips = clips
        val_clips = clips

    params = init.copy()
    state = AdamState.for_params(params)
    rng = np.random.default_rng(cfg.seed)
    best_val = math.inf
    best_epoch = -1
    best_params = params.copy()
    train_losses: list = []
    val_losses: list = []
    steps = 0
    stopped_early = False

    for epoch in range(cfg.max_epochs):
        order = rng.permutation(len(train_clips))
        epoch_losses = []
        for b0 in range(0, len(order), cfg.batch_size):
            batch = order[b0 : b0 + cfg.batch_size]
            grads = zeros_like_params(params)
            batch_loss = 0.0
            for idx in batch:
                loss, g = _clip_loss_and_grads(train_clips[idx], params, cfg, stft_cfg,
                                               mel, want_grads=True)
                if not math.isfinite(loss):
                    raise TrainingDivergedError(
                        f"non-finite loss at epoch {epoch}, batch starting at {b0} "
                        f"(scene {train_clips[idx].scene_id})", epoch, b0)
                batch_loss += loss
                for name in ("wq", "bq", "wk", "bk", "wv", "bv"):
                    getattr(grads, name)[...] += getattr(g, name)
            scale = 1.0 / len(batch)
            for name in ("wq", "bq", "wk", "bk", "wv", "bv"):
                getattr(grads, name)[...] *= scale
            epoch_losses.append(batch_loss * scale)
            adam_step(params, grads, state, cfg.lr)
            steps += 1
            if cfg.max_steps is not None and steps >= cfg.max_steps:
                break
        train_losses.append(float(np.mean(epoch_losses)))

        val = float(np.mean([
            _clip_loss_and_grads(c, params, cfg, stft_cfg, mel, want_grads=False)[0]
            for c in val_clips
        ]))
        val_losses.append(val)
        if val < best_val:
            best_val = val
            best_epoch = epoch
            best_params = params.copy()
        elif epoch - best_epoch >= cfg.patience:
            stopped_early = True
            break
        if cfg.max_steps is not None and steps >= cfg.max_steps:
            break

    save_params(best_params, checkpoint_path)
    return TrainReport(train_losses=train_losses, val_losses=val_losses,
                       best_epoch=best_epoch, checkpoint_path=str(checkpoint_path),
                       stopped_early=stopped_early)


@dataclass(frozen=True)
class ProbeSpec:
    """A self-contained random utterance + target for gradient checking."""

    seed: int = 0
    n_channels: int = 4
    n_frames: int = 10
    stft_cfg: StftConfig = StftConfig(win_ms=4.0, hop_ms=2.0, fft_size=64)
    mel: MelConfig = MelConfig(n_filters=8)
    loss: str = "l2_logmel"
    input_scale: float = 0.3

    def make(self):
        rng = np.random.default_rng(self.seed)
        n = self.stft_cfg.win_samples + (self.n_frames - 1) * self.stft_cfg.hop_samples
        wave = MultichannelWaveform(
            self.input_scale * rng.standard_normal((n, self.n_channels)),
            self.stft_cfg.sample_rate_hz)
        target = rng.standard_normal((self.n_frames, self.mel.n_filters))
        return wave, target


def grad_check(params: SaccParams, probe: ProbeSpec = ProbeSpec(),
               n_coords: int = 20, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    Checks n_coords random parameter coordinates through the full
    waveform -> features -> surrogate-loss pipeline in double precision.
    Coordinates where both sides are ~0 contribute zero error.
    """
    wave, target = probe.make()
    feats, cache = pipeline_forward(wave, params, probe.stft_cfg, probe.mel)
    _, d_feats = surrogate_loss(feats, target, probe.loss)
    analytic = pipeline_backward(params, cache, d_feats).flat()

    rng = np.random.default_rng(probe.seed + 1)
    coords = rng.choice(params.param_count, size=min(n_coords, params.param_count),
                        replace=False)
    worst = 0.0
    for coord in coords:
        worst = max(worst, _fd_rel_error(params, probe, int(coord), h,
                                         float(analytic[coord])))
    return worst


def _fd_rel_error(params: SaccParams, probe: ProbeSpec, coord: int, h: float,
                  analytic: float) -> float:
    wave, target = probe.make()

    def loss_at(delta: float) -> float:
        p = params.copy()
        flat = p.flat()
        p.set_flat_coord(coord, float(flat[coord]) + delta)
        feats, _ = pipeline_forward(wave, p, probe.stft_cfg, probe.mel)
        return surrogate_loss(feats, target, probe.loss)[0]

    fd = (loss_at(+h) - loss_at(-h)) / (2.0 * h)
    denom = max(abs(analytic), abs(fd))
    if denom < 1e-8:
        return 0.0
    return abs(analytic - fd) / denom


@dataclass(frozen=True)
class FrontendSpec:
    """One comparison row: kind in {clean, sdm, rdm, mvdr, das, sacc}."""

    kind: str
    label: str = ""
    params: SaccParams | None = None

    @property
    def name(self) -> str:
        return self.label or self.kind


@dataclass
class MetricRow:
    label: str
    param_count: int | None
    logmel_distortion_db: float
    output_snr_db: float
    by_position: dict
    n_utterances: int


@dataclass
class MetricTable:
    rows: list
    n_skipped: int = 0

    def to_json(self) -> str:
        return json.dumps([{
            "frontend": r.label,
            "params": r.param_count,
            "logmel_distortion_db": r.logmel_distortion_db,
            "output_snr_db": r.output_snr_db,
            "by_position": r.by_position,
            "n_utterances": r.n_utterances,
        } for r in self.rows], sort_keys=True, indent=2)

    def to_csv(self) -> str:
        positions = sorted({p for r in self.rows for p in r.by_position})
        header = ["frontend", "params", "logmel_distortion_db", "output_snr_db"]
        header += [f"distortion_db_pos{p}" for p in positions]
        lines = [",".join(header)]
        for r in self.rows:
            cells = [r.label, str(r.param_count) if r.param_count is not None else "-",
                     f"{r.logmel_distortion_db:.6f}", f"{r.output_snr_db:.6f}"]
            cells += [f"{r.by_position[p]:.6f}" if p in r.by_position else ""
                      for p in positions]
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"


SNR_CAP_DB = 300.0


def _frontend_magnitude(kind: str, mixture: MultichannelWaveform, fe: FrontendSpec,
                        stft_cfg: StftConfig) -> np.ndarray:
    if kind in ("sdm", "rdm"):
        # rdm degrades to the middle channel at test time, identical to sdm.
        chan = select_channel(mixture, kind, test_mode=True)
        return np.abs(stft(chan, stft_cfg).bins[:, 0, :])
    spec = stft(mixture, stft_cfg)
    if kind == "mvdr":
        return np.abs(mvdr_enhance(spec))
    if kind == "das":
        return np.abs(delay_and_sum(spec, np.zeros(mixture.n_channels)))
    if kind == "sacc":
        if fe.params is None:
            raise ConfigError(f"frontend {fe.name!r} needs parameters")
        return forward(magnitude_and_normalize(spec), fe.params).combined
    raise ConfigError(f"unknown frontend kind {kind!r}")


def _logmel_distortion_db(out_mag: np.ndarray, ref_mag: np.ndarray, mel: MelConfig,
                          sample_rate_hz: int) -> float:
    """Gain-invariant RMS log-Mel distortion in dB (global offset removed)."""
    t = min(out_mag.shape[0], ref_mag.shape[0])
    filt = mel_filterbank(mel, out_mag.shape[1], sample_rate_hz)
    log_out = np.log(np.maximum(out_mag[:t] @ filt.T, LOG_FLOOR))
    log_ref = np.log(np.maximum(ref_mag[:t] @ filt.T, LOG_FLOOR))
    delta = log_out - log_ref
    delta -= delta.mean()
    return LOG_TO_DB * float(np.sqrt(np.mean(delta**2)))


def _output_snr_db(out_mag: np.ndarray, ref_mag: np.ndarray) -> float:
    """Scale-invariant SNR of the output magnitude against the reference."""
    t = min(out_mag.shape[0], ref_mag.shape[0])
    out = out_mag[:t].ravel()
    ref = ref_mag[:t].ravel()
    denom = float(out @ out)
    if denom <= 0.0:
        return -SNR_CAP_DB
    alpha = float(ref @ out) / denom
    err = float(np.sum((alpha * out - ref) ** 2))
    sig = float(ref @ ref)
    if err <= sig * 1e-30:
        return SNR_CAP_DB
    return float(np.clip(10.0 * math.log10(sig / err), -SNR_CAP_DB, SNR_CAP_DB))


def evaluate(manifest: DatasetManifest, frontends: list,
             stft_cfg: StftConfig = StftConfig(), mel: MelConfig = MelConfig()) -> MetricTable:
    """Signal-level comparison of frontends over a manifest.

    Per frontend: mean gain-invariant log-Mel distortion to the clean
    reference (dB), mean scale-invariant output SNR (dB), and a per-position
    distortion breakdown. Entries whose reference is missing are skipped.
    """
    per_fe: dict = {fe.name: {"dist": [], "snr": [], "pos": {}} for fe in frontends}
    n_skipped = 0
    for entry in manifest.entries:
        mix_path = manifest.resolve(entry.mixture_path)
        ref_path = manifest.resolve(entry.clean_reference_path)
        if not os.path.exists(ref_path) or not os.path.exists(mix_path):
            n_skipped += 1
            continue
        mixture = read_wav(mix_path)
        ref = read_wav(ref_path)
        n = min(mixture.n_samples, ref.n_samples)
        mixture = MultichannelWaveform(mixture.samples[:n], mixture.sample_rate_hz)
        ref_mag = np.abs(stft(MultichannelWaveform(ref.samples[:n, :1], ref.sample_rate_hz),
                              stft_cfg).bins[:, 0, :])
        for fe in frontends:
            if fe.kind == "clean":
                out_mag = ref_mag
            else:
                out_mag = _frontend_magnitude(fe.kind, mixture, fe, stft_cfg)
            dist = _logmel_distortion_db(out_mag, ref_mag, mel, stft_cfg.sample_rate_hz)
            snr = _output_snr_db(out_mag, ref_mag)
            bucket = per_fe[fe.name]
            bucket["dist"].append(dist)
            bucket["snr"].append(snr)
            bucket["pos"].setdefault(entry.position_id, []).append(dist)

    rows = []
    for fe in frontends:
        bucket = per_fe[fe.name]
        if not bucket["dist"]:
            continue
        rows.append(MetricRow(
            label=fe.name,
            param_count=fe.params.param_count if fe.params is not None else None,
            logmel_distortion_db=float(np.mean(bucket["dist"])),
            output_snr_db=float(np.mean(bucket["snr"])),
            by_position={p: float(np.mean(v)) for p, v in sorted(bucket["pos"].items())},
            n_utterances=len(bucket["dist"]),
        ))
    return MetricTable(rows=rows, n_skipped=n_skipped)
