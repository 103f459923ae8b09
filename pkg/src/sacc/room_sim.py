"""Training-data simulation: image-method RIRs, noise mixing, augmentation.

Scenes place an 8-microphone uniform linear array (33 mm spacing) and an
omnidirectional source in a randomly sized room. RIRs come from the image
method with uniform wall absorption derived from the target T60 via Eyring's
formula, with fractional delays realized by a windowed-sinc kernel. Mixtures
add ambient noise at a requested SNR, per-microphone white self-noise, random
inter-mic gain offsets, and an overall peak-level augmentation.

Every operation is a pure function of (inputs, seed): scene k of a dataset is
fully determined by the dataset seed and k, so parallel generation cannot
change the output.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np
from scipy.signal import fftconvolve

from .audio_io import (
    DatasetManifest,
    ManifestEntry,
    MultichannelWaveform,
    read_wav,
    save_manifest,
    write_wav,
)
from .errors import ConfigError, ContractError, GeometryError

SAMPLE_RATE = 16000
SPEED_OF_SOUND_M_S = 343.0
N_MICS = 8
MIC_SPACING_M = 0.033
WALL_MARGIN_M = 0.1
SINC_KERNEL_HALF_WIDTH = 20  # samples; raised-cosine windowed sinc support

NOISE_KINDS = ("pink", "babble", "fan")


@dataclass(frozen=True)
class RoomProfile:
    """Sampling ranges for scene generation."""

    dims_min_m: tuple = (4.0, 3.0, 2.5)
    dims_max_m: tuple = (8.0, 6.0, 3.2)
    t60_range_s: tuple = (0.27, 0.79)
    wall_margin_m: float = WALL_MARGIN_M
    mic_spacing_m: float = MIC_SPACING_M
    n_mics: int = N_MICS


def load_room_profile(path=None) -> RoomProfile:
    """Room profile from a JSON config file; defaults when path is None."""
    if path is None:
        return RoomProfile()
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read room profile {path}: {exc}") from exc
    known = {f.name for f in RoomProfile.__dataclass_fields__.values()}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown room profile keys: {sorted(unknown)}")
    for key in ("dims_min_m", "dims_max_m", "t60_range_s"):
        if key in raw:
            raw[key] = tuple(raw[key])
    return RoomProfile(**raw)


@dataclass
class SceneSpec:
    """One sampled room + array + source layout."""

    room_dims_m: np.ndarray
    t60_s: float
    array_center_m: np.ndarray
    array_axis: np.ndarray
    source_pos_m: np.ndarray
    seed: int
    mic_spacing_m: float = MIC_SPACING_M
    n_mics: int = N_MICS

    def mic_positions(self) -> np.ndarray:
        """(n_mics, 3) positions along the array axis, centered on the array."""
        offsets = (np.arange(self.n_mics) - (self.n_mics - 1) / 2.0) * self.mic_spacing_m
        return self.array_center_m[None, :] + offsets[:, None] * self.array_axis[None, :]


@dataclass
class RirSet:
    """Impulse responses (n_mics, L) at 16 kHz, plus their direct-path part."""

    rirs: np.ndarray
    direct_rirs: np.ndarray
    sample_rate_hz: int = SAMPLE_RATE


@dataclass
class MixSpec:
    """Mixing/augmentation parameters; None disables the corresponding stage."""

    noise_snr_db: float | None
    gain_offsets_db: np.ndarray
    level_dbfs: float | None
    self_noise_snr_db: float | None = 45.0
    noise_kind: str = "pink"


@dataclass
class RenderedScene:
    mixture: MultichannelWaveform
    clean_ref: MultichannelWaveform
    speech_component: np.ndarray  # (M, C), shares all scaling with mixture
    noise_component: np.ndarray  # (M, C)
    noise_looped: bool = False


def _scene_rng(seed: int, *key) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(key)))


def sample_scene(seed: int, profile: RoomProfile = RoomProfile()) -> SceneSpec:
    """Draw a feasible scene; rejection-samples positions, at most 100 tries."""
    rng = _scene_rng(seed, 0)
    dims = rng.uniform(profile.dims_min_m, profile.dims_max_m)
    t60 = rng.uniform(*profile.t60_range_s)
    margin = profile.wall_margin_m
    half_aperture = (profile.n_mics - 1) / 2.0 * profile.mic_spacing_m
    for _ in range(100):
        azimuth = rng.uniform(0.0, 2.0 * np.pi)
        axis = np.array([np.cos(azimuth), np.sin(azimuth), 0.0])
        lo = np.full(3, margin)
        hi = dims - margin
        if np.any(hi <= lo):
            break
        center = rng.uniform(lo, hi)
        source = rng.uniform(lo, hi)
        scene = SceneSpec(room_dims_m=dims, t60_s=float(t60), array_center_m=center,
                          array_axis=axis, source_pos_m=source, seed=int(seed),
                          mic_spacing_m=profile.mic_spacing_m, n_mics=profile.n_mics)
        mics = scene.mic_positions()
        if np.any(mics < margin) or np.any(mics > dims[None, :] - margin):
            continue
        dists = np.linalg.norm(mics - source[None, :], axis=1)
        if np.min(dists) < max(0.1, half_aperture / 2.0):
            continue  # source essentially on top of the array
        return scene
    raise ConfigError(
        f"no feasible scene for profile {profile} after 100 attempts (room too small?)"
    )


def eyring_absorption(room_dims_m: np.ndarray, t60_s: float) -> float:
    """Uniform wall absorption that realizes t60 in the given room (Eyring)."""
    lx, ly, lz = room_dims_m
    volume = lx * ly * lz
    surface = 2.0 * (lx * ly + lx * lz + ly * lz)
    alpha = 1.0 - math.exp(-0.161 * volume / (surface * t60_s))
    if not 0.0 < alpha <= 1.0:
        raise GeometryError(
            f"absorption {alpha:.3f} outside (0, 1] for dims {room_dims_m}, t60 {t60_s}"
        )
    return alpha


def rir_length_samples(t60_s: float, sample_rate_hz: int = SAMPLE_RATE) -> int:
    return int(math.ceil(1.2 * t60_s * sample_rate_hz))


def _image_sources(scene: SceneSpec, max_order: int):
    """All image positions and reflection orders within the order budget.

    Image (r, p) per axis sits at (1 - 2p) * (source + 2 r dims) and
    contributes |r + p| + |r| reflections on that axis pair of walls.
    """
    axis_candidates = []
    r_max = (max_order + 1) // 2 + 1
    for dim in range(3):
        rs, ps = np.meshgrid(np.arange(-r_max, r_max + 1), np.array([0, 1]), indexing="ij")
        rs, ps = rs.ravel(), ps.ravel()
        order = np.abs(rs + ps) + np.abs(rs)
        keep = order <= max_order
        coord = (1 - 2 * ps[keep]) * (
            scene.source_pos_m[dim] + 2 * rs[keep] * scene.room_dims_m[dim])
        axis_candidates.append((coord, order[keep]))
    cx, ox = axis_candidates[0]
    cy, oy = axis_candidates[1]
    cz, oz = axis_candidates[2]
    gx, gy, gz = np.meshgrid(np.arange(cx.size), np.arange(cy.size), np.arange(cz.size),
                             indexing="ij")
    gx, gy, gz = gx.ravel(), gy.ravel(), gz.ravel()
    orders = ox[gx] + oy[gy] + oz[gz]
    keep = orders <= max_order
    positions = np.stack([cx[gx[keep]], cy[gy[keep]], cz[gz[keep]]], axis=1)
    return positions, orders[keep]


def _splat_arrivals(length: int, delays: np.ndarray, amps: np.ndarray) -> np.ndarray:
    """Accumulate raised-cosine windowed-sinc arrivals onto a sample grid."""
    offsets = np.arange(-SINC_KERNEL_HALF_WIDTH, SINC_KERNEL_HALF_WIDTH + 1)
    tw_samples = 2 * SINC_KERNEL_HALF_WIDTH
    grid = np.floor(delays)[:, None].astype(np.int64) + offsets[None, :]
    t_rel = grid - delays[:, None]  # samples from the exact arrival time
    kernel = 0.5 * (1.0 + np.cos(2.0 * np.pi * t_rel / tw_samples)) * np.sinc(0.9 * t_rel)
    kernel *= np.abs(t_rel) <= SINC_KERNEL_HALF_WIDTH
    values = amps[:, None] * kernel
    valid = (grid >= 0) & (grid < length)
    return np.bincount(grid[valid], weights=values[valid], minlength=length)[:length]


def _accumulate_rirs(scene: SceneSpec, beta: float, max_order: int,
                     mic_positions: np.ndarray):
    fs = SAMPLE_RATE
    length = rir_length_samples(scene.t60_s, fs)
    positions, orders = _image_sources(scene, max_order)
    amps0 = beta**orders
    max_delay = length - 1 + SINC_KERNEL_HALF_WIDTH

    rirs = np.zeros((mic_positions.shape[0], length))
    direct = np.zeros_like(rirs)
    for m in range(mic_positions.shape[0]):
        dist = np.linalg.norm(positions - mic_positions[m][None, :], axis=1)
        delay = dist * fs / SPEED_OF_SOUND_M_S
        sel = delay <= max_delay
        amps = amps0[sel] / (4.0 * np.pi * dist[sel])
        rirs[m] = _splat_arrivals(length, delay[sel], amps)
        d_rows = orders[sel] == 0
        direct[m] = _splat_arrivals(length, delay[sel][d_rows], amps[d_rows])
    return rirs, direct


def image_method_rir(scene: SceneSpec, max_order: int = 20,
                     absorption: float | None = None) -> RirSet:
    """Image-method RIRs for every microphone of the scene's array.

    Uniform reflection coefficient sqrt(1 - alpha) on all six walls, with
    alpha from Eyring's formula unless given explicitly. Each arrival is
    splatted with a raised-cosine windowed sinc so fractional delays land at
    the exact geometric time.
    """
    if max_order < 0:
        raise ContractError("max_order must be >= 0")
    alpha = eyring_absorption(scene.room_dims_m, scene.t60_s) if absorption is None \
        else absorption
    if not 0.0 < alpha <= 1.0:
        raise GeometryError(f"absorption {alpha} outside (0, 1]")
    beta = math.sqrt(1.0 - alpha)
    rirs, direct = _accumulate_rirs(scene, beta, max_order, scene.mic_positions())
    return RirSet(rirs=rirs, direct_rirs=direct, sample_rate_hz=SAMPLE_RATE)


def adaptive_max_order(scene: SceneSpec) -> int:
    """Reflection budget populating the decay out to roughly -40 dB.

    Uses the mean collision count c*t*S/(4V) at 0.65*t60 plus 1.5 standard
    deviations; later arrivals sit below the Schroeder fit region and under
    the truncation floor of the energy integral.
    """
    lx, ly, lz = scene.room_dims_m
    volume = lx * ly * lz
    surface = 2.0 * (lx * ly + lx * lz + ly * lz)
    n_mean = SPEED_OF_SOUND_M_S * 0.65 * scene.t60_s * surface / (4.0 * volume)
    return max(20, int(math.ceil(n_mean + 1.5 * math.sqrt(n_mean))))


def _schroeder_t60_estimate(rir: np.ndarray, fs: int = SAMPLE_RATE) -> float:
    """T20-style fit (-5..-25 dB) on the backward-integrated energy decay."""
    energy = rir**2
    sch = np.cumsum(energy[::-1])[::-1]
    total = sch[0]
    if total <= 0.0:
        return math.nan
    sch_db = 10.0 * np.log10(np.maximum(sch / total, 1e-30))
    idx = np.where((sch_db <= -5.0) & (sch_db >= -25.0))[0]
    if idx.size < 8:
        return math.nan
    t = idx / fs
    design = np.vstack([t, np.ones_like(t)]).T
    slope = np.linalg.lstsq(design, sch_db[idx], rcond=None)[0][0]
    if slope >= 0.0:
        return math.nan
    return -60.0 / slope


def calibrated_rir(scene: SceneSpec, max_order: int | None = None,
                   tolerance: float = 0.04, max_iters: int = 4) -> RirSet:
    """Image-method RIRs whose realized Schroeder T60 matches scene.t60_s.

    With uniform wall reflectivity the realized decay deviates from Eyring's
    prediction by tens of percent depending on room proportions, so the
    absorption is refined by a fixed-point iteration on the reference
    microphone's measured decay (rate scales with -log(1 - alpha)).
    """
    if max_order is None:
        max_order = adaptive_max_order(scene)
    ref = scene.mic_positions()[scene.n_mics // 2][None, :]
    alpha = eyring_absorption(scene.room_dims_m, scene.t60_s)
    for _ in range(max_iters):
        probe, _ = _accumulate_rirs(scene, math.sqrt(1.0 - alpha), max_order, ref)
        est = _schroeder_t60_estimate(probe[0])
        if not math.isfinite(est):
            break
        ratio = est / scene.t60_s
        if abs(ratio - 1.0) <= tolerance:
            break
        alpha = float(np.clip(1.0 - (1.0 - alpha) ** ratio, 0.005, 0.999))
    return image_method_rir(scene, max_order=max_order, absorption=alpha)


def _power(x: np.ndarray) -> float:
    return float(np.mean(np.square(x)))


def _db_to_amplitude(db: float) -> float:
    return 10.0 ** (db / 20.0)


def render_mixture(clean: MultichannelWaveform, rirs: RirSet,
                   noise: MultichannelWaveform | None, mix: MixSpec, seed: int,
                   reference_index: int = 3) -> RenderedScene:
    """Convolve, add noises, apply gain offsets and level augmentation.

    The ambient noise is scaled so that reverberant-speech power over total
    additive-noise power at the reference microphone equals noise_snr_db
    (self-noise included in the denominator). The clean reference is the
    direct-path-only convolution at the reference microphone, unscaled.
    """
    if clean.n_channels != 1:
        raise ContractError("clean input must be single-channel")
    if clean.sample_rate_hz != rirs.sample_rate_hz:
        raise ContractError("clean sample rate does not match the RIRs")
    x = clean.samples[:, 0]
    if not np.any(x):
        raise ContractError("silent clean input: SNR is undefined")
    rng = _scene_rng(seed, 7)

    speech = fftconvolve(x[None, :], rirs.rirs, axes=1).T  # (M, C)
    n_out, c_out = speech.shape
    clean_ref = fftconvolve(x, rirs.direct_rirs[reference_index])[:, None]

    noise_sum = np.zeros_like(speech)
    looped = False
    p_speech_ref = _power(speech[:, reference_index])

    self_noise = np.zeros_like(speech)
    if mix.self_noise_snr_db is not None:
        for c in range(c_out):
            target = _power(speech[:, c]) * 10.0 ** (-mix.self_noise_snr_db / 10.0)
            white = rng.standard_normal(n_out)
            self_noise[:, c] = white * math.sqrt(target / _power(white))
        noise_sum += self_noise

    if mix.noise_snr_db is not None:
        if noise is None:
            raise ContractError("noise_snr_db set but no noise waveform given")
        amb = noise.samples
        if amb.shape[1] == 1 and c_out > 1:
            # Decorrelate a mono noise by large circular shifts per channel.
            shift = amb.shape[0] // c_out
            amb = np.stack([np.roll(amb[:, 0], c * shift) for c in range(c_out)], axis=1)
        elif amb.shape[1] != c_out:
            raise ContractError(f"noise must have 1 or {c_out} channels, got {amb.shape[1]}")
        if amb.shape[0] < n_out:
            reps = int(math.ceil(n_out / amb.shape[0]))
            amb = np.tile(amb, (reps, 1))
            looped = True
        start = int(rng.integers(0, amb.shape[0] - n_out + 1))
        amb = amb[start : start + n_out]
        p_total_target = p_speech_ref * 10.0 ** (-mix.noise_snr_db / 10.0)
        p_self_ref = _power(self_noise[:, reference_index])
        p_amb_needed = p_total_target - p_self_ref
        if p_amb_needed <= 0.0:
            raise ConfigError(
                f"requested SNR {mix.noise_snr_db} dB unreachable under "
                f"{mix.self_noise_snr_db} dB self-noise"
            )
        p_amb = _power(amb[:, reference_index])
        if p_amb <= 0.0:
            raise ContractError("ambient noise is silent at the reference channel")
        noise_sum += amb * math.sqrt(p_amb_needed / p_amb)

    gains = _db_to_amplitude(np.asarray(mix.gain_offsets_db, dtype=np.float64))
    if gains.shape != (c_out,):
        raise ContractError(f"need one gain offset per channel, got shape {gains.shape}")
    speech = speech * gains[None, :]
    noise_sum = noise_sum * gains[None, :]

    if mix.level_dbfs is not None:
        peak = np.max(np.abs(speech + noise_sum))
        if peak <= 0.0:
            raise ContractError("cannot level-normalize an all-zero mixture")
        scale = _db_to_amplitude(mix.level_dbfs) / peak
        speech = speech * scale
        noise_sum = noise_sum * scale

    mixture = MultichannelWaveform(speech + noise_sum, rirs.sample_rate_hz)
    return RenderedScene(
        mixture=mixture,
        clean_ref=MultichannelWaveform(clean_ref, rirs.sample_rate_hz),
        speech_component=speech,
        noise_component=noise_sum,
        noise_looped=looped,
    )


def sample_mix_spec(seed: int, n_channels: int = N_MICS) -> MixSpec:
    """Draw the augmentation recipe: SNR 3-25 dB, gains 0.1-2 dB either sign,
    level -15 to -1 dBFS, 45 dB self-noise."""
    rng = _scene_rng(seed, 3)
    snr = float(rng.uniform(3.0, 25.0))
    magnitudes = rng.uniform(0.1, 2.0, size=n_channels)
    signs = rng.choice([-1.0, 1.0], size=n_channels)
    level = float(rng.uniform(-15.0, -1.0))
    kind = str(rng.choice(NOISE_KINDS))
    return MixSpec(noise_snr_db=snr, gain_offsets_db=magnitudes * signs,
                   level_dbfs=level, self_noise_snr_db=45.0, noise_kind=kind)


def synth_speech_like(seed: int, duration_s: float = 2.5,
                      sample_rate_hz: int = SAMPLE_RATE) -> MultichannelWaveform:
    """Deterministic speech-like test signal: pitched harmonics with syllabic
    amplitude modulation and a soft noise floor."""
    rng = _scene_rng(seed, 11)
    n = int(duration_s * sample_rate_hz)
    t = np.arange(n) / sample_rate_hz
    f0 = 110.0 + 25.0 * np.sin(2.0 * np.pi * 0.6 * t + rng.uniform(0, 2 * np.pi))
    phase = 2.0 * np.pi * np.cumsum(f0) / sample_rate_hz
    x = np.zeros(n)
    for h in range(1, 13):
        x += (1.0 / h) * np.sin(h * phase + rng.uniform(0, 2 * np.pi))
    syllabic = 0.3 + 0.7 * (0.5 + 0.5 * np.sin(2.0 * np.pi * 3.1 * t
                                               + rng.uniform(0, 2 * np.pi))) ** 2
    x *= syllabic
    x += 0.02 * rng.standard_normal(n)
    x *= 0.5 / np.max(np.abs(x))
    return MultichannelWaveform(x[:, None], sample_rate_hz)


def synth_noise(kind: str, n_samples: int, n_channels: int, seed: int,
                sample_rate_hz: int = SAMPLE_RATE) -> MultichannelWaveform:
    """Spectrally shaped noise presets: pink (ambient-like), speech-shaped
    babble-like, and low-frequency-peaked fan-like; channels independent."""
    if kind not in NOISE_KINDS:
        raise ConfigError(f"unknown noise kind {kind!r}; choose from {NOISE_KINDS}")
    rng = _scene_rng(seed, 13)
    freqs = np.fft.rfftfreq(n_samples, d=1.0 / sample_rate_hz)
    f = np.maximum(freqs, freqs[1] if n_samples > 1 else 1.0)
    if kind == "pink":
        envelope = 1.0 / np.sqrt(f)
    elif kind == "babble":
        envelope = np.sqrt(f / (f + 60.0)) / (1.0 + (f / 500.0) ** 2) ** 0.75
    else:  # fan
        envelope = 1.0 / (1.0 + (f / 120.0) ** 2)
    out = np.zeros((n_samples, n_channels))
    for c in range(n_channels):
        spectrum = envelope * (rng.standard_normal(f.size) + 1j * rng.standard_normal(f.size))
        xc = np.fft.irfft(spectrum, n=n_samples)
        out[:, c] = xc / np.sqrt(_power(xc))
    return MultichannelWaveform(out, sample_rate_hz)


def position_quadrant(scene: SceneSpec) -> int:
    """Source position grouping (0-3) by floor-plane quadrant around the array."""
    delta = scene.source_pos_m - scene.array_center_m
    return int(delta[0] > 0) * 2 + int(delta[1] > 0)


def _list_wavs(directory) -> list:
    names = sorted(n for n in os.listdir(directory) if n.lower().endswith(".wav"))
    if not names:
        raise ConfigError(f"no .wav files in {directory}")
    return [os.path.join(directory, n) for n in names]


def build_dataset(out_dir, n_scenes: int, seed: int,
                  profile: RoomProfile = RoomProfile(), source_dir=None,
                  noise_dir=None, clean_duration_s: float = 2.5,
                  max_order: int | None = None) -> DatasetManifest:
    """Simulate n_scenes mixtures and write WAVs plus a JSONL manifest.

    Clean speech comes from source_dir when given (16 kHz WAVs, first channel)
    and otherwise from the synthetic speech-like generator; ambient noise
    likewise from noise_dir or the shaped-noise presets. RIRs are T60
    calibrated (max_order None); passing an integer selects the plain
    Eyring-absorption image method at that order. Scene k depends only on
    (seed, k), so reruns are bit-identical.
    """
    if n_scenes < 1:
        raise ConfigError("n_scenes must be >= 1")
    os.makedirs(out_dir, exist_ok=True)
    source_paths = _list_wavs(source_dir) if source_dir else None
    noise_paths = _list_wavs(noise_dir) if noise_dir else None

    entries = []
    for k in range(n_scenes):
        scene_seed = int(np.random.SeedSequence(entropy=int(seed), spawn_key=(k,))
                         .generate_state(1)[0])
        rng = _scene_rng(scene_seed, 17)
        scene = sample_scene(scene_seed, profile)
        if max_order is None:
            rirs = calibrated_rir(scene)
        else:
            rirs = image_method_rir(scene, max_order=max_order)
        mix = sample_mix_spec(scene_seed, n_channels=profile.n_mics)

        if source_paths:
            clean = read_wav(source_paths[int(rng.integers(len(source_paths)))])
            if clean.sample_rate_hz != SAMPLE_RATE:
                raise ConfigError(f"source WAVs must be {SAMPLE_RATE} Hz")
            clean = clean.channel(0)
        else:
            clean = synth_speech_like(scene_seed, duration_s=clean_duration_s)

        n_render = clean.n_samples + rirs.rirs.shape[1] - 1
        if noise_paths:
            noise = read_wav(noise_paths[int(rng.integers(len(noise_paths)))])
            if noise.sample_rate_hz != SAMPLE_RATE:
                raise ConfigError(f"noise WAVs must be {SAMPLE_RATE} Hz")
        else:
            noise = synth_noise(mix.noise_kind, n_render, profile.n_mics, scene_seed)

        rendered = render_mixture(clean, rirs, noise, mix, seed=scene_seed)
        scene_id = f"scene_{k:05d}"
        mix_name = f"{scene_id}_mix.wav"
        ref_name = f"{scene_id}_ref.wav"
        write_wav(rendered.mixture, os.path.join(out_dir, mix_name), "float32")
        write_wav(rendered.clean_ref, os.path.join(out_dir, ref_name), "float32")
        entries.append(ManifestEntry(
            mixture_path=mix_name,
            clean_reference_path=ref_name,
            scene_id=scene_id,
            snr_db=round(float(mix.noise_snr_db), 6),
            position_id=position_quadrant(scene),
            meta={
                "t60_s": round(scene.t60_s, 6),
                "room_dims_m": [round(float(v), 6) for v in scene.room_dims_m],
                "level_dbfs": round(float(mix.level_dbfs), 6),
                "noise_kind": mix.noise_kind,
                "scene_seed": scene_seed,
            },
        ))
    manifest = DatasetManifest(entries=entries, root=str(out_dir))
    save_manifest(manifest, os.path.join(out_dir, "manifest.jsonl"))
    return manifest
