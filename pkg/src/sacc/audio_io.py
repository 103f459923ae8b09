"""Multichannel WAV reading/writing and dataset manifests.

This is the only module that touches the filesystem for audio. Waveforms are
held as float64 arrays of shape (N, C) with full scale at 1.0; PCM16 files are
scaled by the symmetric 1/32768 convention on read. Only PCM16 and IEEE
float32 encodings are supported.

Manifests are line-delimited JSON, one record per simulated scene, pairing a
mixture file with its clean reference and mixing metadata.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.io import wavfile

from .errors import ContractError, FormatError, UnsupportedEncodingError

PCM16_FULL_SCALE = 32768.0


@dataclass
class MultichannelWaveform:
    """Time-domain samples, shape (N, C), linear amplitude, full scale 1.0."""

    samples: np.ndarray
    sample_rate_hz: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim == 1:
            self.samples = self.samples[:, None]
        if self.samples.ndim != 2:
            raise ContractError(f"samples must be (N, C), got shape {self.samples.shape}")
        if not np.all(np.isfinite(self.samples)):
            raise ContractError("samples must be finite")
        if self.sample_rate_hz <= 0:
            raise ContractError(f"sample rate must be positive, got {self.sample_rate_hz}")

    @property
    def n_samples(self) -> int:
        return self.samples.shape[0]

    @property
    def n_channels(self) -> int:
        return self.samples.shape[1]

    def channel(self, index: int) -> "MultichannelWaveform":
        """Single-channel view as a new waveform."""
        return MultichannelWaveform(self.samples[:, index : index + 1].copy(), self.sample_rate_hz)


def read_wav(path) -> MultichannelWaveform:
    """Read a RIFF/WAVE file (PCM16 or IEEE float32, any channel count).

    PCM16 samples are divided by 32768; float32 samples are taken verbatim.
    Raises FormatError on malformed files and UnsupportedEncodingError for
    any other sample encoding.
    """
    try:
        rate, data = wavfile.read(path)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / PCM16_FULL_SCALE
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise UnsupportedEncodingError(
            f"{path}: encoding {data.dtype} not supported (PCM16 or float32 only)"
        )
    return MultichannelWaveform(samples, int(rate))


def write_wav(wave: MultichannelWaveform, path, encoding: str = "float32") -> int:
    """Write a waveform; returns the number of clipped samples (pcm16 only).

    pcm16 saturates samples outside [-1, 1] instead of erroring: simulation
    gain augmentation can legally push a mixture near full scale. float32
    writes are exact and always return 0.
    """
    if not np.all(np.isfinite(wave.samples)):
        raise ContractError("cannot write non-finite samples")
    if encoding == "float32":
        wavfile.write(path, wave.sample_rate_hz, wave.samples.astype(np.float32))
        return 0
    if encoding == "pcm16":
        clipped = int(np.count_nonzero(np.abs(wave.samples) > 1.0))
        ints = np.clip(np.round(wave.samples * PCM16_FULL_SCALE), -32768, 32767)
        wavfile.write(path, wave.sample_rate_hz, ints.astype(np.int16))
        return clipped
    raise ContractError(f"unknown encoding {encoding!r} (use 'pcm16' or 'float32')")


@dataclass
class ManifestEntry:
    mixture_path: str
    clean_reference_path: str
    scene_id: str
    snr_db: float
    position_id: int
    meta: dict = field(default_factory=dict)

    def to_record(self) -> dict:
        return {
            "mixture_path": self.mixture_path,
            "clean_reference_path": self.clean_reference_path,
            "scene_id": self.scene_id,
            "snr_db": self.snr_db,
            "position_id": self.position_id,
            "meta": self.meta,
        }


@dataclass
class DatasetManifest:
    """Ordered scene records; paths are stored relative to the manifest file."""

    entries: list
    root: str = "."

    def resolve(self, relpath: str) -> str:
        if os.path.isabs(relpath):
            return relpath
        return os.path.join(self.root, relpath)


def save_manifest(manifest: DatasetManifest, path) -> None:
    seen = set()
    for entry in manifest.entries:
        if entry.scene_id in seen:
            raise ContractError(f"duplicate scene_id {entry.scene_id!r}")
        seen.add(entry.scene_id)
    with open(path, "w") as fh:
        for entry in manifest.entries:
            fh.write(json.dumps(entry.to_record(), sort_keys=True) + "\n")


def load_manifest(path, check_paths: bool = True) -> DatasetManifest:
    """Load a line-delimited JSON manifest; verifies referenced files exist."""
    root = os.path.dirname(os.path.abspath(path))
    entries = []
    seen = set()
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: not valid JSON: {exc}") from exc
            try:
                entry = ManifestEntry(
                    mixture_path=rec["mixture_path"],
                    clean_reference_path=rec["clean_reference_path"],
                    scene_id=rec["scene_id"],
                    snr_db=float(rec["snr_db"]),
                    position_id=int(rec["position_id"]),
                    meta=rec.get("meta", {}),
                )
            except KeyError as exc:
                raise FormatError(f"{path}:{lineno}: missing field {exc}") from exc
            if entry.scene_id in seen:
                raise FormatError(f"{path}:{lineno}: duplicate scene_id {entry.scene_id!r}")
            seen.add(entry.scene_id)
            entries.append(entry)
    manifest = DatasetManifest(entries=entries, root=root)
    if check_paths:
        for entry in manifest.entries:
            for p in (entry.mixture_path, entry.clean_reference_path):
                if not os.path.exists(manifest.resolve(p)):
                    raise FormatError(f"{path}: referenced file missing: {p}")
    return manifest
