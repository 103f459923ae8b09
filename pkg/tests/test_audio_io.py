import json

import numpy as np
import pytest

from sacc.audio_io import (
    DatasetManifest,
    ManifestEntry,
    MultichannelWaveform,
    load_manifest,
    read_wav,
    save_manifest,
    write_wav,
)
from sacc.errors import ContractError, FormatError, UnsupportedEncodingError


def test_pcm16_header_readback(tmp_path):
    rng = np.random.default_rng(0)
    wave = MultichannelWaveform(rng.uniform(-0.5, 0.5, size=(160, 2)), 16000)
    path = tmp_path / "a.wav"
    write_wav(wave, path, "pcm16")
    back = read_wav(path)
    assert back.n_samples == 160
    assert back.n_channels == 2
    assert back.sample_rate_hz == 16000


def test_pcm16_full_scale_convention(tmp_path):
    import struct
    import wave as wavemod

    path = tmp_path / "full.wav"
    with wavemod.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(16000)
        fh.writeframes(struct.pack("<100h", *([0x7FFF] * 100)))
    back = read_wav(path)
    assert np.all(back.samples == 32767.0 / 32768.0)


def test_float32_roundtrip_bitwise(tmp_path):
    rng = np.random.default_rng(1)
    content = rng.standard_normal((777, 3)).astype(np.float32).astype(np.float64)
    wave = MultichannelWaveform(content, 16000)
    path = tmp_path / "f.wav"
    assert write_wav(wave, path, "float32") == 0
    back = read_wav(path)
    assert back.samples.shape == (777, 3)
    assert np.array_equal(back.samples, content)


def test_channel_order_preserved(tmp_path):
    wave = MultichannelWaveform(np.tile([[0.1, 0.2, 0.3, 0.4]], (50, 1)), 16000)
    path = tmp_path / "c.wav"
    write_wav(wave, path, "float32")
    back = read_wav(path)
    assert np.allclose(back.samples[0], [0.1, 0.2, 0.3, 0.4])


def test_pcm16_silence_is_zero_payload(tmp_path):
    path = tmp_path / "z.wav"
    write_wav(MultichannelWaveform(np.zeros((64, 1)), 16000), path, "pcm16")
    back = read_wav(path)
    assert np.all(back.samples == 0.0)


def test_pcm16_clipping_saturates_and_counts(tmp_path):
    wave = MultichannelWaveform(np.array([[0.5], [1.5], [-2.0]]), 16000)
    path = tmp_path / "clip.wav"
    clipped = write_wav(wave, path, "pcm16")
    assert clipped == 2
    back = read_wav(path)
    assert back.samples[1, 0] == 32767.0 / 32768.0
    assert back.samples[2, 0] == -1.0


def test_malformed_header_raises_format_error(tmp_path):
    path = tmp_path / "bad.wav"
    path.write_bytes(b"this is not a RIFF file at all, sorry......")
    with pytest.raises(FormatError):
        read_wav(path)


def test_unsupported_encoding(tmp_path):
    from scipy.io import wavfile

    path = tmp_path / "i32.wav"
    wavfile.write(path, 16000, np.zeros(64, dtype=np.int32))
    with pytest.raises(UnsupportedEncodingError):
        read_wav(path)


def test_non_finite_samples_rejected():
    with pytest.raises(ContractError):
        MultichannelWaveform(np.array([[np.nan]]), 16000)


def test_manifest_roundtrip(tmp_path):
    for name in ("m0.wav", "r0.wav"):
        write_wav(MultichannelWaveform(np.zeros((64, 1)), 16000), tmp_path / name, "float32")
    manifest = DatasetManifest(entries=[
        ManifestEntry("m0.wav", "r0.wav", "scene_0", 10.0, 2, meta={"t60_s": 0.5}),
    ], root=str(tmp_path))
    save_manifest(manifest, tmp_path / "manifest.jsonl")
    back = load_manifest(tmp_path / "manifest.jsonl")
    assert len(back.entries) == 1
    entry = back.entries[0]
    assert entry.scene_id == "scene_0"
    assert entry.snr_db == 10.0
    assert entry.position_id == 2
    assert entry.meta["t60_s"] == 0.5


def test_manifest_missing_file_rejected(tmp_path):
    with open(tmp_path / "manifest.jsonl", "w") as fh:
        fh.write(json.dumps({
            "mixture_path": "nope.wav", "clean_reference_path": "also_nope.wav",
            "scene_id": "s", "snr_db": 3.0, "position_id": 0}) + "\n")
    with pytest.raises(FormatError):
        load_manifest(tmp_path / "manifest.jsonl")


def test_manifest_duplicate_scene_id_rejected(tmp_path):
    write_wav(MultichannelWaveform(np.zeros((64, 1)), 16000), tmp_path / "x.wav", "float32")
    record = json.dumps({
        "mixture_path": "x.wav", "clean_reference_path": "x.wav",
        "scene_id": "dup", "snr_db": 3.0, "position_id": 0})
    with open(tmp_path / "manifest.jsonl", "w") as fh:
        fh.write(record + "\n" + record + "\n")
    with pytest.raises(FormatError):
        load_manifest(tmp_path / "manifest.jsonl")
