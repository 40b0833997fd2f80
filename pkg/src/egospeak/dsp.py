"""WAV I/O, resampling and short-time features."""

from __future__ import annotations

import struct
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DataError

SAMPLE_RATE = 16000
ENERGY_FLOOR_DB = -80.0
_PCM_SCALE = 32768.0


class WavError(DataError):
    """Base for WAV decoding failures."""


class WavHeaderError(WavError):
    pass


class UnsupportedEncodingError(WavError):
    pass


class MultichannelError(WavError):
    pass


class EmptyAudioError(WavError):
    pass


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        arr = np.asarray(self.samples, dtype=np.float64)
        if arr.ndim != 1:
            raise ValueError("Waveform samples must be one-dimensional")
        if not np.all(np.isfinite(arr)):
            raise ValueError("Waveform contains non-finite samples")
        object.__setattr__(self, "samples", arr)

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate

    def __len__(self) -> int:
        return len(self.samples)


def _chunks(data: bytes, path) -> dict[bytes, bytes]:
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise WavHeaderError(f"{path}: not a RIFF/WAVE file")
    chunks = {}
    pos = 12
    while pos + 8 <= len(data):
        cid, size = struct.unpack_from("<4sI", data, pos)
        body = data[pos + 8 : pos + 8 + size]
        if len(body) < size and cid != b"data":
            raise WavHeaderError(f"{path}: truncated {cid!r} chunk")
        chunks.setdefault(cid, body)
        pos += 8 + size + (size & 1)
    return chunks


def read_wav(path: str | Path) -> Waveform:
    """Read a PCM16 mono WAV file into a float waveform in [-1, 1)."""
    data = Path(path).read_bytes()
    chunks = _chunks(data, path)
    fmt = chunks.get(b"fmt ")
    if fmt is None or len(fmt) < 16:
        raise WavHeaderError(f"{path}: missing or short fmt chunk")
    if b"data" not in chunks:
        raise WavHeaderError(f"{path}: missing data chunk")
    audio_format, channels, rate, _, block_align, bits = struct.unpack_from("<HHIIHH", fmt)
    if audio_format == 0xFFFE and len(fmt) >= 26:
        audio_format = struct.unpack_from("<H", fmt, 24)[0]
    if audio_format != 1 or bits != 16:
        raise UnsupportedEncodingError(f"{path}: only PCM16 is supported (format={audio_format}, bits={bits})")
    if channels != 1:
        raise MultichannelError(f"{path}: expected mono, found {channels} channels")
    if rate <= 0:
        raise WavHeaderError(f"{path}: invalid sample rate {rate}")
    raw = chunks[b"data"]
    n = len(raw) // 2
    if n == 0:
        raise EmptyAudioError(f"{path}: empty audio")
    pcm = np.frombuffer(raw[: 2 * n], dtype="<i2")
    return Waveform(pcm.astype(np.float64) / _PCM_SCALE, rate)


def quantize_pcm16(samples: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(samples) * _PCM_SCALE), -32768, 32767).astype("<i2")


def write_wav(path: str | Path, wav: Waveform) -> None:
    pcm = quantize_pcm16(wav.samples)
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(int(wav.sample_rate))
        fh.writeframes(pcm.tobytes())


def resample_linear(wav: Waveform, target_hz: int) -> Waveform:
    if target_hz <= 0:
        raise ValueError(f"target_hz must be positive, got {target_hz}")
    if target_hz == wav.sample_rate:
        return Waveform(wav.samples.copy(), wav.sample_rate)
    n_out = int(round(len(wav) * target_hz / wav.sample_rate))
    pos = np.arange(n_out) * (wav.sample_rate / target_hz)
    x = wav.samples
    idx = np.clip(np.floor(pos).astype(np.int64), 0, max(len(x) - 2, 0))
    frac = pos - idx
    if len(x) < 2:
        return Waveform(np.full(n_out, x[0] if len(x) else 0.0), target_hz)
    # Past the last sample the final segment's slope is extended.
    out = x[idx] + frac * (x[idx + 1] - x[idx])
    return Waveform(np.clip(out, -1.0, 1.0), target_hz)


def frame_signal(x: np.ndarray, frame: int, hop: int) -> np.ndarray:
    if len(x) < frame:
        return np.empty((0, frame))
    return sliding_window_view(x, frame)[::hop]


def _frame_sizes(wav: Waveform, frame_ms: float, hop_ms: float) -> tuple[int, int]:
    if not (frame_ms >= hop_ms > 0):
        raise ValueError(f"need frame_ms >= hop_ms > 0, got {frame_ms}, {hop_ms}")
    frame = int(round(wav.sample_rate * frame_ms / 1000.0))
    hop = int(round(wav.sample_rate * hop_ms / 1000.0))
    return frame, max(hop, 1)


def frame_energy(wav: Waveform, frame_ms: float = 25.0, hop_ms: float = 10.0) -> np.ndarray:
    """Per-frame log energy in dB (rectangular window), floored at -80 dB."""
    frame, hop = _frame_sizes(wav, frame_ms, hop_ms)
    frames = frame_signal(wav.samples, frame, hop)
    if len(frames) == 0:
        return np.empty(0)
    power = np.mean(frames**2, axis=1)
    with np.errstate(divide="ignore"):
        db = 10.0 * np.log10(power)
    return np.maximum(db, ENERGY_FLOOR_DB)


def spectral_flatness(wav: Waveform, frame_ms: float = 25.0, hop_ms: float = 10.0) -> np.ndarray:
    """Per-frame geometric/arithmetic mean ratio of the Hann-windowed magnitude spectrum.

    All-zero frames come out as exactly 1.0.
    """
    frame, hop = _frame_sizes(wav, frame_ms, hop_ms)
    frames = frame_signal(wav.samples, frame, hop)
    if len(frames) == 0:
        return np.empty(0)
    mag = np.abs(np.fft.rfft(frames * np.hanning(frame), axis=1)) + 1e-12
    gm = np.exp(np.mean(np.log(mag), axis=1))
    am = np.mean(mag, axis=1)
    return np.clip(gm / am, 0.0, 1.0)


def frame_times(n_frames: int, frame_ms: float, hop_ms: float) -> np.ndarray:
    """Centre time (s) of each frame."""
    return (np.arange(n_frames) * hop_ms + frame_ms / 2.0) / 1000.0
