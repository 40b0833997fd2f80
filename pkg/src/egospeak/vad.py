"""Energy + spectral-flatness voice activity detection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dsp import Waveform, frame_energy, spectral_flatness
from .errors import ConfigError

PRETRAIN_MIN_DURATION_S = 300.0


@dataclass(frozen=True)
class VadParams:
    energy_threshold_db: float = -6.0  # relative to the recording's median frame energy
    flatness_threshold: float = 0.77
    min_speech_ms: float = 100.0
    min_gap_ms: float = 100.0
    frame_ms: float = 25.0
    hop_ms: float = 10.0

    def __post_init__(self):
        if not self.min_speech_ms > 0:
            raise ConfigError("min_speech_ms must be positive")
        if not (np.isfinite(self.energy_threshold_db) and np.isfinite(self.flatness_threshold)):
            raise ConfigError("VAD thresholds must be finite")
        if not self.frame_ms >= self.hop_ms > 0:
            raise ConfigError("need frame_ms >= hop_ms > 0")


def active_frames(wav: Waveform, params: VadParams = VadParams()) -> np.ndarray:
    energy = frame_energy(wav, params.frame_ms, params.hop_ms)
    if len(energy) == 0:
        return np.zeros(0, dtype=bool)
    flat = spectral_flatness(wav, params.frame_ms, params.hop_ms)
    return (energy > np.median(energy) + params.energy_threshold_db) & (flat < params.flatness_threshold)


def _runs(mask: np.ndarray) -> list[tuple[int, int]]:
    """Half-open [start, end) index runs of True."""
    if not mask.any():
        return []
    d = np.diff(np.concatenate([[0], mask.astype(np.int8), [0]]))
    return list(zip(np.flatnonzero(d == 1), np.flatnonzero(d == -1)))


def detect_speech(wav: Waveform, params: VadParams = VadParams()) -> list[tuple[float, float]]:
    """Sorted, disjoint (start_s, end_s) speech regions.

    A run of active frames [i, j) maps to the span covered by those frames'
    hops, centred on the frame centres. Gaps shorter than ``min_gap_ms`` are
    bridged first, then runs shorter than ``min_speech_ms`` are dropped.
    """
    mask = active_frames(wav, params)
    hop = params.hop_ms / 1000.0
    offset = (params.frame_ms - params.hop_ms) / 2000.0
    duration = wav.duration_s
    merged: list[list[float]] = []
    for i, j in _runs(mask):
        start = max(0.0, i * hop + offset)
        end = min(duration, j * hop + offset)
        if merged and start - merged[-1][1] < params.min_gap_ms / 1000.0:
            merged[-1][1] = end
        else:
            merged.append([start, end])
    return [(s, e) for s, e in merged if e - s >= params.min_speech_ms / 1000.0]


def apply_exclusion(
    segments: list[tuple[float, float]],
    duration_s: float,
    min_duration_s: float | None = PRETRAIN_MIN_DURATION_S,
) -> list[tuple[float, float]] | None:
    """Drop whole recordings shorter than ``min_duration_s``.

    Returns ``None`` for a rejected recording and the segments unchanged
    otherwise. ``min_duration_s=None`` (session mode) disables the rule.
    """
    if duration_s < 0:
        raise ValueError("duration_s must be non-negative")
    if min_duration_s is not None and duration_s < min_duration_s:
        return None
    return segments


def segments_to_mask(segments, n_frames: int, frame_ms: float = 25.0, hop_ms: float = 10.0) -> np.ndarray:
    """Frame-level mask: frame centre inside any segment."""
    centres = (np.arange(n_frames) * hop_ms + frame_ms / 2.0) / 1000.0
    mask = np.zeros(n_frames, dtype=bool)
    for s, e in segments:
        mask |= (centres >= s) & (centres < e)
    return mask


def concat_segments(wav: Waveform, segments) -> Waveform:
    sr = wav.sample_rate
    parts = [wav.samples[int(round(s * sr)) : int(round(e * sr))] for s, e in segments]
    return Waveform(np.concatenate(parts) if parts else np.zeros(0), sr)
