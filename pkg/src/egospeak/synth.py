"""Synthetic dual-device dyadic sessions and an unlabeled pre-training corpus.

A voice is a jittered glottal pulse train at the speaker's f0, given a
spectral tilt and passed through a cascade of formant resonators. Each
session places child and adult turns on a timeline and renders two
time-aligned channels: each wearer's device hears its own wearer at full
level and everyone else attenuated by the crosstalk figure, plus device
noise.

Timeline boundaries are drawn on a 1 ms grid so the 3-decimal annotation
CSV describes the rendered audio exactly.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from .dsp import SAMPLE_RATE, Waveform, write_wav
from .errors import ConfigError
from .rng import make_rng

log = logging.getLogger(__name__)

LABELS = ("child", "adult", "third_party", "overlap")


@dataclass(frozen=True)
class SpeakerProfile:
    f0_hz: float
    formant_centers: tuple[float, ...]
    level_db: float = -23.0

    def __post_init__(self):
        if not self.f0_hz > 0:
            raise ConfigError(f"f0_hz must be positive, got {self.f0_hz}")
        if not 2 <= len(self.formant_centers) <= 3:
            raise ConfigError("a profile needs 2 or 3 formant centers")
        if any(f <= 0 for f in self.formant_centers):
            raise ConfigError("formant centers must be positive")


# Formant multipliers for a small vowel inventory (open, front, back, mid).
VOWELS = ((1.3, 0.85, 1.0), (0.55, 1.35, 1.1), (0.6, 0.6, 0.9), (0.9, 1.2, 1.05), (0.9, 0.7, 0.95))

CHILD = SpeakerProfile(300.0, (850.0, 2100.0, 3300.0))
ADULT = SpeakerProfile(120.0, (550.0, 1500.0, 2500.0))
THIRD_PARTY = SpeakerProfile(200.0, (700.0, 1800.0, 2900.0))


@dataclass(frozen=True)
class SynthConfig:
    sample_rate: int = SAMPLE_RATE
    duration_s: float = 1560.0
    crosstalk_attenuation_db: float = 10.0
    noise_db: float = -40.0
    turn_s: tuple[float, float] = (0.5, 4.0)
    pause_s: tuple[float, float] = (0.2, 2.0)
    overlap_rate: float = 0.05
    third_party_rate: float = 0.05
    # Markov turn-taking; stationary adult share is 0.9/(0.9+0.506) = 0.64.
    p_child_after_adult: float = 0.506
    p_adult_after_child: float = 0.9
    profile_jitter: float = 0.15
    formant_jitter: float = 0.08
    pulse_jitter: float = 0.01
    syllable_s: tuple[float, float] = (0.12, 0.3)
    fricative_rate: float = 0.4


@dataclass
class SegmentAnnotation:
    session_id: str
    start_s: float
    end_s: float
    label: str


@dataclass
class SessionManifest:
    session_id: str
    child_channel_path: str
    exam_channel_path: str
    annotation_path: str
    duration_s: float
    seed: int


def _resonator(fc: float, bw: float, sr: int) -> tuple[np.ndarray, np.ndarray]:
    r = np.exp(-np.pi * bw / sr)
    theta = 2 * np.pi * fc / sr
    a = np.array([1.0, -2 * r * np.cos(theta), r * r])
    return np.array([a.sum()]), a  # unity gain at DC


def render_voice(profile: SpeakerProfile, n: int, sr: int, rng: np.random.Generator, cfg: SynthConfig = SynthConfig()) -> np.ndarray:
    """Render ``n`` samples of voiced speech at unit RMS."""
    if n <= 0:
        return np.zeros(0)
    f0 = profile.f0_hz
    t_total = n / sr
    n_pulses = int(np.ceil(t_total * f0 * 1.25)) + 2
    phase = rng.uniform(0, 2 * np.pi)
    # Slow intonation contour plus per-period jitter.
    nominal_t = np.arange(n_pulses) / f0
    contour = 1.0 + 0.06 * np.sin(2 * np.pi * 0.7 * nominal_t + phase)
    periods = (1.0 / (f0 * contour)) * (1.0 + cfg.pulse_jitter * rng.standard_normal(n_pulses))
    times = np.cumsum(periods) - periods[0] * rng.uniform()
    idx = np.round(times[(times >= 0) & (times < t_total)] * sr).astype(np.int64)
    src = np.zeros(n)
    np.add.at(src, idx[idx < n], 1.0)
    src += 0.02 * rng.standard_normal(n)
    src = lfilter([1.0], [1.0, -0.9], src)  # glottal spectral tilt

    scale = 1.0 + cfg.formant_jitter * rng.uniform(-1, 1, size=len(profile.formant_centers))
    out = np.zeros(n)
    states = [np.zeros(2) for _ in profile.formant_centers]
    env = np.ones(n)
    s = 0
    while s < n:
        e = min(n, s + int(rng.uniform(*cfg.syllable_s) * sr))
        vowel = VOWELS[int(rng.integers(len(VOWELS)))]
        seg = src[s:e]
        if rng.uniform() < cfg.fricative_rate:
            # Unvoiced onset: white noise replaces the pulse train briefly.
            k = min(len(seg), int(0.04 * sr))
            seg = seg.copy()
            seg[:k] = 0.3 * rng.standard_normal(k)
        for j, (fc, sc, v) in enumerate(zip(profile.formant_centers, scale, vowel)):
            f = min(fc * sc * v, 0.45 * sr)
            b, a = _resonator(f, 60.0 + 40.0 * j + 0.05 * f, sr)
            seg, states[j] = lfilter(b, a, seg, zi=states[j])
        out[s:e] = seg
        m = e - s
        env[s:e] = 0.55 + 0.45 * np.sin(np.pi * (np.arange(m) + 0.5) / m)
        s = e
    out = out - out.mean()

    t = np.arange(n) / sr
    env *= 1.0 - 0.2 * (0.5 + 0.5 * np.sin(2 * np.pi * rng.uniform(0.5, 1.5) * t + rng.uniform(0, 2 * np.pi)))
    ramp = min(int(0.015 * sr), n // 2)
    if ramp > 0:
        r = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / ramp)
        env[:ramp] *= r
        env[n - ramp :] *= r[::-1]
    out = out * env
    rms = np.sqrt(np.mean(out**2))
    return out / rms if rms > 0 else out


def _gain(db: float) -> float:
    return float(10.0 ** (db / 20.0))


def jitter_profile(p: SpeakerProfile, rng: np.random.Generator, f0_jitter: float, formant_jitter: float) -> SpeakerProfile:
    f0 = p.f0_hz * (1.0 + rng.uniform(-f0_jitter, f0_jitter))
    formants = tuple(float(f * (1.0 + rng.uniform(-formant_jitter, formant_jitter))) for f in p.formant_centers)
    return replace(p, f0_hz=float(f0), formant_centers=formants)


def _timeline(duration_s: float, cfg: SynthConfig, rng: np.random.Generator) -> list[tuple[int, int, str]]:
    """Event list as (start_ms, end_ms, label), non-overlapping and sorted."""
    events = []
    total_ms = int(round(duration_s * 1000))
    t = int(round(rng.uniform(*cfg.pause_s) * 1000))
    speaker = "adult"
    while True:
        turn = int(round(rng.uniform(*cfg.turn_s) * 1000))
        if t + turn > total_ms:
            break
        u = rng.uniform()
        if u < cfg.overlap_rate:
            label = "overlap"
        elif u < cfg.overlap_rate + cfg.third_party_rate:
            label = "third_party"
        else:
            switch = cfg.p_child_after_adult if speaker == "adult" else cfg.p_adult_after_child
            if rng.uniform() < switch:
                speaker = "child" if speaker == "adult" else "adult"
            label = speaker
        events.append((t, t + turn, label))
        t += turn + int(round(rng.uniform(*cfg.pause_s) * 1000))
    return events


def generate_session(
    profiles: tuple[SpeakerProfile, SpeakerProfile] = (CHILD, ADULT),
    duration_s: float | None = None,
    seed: int = 0,
    cfg: SynthConfig = SynthConfig(),
    session_id: str = "S00",
    third_party: SpeakerProfile = THIRD_PARTY,
) -> tuple[Waveform, Waveform, list[SegmentAnnotation]]:
    """Render one session: (child-device channel, examiner-device channel, annotations)."""
    child, adult = profiles
    duration_s = cfg.duration_s if duration_s is None else duration_s
    if duration_s < 10:
        raise ConfigError(f"session duration must be >= 10 s, got {duration_s}")
    rng = make_rng(seed, "session")
    sr = cfg.sample_rate
    n = int(round(duration_s * sr))
    events = _timeline(duration_s, cfg, rng)

    own = {"child": _gain(child.level_db), "adult": _gain(adult.level_db)}
    cross = {k: v * _gain(-cfg.crosstalk_attenuation_db) for k, v in own.items()}
    child_ch = np.zeros(n)
    exam_ch = np.zeros(n)
    annotations = []
    for start_ms, end_ms, label in events:
        a, b = start_ms * sr // 1000, end_ms * sr // 1000
        speakers = {"child": ["child"], "adult": ["adult"], "overlap": ["child", "adult"], "third_party": []}[label]
        for who in speakers:
            voice = render_voice(child if who == "child" else adult, b - a, sr, rng, cfg)
            if who == "child":
                child_ch[a:b] += own["child"] * voice
                exam_ch[a:b] += cross["child"] * voice
            else:
                exam_ch[a:b] += own["adult"] * voice
                child_ch[a:b] += cross["adult"] * voice
        if label == "third_party":
            voice = render_voice(third_party, b - a, sr, rng, cfg) * _gain(third_party.level_db - cfg.crosstalk_attenuation_db)
            child_ch[a:b] += voice
            exam_ch[a:b] += voice
        annotations.append(SegmentAnnotation(session_id, start_ms / 1000.0, end_ms / 1000.0, label))

    noise = _gain(cfg.noise_db)
    child_ch += noise * rng.standard_normal(n)
    exam_ch += noise * rng.standard_normal(n)
    return (
        Waveform(np.clip(child_ch, -1.0, 1.0), sr),
        Waveform(np.clip(exam_ch, -1.0, 1.0), sr),
        annotations,
    )


def session_profiles(seed: int, cfg: SynthConfig = SynthConfig()) -> tuple[SpeakerProfile, SpeakerProfile]:
    rng = make_rng(seed, "profiles")
    child = jitter_profile(CHILD, rng, cfg.profile_jitter, 0.10)
    adult = jitter_profile(ADULT, rng, cfg.profile_jitter, 0.10)
    return child, adult


def write_annotations(path: str | Path, annotations: list[SegmentAnnotation]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["session_id", "start_s", "end_s", "label"])
        for a in annotations:
            w.writerow([a.session_id, f"{a.start_s:.3f}", f"{a.end_s:.3f}", a.label])


def read_annotations(path: str | Path) -> list[SegmentAnnotation]:
    with open(path, newline="") as fh:
        return [
            SegmentAnnotation(r["session_id"], float(r["start_s"]), float(r["end_s"]), r["label"])
            for r in csv.DictReader(fh)
        ]


def generate_corpus(
    out_dir: str | Path,
    n_sessions: int = 10,
    seed: int = 0,
    cfg: SynthConfig = SynthConfig(),
    min_sessions: int = 1,
) -> list[SessionManifest]:
    """Write ``n_sessions`` sessions (two WAVs + annotation CSV each) and ``manifest.jsonl``."""
    if n_sessions < max(1, min_sessions):
        raise ConfigError(f"need at least {max(1, min_sessions)} sessions, got {n_sessions}")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ConfigError(f"cannot create output directory {out}: {e}") from e
    manifests = []
    for i in range(n_sessions):
        sid = f"S{i:02d}"
        s_seed = int(make_rng(seed, i).integers(0, 2**63 - 1))
        child_w, exam_w, ann = generate_session(session_profiles(s_seed, cfg), cfg.duration_s, s_seed, cfg, sid)
        m = SessionManifest(sid, f"{sid}_child.wav", f"{sid}_exam.wav", f"{sid}.csv", cfg.duration_s, s_seed)
        write_wav(out / m.child_channel_path, child_w)
        write_wav(out / m.exam_channel_path, exam_w)
        write_annotations(out / m.annotation_path, ann)
        manifests.append(m)
        log.info("session %s: %d segments", sid, len(ann))
    with open(out / "manifest.jsonl", "w") as fh:
        for m in manifests:
            fh.write(json.dumps(asdict(m), sort_keys=True) + "\n")
    return manifests


def read_manifest(corpus_dir: str | Path) -> list[SessionManifest]:
    path = Path(corpus_dir) / "manifest.jsonl"
    if not path.is_file():
        raise ConfigError(f"no corpus manifest at {path}")
    with open(path) as fh:
        return [SessionManifest(**json.loads(line)) for line in fh if line.strip()]


@dataclass(frozen=True)
class PretrainCorpusConfig:
    n_utterances: int = 2000
    adult_fraction: float = 0.8
    duration_s: tuple[float, float] = (1.0, 10.0)
    speakers: tuple[int, int] = (1, 3)
    turn_s: tuple[float, float] = (0.4, 2.5)
    gap_s: tuple[float, float] = (0.05, 0.4)
    adult_f0_jitter: float = 0.25
    child_f0_jitter: float = 0.15
    noise_db: float = -40.0
    level_db: tuple[float, float] = (-28.0, -20.0)
    synth: SynthConfig = field(default_factory=SynthConfig)


def _pretrain_voice(rng: np.random.Generator, cfg: PretrainCorpusConfig) -> tuple[SpeakerProfile, bool, float]:
    adult = bool(rng.uniform() < cfg.adult_fraction)
    base = ADULT if adult else CHILD
    prof = jitter_profile(base, rng, cfg.adult_f0_jitter if adult else cfg.child_f0_jitter, 0.12)
    return prof, adult, _gain(rng.uniform(*cfg.level_db))


def render_pretrain_utterance(i: int, seed: int, cfg: PretrainCorpusConfig) -> tuple[Waveform, float]:
    """Utterance ``i``: a short exchange between a few voices.

    Returns the waveform and the share of voiced samples from adult-like voices.
    """
    rng = make_rng(seed, "pretrain", i)
    sr = cfg.synth.sample_rate
    voices = [_pretrain_voice(rng, cfg) for _ in range(int(rng.integers(cfg.speakers[0], cfg.speakers[1] + 1)))]
    n = int(round(rng.uniform(*cfg.duration_s) * sr))
    lead = int(0.1 * sr)
    voice = np.zeros(n)
    pos, prev, adult_n, total_n = lead, -1, 0, 0
    while pos < n - lead:
        k = int(rng.integers(len(voices)))
        if len(voices) > 1 and k == prev:
            k = (k + 1) % len(voices)
        prof, adult, gain = voices[k]
        m = min(int(rng.uniform(*cfg.turn_s) * sr), n - lead - pos)
        if m < int(0.1 * sr):
            break
        voice[pos : pos + m] = render_voice(prof, m, sr, rng, cfg.synth) * gain
        adult_n += m * adult
        total_n += m
        pos += m + int(rng.uniform(*cfg.gap_s) * sr)
        prev = k
    voice += _gain(cfg.noise_db) * rng.standard_normal(n)
    return Waveform(np.clip(voice, -1.0, 1.0), sr), adult_n / total_n if total_n else 0.0


def generate_pretrain_corpus(out_dir: str | Path, n_utterances: int | None = None, seed: int = 0,
                             cfg: PretrainCorpusConfig = PretrainCorpusConfig()) -> list[Path]:
    n = cfg.n_utterances if n_utterances is None else n_utterances
    if n < 1:
        raise ConfigError(f"need at least one utterance, got {n}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    with open(out / "utterances.jsonl", "w") as fh:
        for i in range(n):
            wav, adult_share = render_pretrain_utterance(i, seed, cfg)
            p = out / f"utt_{i:05d}.wav"
            write_wav(p, wav)
            paths.append(p)
            fh.write(json.dumps({"path": p.name, "duration_s": round(wav.duration_s, 6), "index": i,
                                "adult_share": round(adult_share, 6)}, sort_keys=True) + "\n")
    return paths
