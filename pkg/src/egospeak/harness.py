"""Session-disjoint cross-validation protocol and experiment runner."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .backbone import Backbone
from .dsp import SAMPLE_RATE, read_wav
from .errors import ConfigError, DataError
from .head import ADULT, CHILD, ClassifierConfig, compute_hidden, finetune, predict
from .lora import LoraSpec
from .metrics import METRIC_NAMES, FoldMetrics, MetricsReport, compute_metrics
from .rng import make_rng
from .synth import read_annotations, read_manifest

log = logging.getLogger(__name__)

TRAIN_SOURCES = ("child", "exam", "both", "dual")
TEST_SOURCES = ("child", "exam", "dual")
PEFT_VARIANTS = {"none": None, "ff-lora": "ff", "qv-lora": "qv"}
LABEL_IDS = {"adult": ADULT, "child": CHILD}
RESULT_COLUMNS = ["experiment", "fold", "backbone", "source_train", "source_test", "peft", "ratio",
                  "acc", "macro_f1", "recall", "specificity", "seed"]


class LeakageError(AssertionError):
    """A test-session segment reached the training set."""


@dataclass(frozen=True)
class Segment:
    session_id: str
    start_s: float
    end_s: float
    label: int


@dataclass
class SegmentSet:
    """Labelled segments with their cropped audio from both device channels."""

    segments: list[Segment]
    audio: dict[str, list[np.ndarray]]

    @property
    def sessions(self) -> list[str]:
        return sorted({s.session_id for s in self.segments})

    def labels(self, idx: Sequence[int]) -> np.ndarray:
        return np.array([self.segments[i].label for i in idx], dtype=np.int64)


@dataclass(frozen=True)
class HarnessConfig:
    folds: int = 5
    sessions_per_fold: int = 2
    split_seed: int = 0
    seeds: tuple[int, ...] = (0, 1, 2)
    max_segments_per_session: int | None = 40
    max_segment_s: float = 0.25
    selection_seed: int = 0
    ratios: tuple[float, ...] = (0.1, 0.5, 1.0)
    lora_rank: int = 8
    lora_alpha: float = 16.0
    lora_epochs: int = 6
    lora_seeds: tuple[int, ...] = (0,)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)


@dataclass(frozen=True)
class ExperimentSpec:
    name: str
    train_source: str
    test_sources: tuple[str, ...]
    backbone: str = "pretrained"
    peft: str = "none"
    train_ratio: float = 1.0
    lr: float = 5e-4
    seeds: tuple[int, ...] = (0, 1, 2)
    epochs: int | None = None

    def __post_init__(self):
        if self.train_source not in TRAIN_SOURCES:
            raise ConfigError(f"unknown train source {self.train_source!r}")
        for t in self.test_sources:
            if t not in TEST_SOURCES:
                raise ConfigError(f"unknown test source {t!r}")
        dual_train = self.train_source == "dual"
        if any((t == "dual") != dual_train for t in self.test_sources):
            raise ConfigError("dual training requires dual testing and vice versa")
        if self.peft not in PEFT_VARIANTS:
            raise ConfigError(f"unknown PEFT variant {self.peft!r}")
        if not 0 < self.train_ratio <= 1:
            raise ConfigError("train_ratio must be in (0, 1]")


def kfold_split(session_ids: Sequence[str], k: int = 5, sessions_per_fold: int = 2, seed: int = 0):
    """Partition sessions into ``k`` test folds; returns ``[(train, test), ...]``."""
    ids = sorted(set(session_ids))
    if len(ids) != len(session_ids):
        raise ConfigError("duplicate session ids")
    if k < 2 or sessions_per_fold < 1 or k * sessions_per_fold != len(ids):
        raise ConfigError(f"{len(ids)} sessions cannot form {k} folds of {sessions_per_fold}")
    order = make_rng(seed, "kfold").permutation(len(ids))
    shuffled = [ids[i] for i in order]
    folds = []
    for f in range(k):
        test = sorted(shuffled[f * sessions_per_fold : (f + 1) * sessions_per_fold])
        train = sorted(s for s in ids if s not in test)
        folds.append((train, test))
    return folds


def subsample_train(segments: Sequence[Segment], indices: Sequence[int], ratio: float, seed: int) -> list[int]:
    """Stratified by (session, label): keep round(ratio * n), at least one, per non-empty cell."""
    if not 0 < ratio <= 1:
        raise ConfigError("ratio must be in (0, 1]")
    indices = list(indices)
    if ratio == 1.0:
        return indices
    rng = make_rng(seed, "subsample")
    cells: dict[tuple[str, int], list[int]] = {}
    for i in indices:
        cells.setdefault((segments[i].session_id, segments[i].label), []).append(i)
    keep = set()
    for key in sorted(cells):
        members = cells[key]
        n = max(1, int(round(ratio * len(members))))
        keep.update(members[j] for j in rng.choice(len(members), size=n, replace=False))
    return [i for i in indices if i in keep]


def assert_session_disjoint(segments: Sequence[Segment], train_idx, test_idx) -> None:
    train_sessions = {segments[i].session_id for i in train_idx}
    test_sessions = {segments[i].session_id for i in test_idx}
    overlap = train_sessions & test_sessions
    if overlap:
        raise LeakageError(f"sessions in both train and test: {sorted(overlap)}")


def _centre_crop(x: np.ndarray, n: int) -> np.ndarray:
    if len(x) <= n:
        return x
    s = (len(x) - n) // 2
    return x[s : s + n]


def _select(segs: list[Segment], cap: int | None, rng: np.random.Generator) -> list[Segment]:
    """Label-stratified cap on a session's segments, returned in time order."""
    if cap is None or len(segs) <= cap:
        return segs
    keep = []
    by_label = {lab: [s for s in segs if s.label == lab] for lab in (ADULT, CHILD)}
    for lab, members in by_label.items():
        n = min(len(members), max(1, int(round(cap * len(members) / len(segs)))))
        keep.extend(members[j] for j in rng.choice(len(members), size=n, replace=False))
    return sorted(keep, key=lambda s: s.start_s)


def load_segments(corpus_dir: str | Path, hcfg: HarnessConfig = HarnessConfig()) -> SegmentSet:
    """Child/adult annotated segments cut from both channels of every session."""
    root = Path(corpus_dir)
    manifests = read_manifest(root)
    crop = int(round(hcfg.max_segment_s * SAMPLE_RATE)) if hcfg.max_segment_s else None
    segments: list[Segment] = []
    audio: dict[str, list[np.ndarray]] = {"child": [], "exam": []}
    for m in manifests:
        anns = [a for a in read_annotations(root / m.annotation_path) if a.label in LABEL_IDS]
        segs = [Segment(m.session_id, a.start_s, a.end_s, LABEL_IDS[a.label]) for a in anns]
        segs = _select(segs, hcfg.max_segments_per_session, make_rng(hcfg.selection_seed, "select", m.session_id))
        for channel, rel in (("child", m.child_channel_path), ("exam", m.exam_channel_path)):
            wav = read_wav(root / rel)
            if wav.sample_rate != SAMPLE_RATE:
                raise DataError(f"{rel}: expected {SAMPLE_RATE} Hz audio")
            for s in segs:
                x = wav.samples[int(round(s.start_s * SAMPLE_RATE)) : int(round(s.end_s * SAMPLE_RATE))]
                audio[channel].append((_centre_crop(x, crop) if crop else x).astype(np.float32))
        segments.extend(segs)
    if not segments:
        raise DataError(f"{root}: no child/adult segments found")
    return SegmentSet(segments, audio)


class FeatureStore:
    """Frozen-backbone hidden states per (backbone, channel), computed on first use."""

    def __init__(self, data: SegmentSet, backbones: dict[str, Backbone]):
        self.data = data
        self.backbones = backbones
        self._cache: dict[tuple[str, str], list[np.ndarray]] = {}

    def get(self, backbone: str, channel: str) -> list[np.ndarray]:
        key = (backbone, channel)
        if key not in self._cache:
            log.info("embedding %d segments: backbone=%s channel=%s", len(self.data.segments), backbone, channel)
            self._cache[key] = compute_hidden(self.backbones[backbone], self.data.audio[channel])
        return self._cache[key]


def _examples(data: SegmentSet, idx, source: str, store: FeatureStore | None, backbone: str):
    """(examples, labels, features) for ``source``; ``both`` stacks the two channels."""
    labels = data.labels(idx)
    if source == "dual":
        ex = [(data.audio["child"][i], data.audio["exam"][i]) for i in idx]
        feats = None
        if store is not None:
            fc, fe = store.get(backbone, "child"), store.get(backbone, "exam")
            feats = [(fc[i], fe[i]) for i in idx]
        return ex, labels, feats
    channels = ("child", "exam") if source == "both" else (source,)
    ex, feats, labs = [], [], []
    for ch in channels:
        ex.extend(data.audio[ch][i] for i in idx)
        labs.append(labels)
        if store is not None:
            f = store.get(backbone, ch)
            feats.extend(f[i] for i in idx)
    return ex, np.concatenate(labs), (feats if store is not None else None)


@dataclass
class ExperimentResult:
    spec: ExperimentSpec
    rows: list[dict]
    reports: dict[str, MetricsReport]
    # (seed, fold, test_source) -> (segment indices, labels, preds, p_child)
    predictions: dict = field(default_factory=dict)
    # (seed, fold) -> trained model, filled only when requested
    models: dict = field(default_factory=dict)

    def seed_means(self, test_source: str, metric: str) -> list[float]:
        vals: dict[int, list[float]] = {}
        for r in self.rows:
            if r["source_test"] == test_source:
                vals.setdefault(r["seed"], []).append(r[metric])
        return [float(np.mean(v)) for _, v in sorted(vals.items())]

    def mean(self, test_source: str) -> dict[str, float]:
        return self.reports[test_source].mean()


def run_experiment(spec: ExperimentSpec, data: SegmentSet, backbones: dict[str, Backbone],
                   hcfg: HarnessConfig = HarnessConfig(), store: FeatureStore | None = None,
                   folds: Sequence[int] | None = None, keep_models: bool = False) -> ExperimentResult:
    """Cross-validate one experiment over every fold (or the ``folds`` subset) and seed."""
    if spec.backbone not in backbones:
        raise ConfigError(f"missing backbone {spec.backbone!r}; have {sorted(backbones)}")
    lora_variant = PEFT_VARIANTS[spec.peft]
    mode = "dual" if spec.train_source == "dual" else "mono"
    ccfg = replace(hcfg.classifier, input_mode=mode, lr=spec.lr,
                   epochs=spec.epochs if spec.epochs is not None else hcfg.classifier.epochs)
    use_cache = lora_variant is None and not ccfg.backbone_trainable
    if use_cache and store is None:
        store = FeatureStore(data, backbones)
    lora = LoraSpec(lora_variant, hcfg.lora_rank, hcfg.lora_alpha) if lora_variant else None
    splits = kfold_split(data.sessions, hcfg.folds, hcfg.sessions_per_fold, hcfg.split_seed)
    if folds is not None and any(not 0 <= f < len(splits) for f in folds):
        raise ConfigError(f"fold indices must be in [0, {len(splits)})")
    rows = []
    predictions, models = {}, {}
    reports = {t: MetricsReport() for t in spec.test_sources}
    bb = backbones[spec.backbone]
    for seed in spec.seeds:
        for fold, (train_s, test_s) in enumerate(splits):
            if folds is not None and fold not in folds:
                continue
            train_set, test_set = set(train_s), set(test_s)
            train_idx = [i for i, s in enumerate(data.segments) if s.session_id in train_set]
            test_idx = [i for i, s in enumerate(data.segments) if s.session_id in test_set]
            train_idx = subsample_train(data.segments, train_idx, spec.train_ratio, seed * 1000 + fold)
            assert_session_disjoint(data.segments, train_idx, test_idx)
            ex, labels, feats = _examples(data, train_idx, spec.train_source, store if use_cache else None, spec.backbone)
            model, _ = finetune(ex, labels, ccfg, bb, seed=seed * 1000 + fold, lora=lora, features=feats)
            for test_source in spec.test_sources:
                tex, tlabels, tfeats = _examples(data, test_idx, test_source, store if use_cache else None, spec.backbone)
                preds, probs = predict(model, tex, features=tfeats)
                predictions[(seed, fold, test_source)] = (test_idx, tlabels, preds, probs[:, CHILD])
                fm = compute_metrics(preds, tlabels)
                reports[test_source].folds.append(fm)
                row = {
                    "experiment": spec.name, "fold": fold, "backbone": spec.backbone,
                    "source_train": spec.train_source, "source_test": test_source, "peft": spec.peft,
                    "ratio": spec.train_ratio, "seed": seed,
                }
                row.update(fm.as_dict())
                rows.append(row)
            if keep_models:
                models[(seed, fold)] = model
            log.info("%s seed=%d fold=%d done", spec.name, seed, fold)
    return ExperimentResult(spec, rows, reports, predictions, models)


def format_row(row: dict) -> list[str]:
    out = []
    for c in RESULT_COLUMNS:
        v = row[c]
        out.append(f"{v:.6f}" if isinstance(v, float) and c in METRIC_NAMES + ("ratio",) else str(v))
    return out


def write_results(path: str | Path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULT_COLUMNS)
        for r in rows:
            w.writerow(format_row(r))


def write_predictions(path: str | Path, segments: Sequence[Segment], labels, preds, p_child) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["session_id", "start_s", "end_s", "true_label", "pred_label", "p_child"])
        for s, t, p, pc in zip(segments, labels, preds, p_child):
            w.writerow([s.session_id, f"{s.start_s:.3f}", f"{s.end_s:.3f}", int(t), int(p), f"{pc:.6f}"])


__all__ = [
    "ExperimentResult", "ExperimentSpec", "FeatureStore", "FoldMetrics", "HarnessConfig", "LeakageError",
    "Segment", "SegmentSet", "assert_session_disjoint", "kfold_split", "load_segments", "run_experiment",
    "subsample_train", "write_predictions", "write_results",
]
