"""Markdown tables, CSV summaries and matplotlib figures for the experiment matrix."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .harness import ExperimentResult  # noqa: E402
from .metrics import METRIC_NAMES  # noqa: E402

COLUMNS = (("acc", "Acc (%)", 100.0), ("macro_f1", "F1", 1.0), ("recall", "Recall (%)", 100.0),
           ("specificity", "Specificity (%)", 100.0))
SOURCE_NAMES = {"child": "Child", "exam": "Exam", "both": "Both", "dual": "Dual"}
BACKBONE_NAMES = {"scratch": "Scratch W2V", "pretrained": "Pretrained W2V"}
PEFT_NAMES = {"none": "Baseline", "ff-lora": "FF-LoRA", "qv-lora": "QV-LoRA"}

plt.rcParams["svg.hashsalt"] = "egospeak"
plt.rcParams["svg.fonttype"] = "none"


@dataclass(frozen=True)
class Stat:
    """Mean over seeds of the fold-mean, with the seed range."""

    mean: float
    lo: float
    hi: float

    @property
    def half_range(self) -> float:
        return (self.hi - self.lo) / 2.0


def stat(result: ExperimentResult, test_source: str, metric: str) -> Stat:
    vals = result.seed_means(test_source, metric)
    if not vals:
        raise KeyError(f"{result.spec.name}: no rows for test source {test_source!r}")
    return Stat(float(np.mean(vals)), float(min(vals)), float(max(vals)))


def _cell(s: Stat, scale: float) -> str:
    digits = 1 if scale == 100.0 else 3
    return f"{s.mean * scale:.{digits}f} ± {s.half_range * scale:.{digits}f}"


def _table(header: Sequence[str], rows: Iterable[Sequence[str]]) -> str:
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    lines += ["| " + " | ".join(r) + " |" for r in rows]
    return "\n".join(lines) + "\n"


def _metric_cells(result: ExperimentResult, test_source: str) -> list[str]:
    return [_cell(stat(result, test_source, m), scale) for m, _, scale in COLUMNS]


def table_sources(title: str, results: Sequence[ExperimentResult], note: str = "") -> str:
    """One block per test source; one row per (train source, backbone, peft) run."""
    out = [f"# {title}\n"]
    if note:
        out.append(note + "\n")
    header = ["Train", "Backbone"] + [c[1] for c in COLUMNS]
    tests = []
    for r in results:
        tests += [t for t in r.spec.test_sources if t not in tests]
    for t in tests:
        rows = [[SOURCE_NAMES[r.spec.train_source], BACKBONE_NAMES.get(r.spec.backbone, r.spec.backbone)]
                + _metric_cells(r, t) for r in results if t in r.spec.test_sources]
        out.append(f"## Test: {SOURCE_NAMES[t]}\n")
        out.append(_table(header, rows))
    return "\n".join(out)


def best_mono(results: Sequence[ExperimentResult], backbone: str) -> tuple[ExperimentResult, str, Stat]:
    """Mono run and test source with the highest mean macro-F1 for ``backbone``."""
    best = None
    for r in results:
        if r.spec.backbone != backbone or r.spec.train_source == "dual" or r.spec.peft != "none":
            continue
        for t in r.spec.test_sources:
            s = stat(r, t, "macro_f1")
            if best is None or s.mean > best[2].mean:
                best = (r, t, s)
    if best is None:
        raise KeyError(f"no mono run for backbone {backbone!r}")
    return best


def table_dual(dual: Sequence[ExperimentResult], mono: Sequence[ExperimentResult]) -> str:
    header = ["Input", "Backbone"] + [c[1] for c in COLUMNS]
    rows = []
    for r in dual:
        m, t, _ = best_mono(mono, r.spec.backbone)
        name = f"Mono (best: {SOURCE_NAMES[m.spec.train_source]} to {SOURCE_NAMES[t]})"
        rows.append([name, BACKBONE_NAMES[r.spec.backbone]] + _metric_cells(m, t))
        rows.append(["Dual", BACKBONE_NAMES[r.spec.backbone]] + _metric_cells(r, "dual"))
    return "# Mono vs dual channel input\n\n" + _table(header, rows)


def ratio_rows(results: Sequence[ExperimentResult]) -> list[dict]:
    rows = []
    for r in sorted(results, key=lambda r: (r.spec.backbone, r.spec.train_ratio)):
        for t in r.spec.test_sources:
            s = stat(r, t, "macro_f1")
            rows.append({"backbone": r.spec.backbone, "source_test": t, "ratio": r.spec.train_ratio,
                         "macro_f1_mean": s.mean, "macro_f1_min": s.lo, "macro_f1_max": s.hi})
    return rows


def write_csv(path: Path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(rows[0]))
        for row in rows:
            w.writerow([f"{v:.6f}" if isinstance(v, float) else v for v in row.values()])


def _save(fig, path: Path) -> None:
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)


def plot_ratio(rows: Sequence[dict], path: Path) -> None:
    tests = sorted({r["source_test"] for r in rows})
    fig, axes = plt.subplots(1, len(tests), figsize=(4.2 * len(tests), 3.4), squeeze=False)
    for ax, t in zip(axes[0], tests):
        for bb in sorted({r["backbone"] for r in rows}):
            pts = sorted((r["ratio"], r["macro_f1_mean"], r["macro_f1_min"], r["macro_f1_max"])
                         for r in rows if r["source_test"] == t and r["backbone"] == bb)
            x = [100 * p[0] for p in pts]
            y = np.array([p[1] for p in pts])
            err = np.array([[p[1] - p[2] for p in pts], [p[3] - p[1] for p in pts]])
            ax.errorbar(x, y, yerr=err, marker="o", capsize=3, label=BACKBONE_NAMES.get(bb, bb))
        ax.set_title(f"Test: {SOURCE_NAMES[t]}")
        ax.set_xlabel("Training data (%)")
        ax.set_ylabel("Macro F1")
        ax.set_xticks([10, 50, 100])
        ax.grid(alpha=0.3)
        ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def ratio_markdown(rows: Sequence[dict]) -> str:
    header = ["Backbone", "Test", "Ratio", "Macro F1"]
    body = [[BACKBONE_NAMES.get(r["backbone"], r["backbone"]), SOURCE_NAMES[r["source_test"]], f"{r['ratio']:.1f}",
             f"{r['macro_f1_mean']:.3f} ({r['macro_f1_min']:.3f} to {r['macro_f1_max']:.3f})"] for r in rows]
    return "# Macro F1 against training data ratio\n\n" + _table(header, body)


def lora_rows(results: Sequence[ExperimentResult]) -> list[dict]:
    rows = []
    for r in results:
        for t in r.spec.test_sources:
            s = stat(r, t, "macro_f1")
            rows.append({"condition": f"{r.spec.train_source}->{t}", "backbone": r.spec.backbone,
                         "peft": r.spec.peft, "macro_f1_mean": s.mean, "macro_f1_min": s.lo, "macro_f1_max": s.hi})
    return rows


def plot_lora(rows: Sequence[dict], path: Path) -> None:
    conditions = sorted({r["condition"] for r in rows})
    backbones = sorted({r["backbone"] for r in rows})
    pefts = [p for p in PEFT_NAMES if any(r["peft"] == p for r in rows)]
    fig, axes = plt.subplots(1, len(conditions), figsize=(4.2 * len(conditions), 3.4), squeeze=False)
    width = 0.8 / max(1, len(pefts))
    for ax, cond in zip(axes[0], conditions):
        for j, peft in enumerate(pefts):
            vals = []
            for bb in backbones:
                match = [r for r in rows if r["condition"] == cond and r["backbone"] == bb and r["peft"] == peft]
                vals.append(match[0]["macro_f1_mean"] if match else np.nan)
            ax.bar(np.arange(len(backbones)) + (j - (len(pefts) - 1) / 2) * width, vals, width,
                   label=PEFT_NAMES[peft])
        a, b = cond.split("->")
        ax.set_title(f"Train {SOURCE_NAMES[a]}, test {SOURCE_NAMES[b]}")
        ax.set_xticks(np.arange(len(backbones)), [BACKBONE_NAMES.get(b, b) for b in backbones])
        ax.set_ylabel("Macro F1")
        ax.set_ylim(0, 1)
        ax.legend(fontsize=8, loc="lower right")
    fig.tight_layout()
    _save(fig, path)


def lora_markdown(rows: Sequence[dict]) -> str:
    header = ["Condition", "Backbone"] + [PEFT_NAMES[p] for p in PEFT_NAMES]
    body = []
    for cond in sorted({r["condition"] for r in rows}):
        for bb in sorted({r["backbone"] for r in rows}):
            cells = []
            for p in PEFT_NAMES:
                m = [r for r in rows if r["condition"] == cond and r["backbone"] == bb and r["peft"] == p]
                cells.append(f"{m[0]['macro_f1_mean']:.3f}" if m else "n/a")
            a, b = cond.split("->")
            body.append([f"{SOURCE_NAMES[a]} to {SOURCE_NAMES[b]}", BACKBONE_NAMES.get(bb, bb)] + cells)
    return "# Macro F1 with low-rank adapters\n\n" + _table(header, body)


def summary_rows(results: Sequence[ExperimentResult]) -> list[dict]:
    rows = []
    for r in results:
        for t in r.spec.test_sources:
            row = {"experiment": r.spec.name, "backbone": r.spec.backbone, "source_train": r.spec.train_source,
                   "source_test": t, "peft": r.spec.peft, "ratio": r.spec.train_ratio}
            for m in METRIC_NAMES:
                s = stat(r, t, m)
                row[f"{m}_mean"] = s.mean
                row[f"{m}_half_range"] = s.half_range
            rows.append(row)
    return rows
