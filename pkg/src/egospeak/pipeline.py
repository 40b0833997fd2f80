"""The full experiment matrix and its report files."""

from __future__ import annotations

import logging
import time
from dataclasses import replace
from pathlib import Path

from . import report
from .backbone import Backbone
from .harness import (ExperimentResult, ExperimentSpec, FeatureStore, HarnessConfig, SegmentSet, run_experiment,
                      write_results)

log = logging.getLogger(__name__)

BACKBONES = ("scratch", "pretrained")
REPORT_FILES = ("table1.md", "table2.md", "table3.md", "fig5_ratio.md", "fig5_ratio.csv", "fig5_ratio.svg",
                "fig6_lora.md", "fig6_lora.csv", "fig6_lora.svg", "results.csv", "summary.csv")


def experiment_matrix(hcfg: HarnessConfig) -> dict[str, list[ExperimentSpec]]:
    seeds, lr = hcfg.seeds, hcfg.classifier.lr
    m: dict[str, list[ExperimentSpec]] = {"table1": [], "table2": [], "ratio": [], "lora": [], "table3": []}
    for bb in BACKBONES:
        m["table1"].append(ExperimentSpec(f"table1_{bb}", "both", ("child", "exam"), bb, lr=lr, seeds=seeds))
        for src in ("child", "exam"):
            m["table2"].append(ExperimentSpec(f"table2_{src}_{bb}", src, ("child", "exam"), bb, lr=lr, seeds=seeds))
        for ratio in hcfg.ratios:
            if ratio != 1.0:
                m["ratio"].append(ExperimentSpec(f"ratio{ratio:g}_{bb}", "both", ("child", "exam"), bb,
                                                 train_ratio=ratio, lr=lr, seeds=seeds))
        for peft in ("ff-lora", "qv-lora"):
            for src in ("child", "exam"):
                m["lora"].append(ExperimentSpec(f"lora_{peft}_{src}_{bb}", src, (src,), bb, peft=peft, lr=lr,
                                                seeds=hcfg.lora_seeds, epochs=hcfg.lora_epochs))
        m["table3"].append(ExperimentSpec(f"table3_dual_{bb}", "dual", ("dual",), bb, lr=lr, seeds=seeds))
    return m


def run_matrix(data: SegmentSet, backbones: dict[str, Backbone], hcfg: HarnessConfig,
               timings: dict[str, float] | None = None) -> dict[str, list[ExperimentResult]]:
    """Run every group; ``timings`` (if given) receives wall seconds per experiment name."""
    store = FeatureStore(data, backbones)
    out: dict[str, list[ExperimentResult]] = {}
    for group, specs in experiment_matrix(hcfg).items():
        out[group] = []
        for spec in specs:
            log.info("running %s", spec.name)
            t0 = time.monotonic()
            out[group].append(run_experiment(spec, data, backbones, hcfg, store))
            if timings is not None:
                timings[spec.name] = time.monotonic() - t0
    return out


def ratio_results(results: dict[str, list[ExperimentResult]]) -> list[ExperimentResult]:
    """Ratio sweep runs plus the full-data runs shared with the first table."""
    return results["ratio"] + results["table1"]


def lora_results(results: dict[str, list[ExperimentResult]]) -> list[ExperimentResult]:
    """Adapter runs alongside matching frozen baselines (same train and test channel)."""
    base = []
    for r in results["table2"]:
        base.append(ExperimentResult(replace(r.spec, test_sources=(r.spec.train_source,)),
                                     [row for row in r.rows if row["source_test"] == r.spec.train_source],
                                     {r.spec.train_source: r.reports[r.spec.train_source]}))
    return base + results["lora"]


def write_reports(out_dir: str | Path, results: dict[str, list[ExperimentResult]]) -> list[Path]:
    out = Path(out_dir)
    all_results = [r for group in results.values() for r in group]
    rows = [row for r in all_results for row in r.rows]
    write_results(out / "results.csv", rows)
    report.write_csv(out / "summary.csv", report.summary_rows(all_results))
    (out / "table1.md").write_text(report.table_sources("Pooled training channels", results["table1"]))
    (out / "table2.md").write_text(report.table_sources("Training and test channel combinations", results["table2"]))
    mono = results["table1"] + results["table2"]
    (out / "table3.md").write_text(report.table_dual(results["table3"], mono))
    rr = report.ratio_rows(ratio_results(results))
    report.write_csv(out / "fig5_ratio.csv", rr)
    (out / "fig5_ratio.md").write_text(report.ratio_markdown(rr))
    report.plot_ratio(rr, out / "fig5_ratio.svg")
    lr_rows = report.lora_rows(lora_results(results))
    report.write_csv(out / "fig6_lora.csv", lr_rows)
    (out / "fig6_lora.md").write_text(report.lora_markdown(lr_rows))
    report.plot_lora(lr_rows, out / "fig6_lora.svg")
    return [out / f for f in REPORT_FILES]
