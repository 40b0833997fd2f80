"""Command-line entry point: ``egospeak <subcommand>``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from .backbone import Backbone, build_backbone, load_backbone, save_backbone
from .config import RunConfig, load_config, override, write_resolved
from .dsp import read_wav, write_wav
from .errors import ConfigError, DataError, EgospeakError, NumericalError
from .harness import (PEFT_VARIANTS, ExperimentSpec, kfold_split, load_segments, run_experiment, write_predictions,
                      write_results)
from .head import load_classifier, predict, save_classifier
from .metrics import compute_metrics
from .pipeline import run_matrix, write_reports
from .pretrain import load_utterances, pretrain, write_pretrain_log
from .synth import generate_corpus, generate_pretrain_corpus, read_manifest
from .vad import apply_exclusion, concat_segments, detect_speech

log = logging.getLogger("egospeak")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 2, 3, 4
OUT_ROOT_ENV = "EGOSPEAK_OUT_ROOT"

# Dotted overrides applied by ``--preset``.
PRESETS = {
    "default": {},
    "smoke": {
        "harness.seeds": (0, 1),
        "harness.max_segments_per_session": 8,
        "harness.lora_epochs": 1,
        "harness.classifier.epochs": 2,
        "pretrain.epochs": 1,
        "pretrain.max_utterances": 16,
    },
}


def _out_dir(arg: str) -> Path:
    p = Path(arg)
    root = os.environ.get(OUT_ROOT_ENV)
    return Path(root) / p if root and not p.is_absolute() else p


def _prepare_out(path: Path) -> Path:
    if path.exists() and not path.is_dir():
        raise ConfigError(f"output path exists and is not a directory: {path}")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _require_dir(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise ConfigError(f"{what} not found: {p}")
    return p


def _config(args, **overrides) -> RunConfig:
    cfg = load_config(getattr(args, "config", None))
    for key, value in PRESETS[getattr(args, "preset", "default")].items():
        cfg = override(cfg, key, value)
    for key, value in overrides.items():
        if value is not None:
            cfg = override(cfg, key, value)
    return cfg


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _load_backbone_arg(spec: str, cfg: RunConfig, seed: int) -> tuple[str, Backbone]:
    if spec == "scratch":
        return "scratch", build_backbone(cfg.backbone, seed)
    p = Path(spec)
    if not p.is_file():
        raise ConfigError(f"backbone checkpoint not found: {p}")
    return "pretrained", load_backbone(p)


def cmd_gen_corpus(args) -> None:
    cfg = _config(args, **{"corpus.sessions": args.sessions, "corpus.seed": args.seed,
                           "corpus.pretrain_utterances": args.pretrain_utterances,
                           "corpus.synth.duration_s": args.duration_s})
    c = cfg.corpus
    out = _prepare_out(_out_dir(args.out))
    generate_corpus(out, c.sessions, c.seed, c.synth)
    if c.pretrain_utterances > 0:
        generate_pretrain_corpus(out / "pretrain", c.pretrain_utterances, c.seed, c.pretrain_corpus)
    write_resolved(out, cfg, {"seeds": {"corpus": c.seed}})


def _wav_inputs(path: Path) -> list[Path]:
    if path.is_file():
        return [path]
    if path.is_dir():
        files = sorted(path.rglob("*.wav"))
        if not files:
            raise DataError(f"no WAV files under {path}")
        return files
    raise ConfigError(f"input not found: {path}")


def cmd_vad(args) -> None:
    cfg = _config(args)
    src = Path(args.inp)
    files = _wav_inputs(src)
    out = _prepare_out(_out_dir(args.out))
    clips = _prepare_out(_out_dir(args.clips_out)) if args.clips_out else None
    rows, summary = [], []
    for f in files:
        wav = read_wav(f)
        segs = apply_exclusion(detect_speech(wav, cfg.vad), wav.duration_s, args.min_duration_s)
        rel = f.relative_to(src).as_posix() if src.is_dir() else f.name
        summary.append({"file": rel, "duration_s": round(wav.duration_s, 6), "excluded": segs is None,
                        "segments": 0 if segs is None else len(segs),
                        "speech_s": 0.0 if segs is None else round(sum(e - s for s, e in segs), 6)})
        session_id = rel[: -len(f.suffix)] if f.suffix else rel
        for s, e in segs or []:
            rows.append(f"{session_id},{s:.3f},{e:.3f},speech")
        if clips is not None and segs:
            target = clips / rel
            target.parent.mkdir(parents=True, exist_ok=True)
            write_wav(target, concat_segments(wav, segs))
    (out / "segments.csv").write_text("session_id,start_s,end_s,label\n" + "".join(r + "\n" for r in rows))
    _write_json(out / "vad_summary.json", summary)
    write_resolved(out, cfg, {"min_duration_s": args.min_duration_s})


def _pretrain_dir(corpus: Path) -> Path:
    sub = corpus / "pretrain"
    return sub if sub.is_dir() else corpus


def _run_pretrain(corpus: Path, cfg: RunConfig, out: Path) -> Backbone:
    utts = load_utterances(_pretrain_dir(corpus), cfg.vad if cfg.pretrain.use_vad else None, cfg.pretrain.max_utterances)
    model, rows = pretrain(utts, cfg.backbone, cfg.pretrain)
    save_backbone(out / "backbone.ckpt", model, {"seed": cfg.pretrain.seed, "utterances": len(utts)})
    write_pretrain_log(out / "pretrain_log.csv", rows)
    return model


def cmd_pretrain(args) -> None:
    cfg = _config(args, **{"pretrain.epochs": args.epochs, "pretrain.lr": args.lr, "pretrain.seed": args.seed})
    corpus = _require_dir(args.corpus, "corpus directory")
    out = _prepare_out(_out_dir(args.out))
    _run_pretrain(corpus, cfg, out)
    write_resolved(out, cfg, {"seeds": {"pretrain": cfg.pretrain.seed}})


def _split(cfg: RunConfig, sessions: list[str], fold: int):
    h = cfg.harness
    folds = kfold_split(sessions, h.folds, h.sessions_per_fold, h.split_seed)
    if not 0 <= fold < len(folds):
        raise ConfigError(f"fold must be in [0, {len(folds)})")
    return folds[fold]


def _fold_idx(data, sessions) -> list[int]:
    keep = set(sessions)
    return [i for i, s in enumerate(data.segments) if s.session_id in keep]


def _examples_for(data, idx, source: str):
    if source == "dual":
        return [(data.audio["child"][i], data.audio["exam"][i]) for i in idx], data.labels(idx)
    chans = ("child", "exam") if source == "both" else (source,)
    ex = [data.audio[c][i] for c in chans for i in idx]
    return ex, np.concatenate([data.labels(idx)] * len(chans))


def cmd_finetune(args) -> None:
    cfg = _config(args, **{"harness.classifier.lr": args.lr, "harness.classifier.epochs": args.epochs})
    corpus = _require_dir(args.corpus, "corpus directory")
    name, bb = _load_backbone_arg(args.backbone, cfg, args.seed)
    spec = ExperimentSpec("finetune", args.train_source, (args.test_source,), name, peft=args.peft,
                          train_ratio=args.ratio, lr=cfg.harness.classifier.lr, seeds=(args.seed,))
    train_s, test_s = _split(cfg, _sessions(corpus), args.fold)
    data = load_segments(corpus, cfg.harness)
    out = _prepare_out(_out_dir(args.out))
    result = run_experiment(spec, data, {name: bb}, cfg.harness, folds=(args.fold,), keep_models=True)
    write_results(out / "results.csv", result.rows)
    meta = {"fold": args.fold, "train_sessions": train_s, "test_sessions": test_s, "train_source": args.train_source,
            "test_source": args.test_source, "backbone": name, "peft": args.peft, "ratio": args.ratio, "seed": args.seed}
    save_classifier(out / "model.ckpt", result.models[(args.seed, args.fold)], meta)
    idx, labels, preds, p_child = result.predictions[(args.seed, args.fold, args.test_source)]
    _write_outcome(out, data, idx, labels, preds, p_child, meta)
    write_resolved(out, cfg, {"seeds": {"finetune": args.seed}, "fold": args.fold})


def _sessions(corpus: Path) -> list[str]:
    return sorted(m.session_id for m in read_manifest(corpus))


def _write_outcome(out: Path, data, idx, labels, preds, p_child, meta: dict) -> None:
    write_predictions(out / "predictions.csv", [data.segments[i] for i in idx], labels, preds, p_child)
    fm = compute_metrics(preds, labels)
    _write_json(out / "metrics.json", {**fm.as_dict(), "tp": fm.tp, "fp": fm.fp, "tn": fm.tn, "fn": fm.fn,
                                       "warnings": list(fm.warnings), **meta})


def cmd_evaluate(args) -> None:
    cfg = _config(args, **{"harness.folds": args.folds})
    model_path = Path(args.model)
    if not model_path.is_file():
        raise ConfigError(f"model checkpoint not found: {model_path}")
    corpus = _require_dir(args.corpus, "corpus directory")
    model, meta = load_classifier(model_path)
    if cfg.harness.folds * cfg.harness.sessions_per_fold != len({*meta["train_sessions"], *meta["test_sessions"]}):
        raise ConfigError("--folds does not match the model's training split")
    test_source = args.test_source or meta["test_source"]
    if (test_source == "dual") != (model.cfg.input_mode == "dual"):
        raise ConfigError(f"test source {test_source!r} does not match a {model.cfg.input_mode} model")
    data = load_segments(corpus, cfg.harness)
    idx = _fold_idx(data, meta["test_sessions"])
    if not idx:
        raise DataError("corpus holds none of the model's test sessions")
    tex, tlabels = _examples_for(data, idx, test_source)
    preds, probs = predict(model, tex)
    out = _prepare_out(_out_dir(args.out))
    _write_outcome(out, data, idx, tlabels, preds, probs[:, 1],
                   {"fold": meta["fold"], "test_sessions": meta["test_sessions"], "test_source": test_source})
    write_resolved(out, cfg, {"model": model_path.name, "seeds": {"finetune": meta.get("seed")}})


def cmd_reproduce(args) -> None:
    cfg = _config(args, **{"seed": args.seed})
    cfg = override(cfg, "pretrain.seed", cfg.seed)
    corpus = _require_dir(args.corpus, "corpus directory")
    if args.pretrained and not Path(args.pretrained).is_file():
        raise ConfigError(f"pretrained checkpoint not found: {args.pretrained}")
    out = _prepare_out(_out_dir(args.out))
    t0 = time.monotonic()
    timings: dict[str, float] = {}
    if args.pretrained:
        pretrained = load_backbone(args.pretrained)
    else:
        pretrained = _run_pretrain(corpus, cfg, out)
        timings["pretrain"] = time.monotonic() - t0
    backbones = {"scratch": build_backbone(cfg.backbone, cfg.seed), "pretrained": pretrained}
    data = load_segments(corpus, cfg.harness)
    results = run_matrix(data, backbones, cfg.harness, timings)
    write_reports(out, results)
    # Wall time is kept out of the result CSVs so reruns stay byte-identical.
    _write_json(out / "timing.json", {k: round(v, 1) for k, v in timings.items()})
    write_resolved(out, cfg, {"seeds": {"run": cfg.seed, "finetune": list(cfg.harness.seeds),
                                        "lora": list(cfg.harness.lora_seeds)},
                              "pretrained": Path(args.pretrained).name if args.pretrained else "backbone.ckpt",
                              "preset": args.preset})
    log.info("reproduce finished in %.1f s", time.monotonic() - t0)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="egospeak", description="Child/adult speaker classification pipeline.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--out", required=True)
        return sp

    g = common(sub.add_parser("gen-corpus", help="render the synthetic session corpus"))
    g.add_argument("--sessions", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--pretrain-utterances", type=int)
    g.add_argument("--duration-s", type=float)
    g.set_defaults(func=cmd_gen_corpus)

    v = common(sub.add_parser("vad", help="detect speech segments"))
    v.add_argument("--in", dest="inp", required=True)
    v.add_argument("--min-duration-s", type=float, default=None,
                   help="drop recordings shorter than this (default: keep all)")
    v.add_argument("--clips-out", help="write concatenated speech clips here")
    v.set_defaults(func=cmd_vad)

    pt = common(sub.add_parser("pretrain", help="self-supervised backbone pre-training"))
    pt.add_argument("--corpus", required=True)
    pt.add_argument("--epochs", type=int)
    pt.add_argument("--lr", type=float)
    pt.add_argument("--seed", type=int)
    pt.set_defaults(func=cmd_pretrain)

    ft = common(sub.add_parser("finetune", help="fine-tune a classifier on one fold"))
    ft.add_argument("--corpus", required=True)
    ft.add_argument("--backbone", required=True, help="'scratch' or a backbone checkpoint")
    ft.add_argument("--train-source", default="both", choices=["child", "exam", "both", "dual"])
    ft.add_argument("--test-source", default="child", choices=["child", "exam", "dual"])
    ft.add_argument("--peft", default="none", choices=sorted(PEFT_VARIANTS))
    ft.add_argument("--ratio", type=float, default=1.0)
    ft.add_argument("--lr", type=float)
    ft.add_argument("--epochs", type=int)
    ft.add_argument("--seed", type=int, default=0)
    ft.add_argument("--fold", type=int, default=0)
    ft.set_defaults(func=cmd_finetune)

    ev = common(sub.add_parser("evaluate", help="evaluate a fine-tuned model on its held-out fold"))
    ev.add_argument("--model", required=True)
    ev.add_argument("--corpus", required=True)
    ev.add_argument("--folds", type=int, default=5)
    ev.add_argument("--test-source", choices=["child", "exam", "dual"])
    ev.set_defaults(func=cmd_evaluate)

    r = common(sub.add_parser("reproduce", help="run the full experiment matrix and write reports"))
    r.add_argument("--corpus", required=True)
    r.add_argument("--seed", type=int)
    r.add_argument("--pretrained", help="reuse this backbone checkpoint instead of pre-training")
    r.add_argument("--preset", choices=sorted(PRESETS), default="default")
    r.set_defaults(func=cmd_reproduce)
    return p


def _fail(kind: str, code: int, err: Exception) -> int:
    print(json.dumps({"error": kind, "exit_code": code, "message": str(err)}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        args.func(args)
    except ConfigError as e:
        return _fail("config", EXIT_CONFIG, e)
    except NumericalError as e:
        return _fail("numerical", EXIT_NUMERICAL, e)
    except DataError as e:
        return _fail("data", EXIT_DATA, e)
    except EgospeakError as e:
        return _fail("data", EXIT_DATA, e)
    return 0


if __name__ == "__main__":
    sys.exit(main())
