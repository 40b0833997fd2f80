"""Self-supervised pre-training: span masking, contrastive and diversity losses, training loop."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .autodiff import Adam
from .backbone import Backbone, BackboneConfig, build_backbone, sample_gumbel
from .dsp import SAMPLE_RATE, read_wav, resample_linear
from .errors import ConfigError, DataError, NumericalError
from .rng import make_rng
from .vad import VadParams, detect_speech

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 20
    lr: float = 1e-3
    batch_size: int = 8
    crop_s: float = 1.0
    seed: int = 0
    use_vad: bool = True
    max_utterances: int | None = None


def sample_mask(T: int, mask_ratio: float, span: int, rng: np.random.Generator) -> np.ndarray:
    """Boolean frame mask built from random spans until ``mask_ratio`` is reached."""
    if T < span:
        raise ValueError(f"need T >= span, got T={T}, span={span}")
    mask = np.zeros(T, dtype=bool)
    if mask_ratio <= 0:
        return mask
    target = mask_ratio * T
    while mask.sum() < target:
        start = int(rng.integers(0, T))
        mask[start : start + span] = True
    return mask


def sample_negatives(n_masked: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """``(n_masked, k)`` indices of other masked frames, without replacement per row."""
    if n_masked < k + 1:
        raise DataError(f"insufficient negatives: {n_masked} masked frames for K={k}")
    keys = rng.random((n_masked, n_masked))
    np.fill_diagonal(keys, np.inf)
    return np.argsort(keys, axis=1, kind="stable")[:, :k]


def contrastive_logits(c: torch.Tensor, q: torch.Tensor, negatives: np.ndarray, kappa: float,
                       mask_identical: bool = True) -> torch.Tensor:
    """Cosine-similarity logits ``(n, K+1)`` for masked frames, positive first.

    ``c`` and ``q`` hold the masked frames only. Negatives that are exactly
    equal to the positive code get ``-inf``.
    """
    neg = q[torch.as_tensor(negatives)]
    targets = torch.cat([q.unsqueeze(1), neg], dim=1)
    logits = F.cosine_similarity(c.unsqueeze(1), targets, dim=-1) / kappa
    if mask_identical:
        same = (neg == q.unsqueeze(1)).all(-1)
        if bool(same.any()):
            pad = torch.zeros_like(same[:, :1])
            logits = logits.masked_fill(torch.cat([pad, same], dim=1), float("-inf"))
    return logits


def contrastive_loss(c: torch.Tensor, q: torch.Tensor, mask, k: int, kappa: float,
                     rng: np.random.Generator | None = None, negatives: np.ndarray | None = None,
                     mask_identical: bool = True) -> torch.Tensor:
    """Mean InfoNCE loss over masked frames of one utterance (``c``, ``q``: ``(T, D)``)."""
    idx = torch.as_tensor(np.flatnonzero(np.asarray(mask)))
    n = len(idx)
    if n < k + 1:
        raise DataError(f"insufficient negatives: {n} masked frames for K={k}")
    if negatives is None:
        negatives = sample_negatives(n, k, rng if rng is not None else make_rng(0))
    logits = contrastive_logits(c[idx], q[idx], negatives, kappa, mask_identical)
    return F.cross_entropy(logits, torch.zeros(n, dtype=torch.long))


def codebook_perplexity(probs: torch.Tensor) -> torch.Tensor:
    """Per-group exp(entropy) of the distribution averaged over all leading axes."""
    G, V = probs.shape[-2:]
    avg = probs.reshape(-1, G, V).mean(0)
    return torch.exp(-torch.special.xlogy(avg, avg).sum(-1))


def diversity_loss(probs: torch.Tensor) -> torch.Tensor:
    """(G*V - sum_g perplexity_g) / (G*V), in [0, 1]."""
    G, V = probs.shape[-2:]
    return (G * V - codebook_perplexity(probs).sum()) / (G * V)


def gumbel_tau(step: int, cfg: BackboneConfig) -> float:
    return max(cfg.gumbel_end, cfg.gumbel_start * cfg.gumbel_decay**step)


def pretrain_loss(model: Backbone, x: torch.Tensor, lengths, masks: np.ndarray, noise, negatives: list[np.ndarray],
                  tau: float, hard: bool = True) -> tuple[torch.Tensor, dict]:
    """Full objective for one padded batch with pre-drawn randomness.

    ``masks`` is ``(B, T)`` bool, ``negatives[b]`` indexes masked frames of
    item ``b``. Returns ``(loss, stats)``.
    """
    cfg = model.cfg
    z, fl = model.conv_encode(x, lengths)
    q, probs = model.quantizer(z, tau, noise, hard)
    mask_t = torch.as_tensor(masks)
    hidden = model.contextualize(z, mask_t, fl)
    c = model.final_proj(hidden[-1])
    logits = []
    for b in range(z.shape[0]):
        idx = torch.as_tensor(np.flatnonzero(masks[b]))
        logits.append(contrastive_logits(c[b, idx], q[b, idx], negatives[b], cfg.logit_temp))
    logits = torch.cat(logits)
    closs = F.cross_entropy(logits, torch.zeros(len(logits), dtype=torch.long))
    valid = torch.arange(z.shape[1])[None, :] < fl[:, None]
    vprobs = probs[valid]
    dloss = diversity_loss(vprobs)
    loss = closs + cfg.diversity_weight * dloss
    return loss, {
        "contrastive": closs.detach(),
        "diversity": dloss.detach(),
        "perplexity": codebook_perplexity(vprobs.detach()),
    }


def draw_batch_randomness(model: Backbone, frame_lengths, T: int, rng: np.random.Generator, dtype=torch.float32):
    """Masks, Gumbel noise and negatives for one batch; K is clamped to what the masks allow."""
    cfg = model.cfg
    masks = np.zeros((len(frame_lengths), T), dtype=bool)
    for b, n in enumerate(frame_lengths):
        masks[b, :n] = sample_mask(int(n), cfg.mask_ratio, min(cfg.mask_span, int(n)), rng)
    k = min(cfg.num_negatives, int(masks.sum(1).min()) - 1)
    if k < 1:
        raise DataError("insufficient negatives: utterances too short for masking")
    negatives = [sample_negatives(int(m.sum()), k, rng) for m in masks]
    noise = sample_gumbel((len(frame_lengths), T, cfg.num_groups, cfg.num_vars), rng, dtype)
    return masks, noise, negatives


def load_utterances(path: str | Path, vad: VadParams | None = VadParams(), limit: int | None = None) -> list[np.ndarray]:
    """Load a directory of mono WAVs at the pipeline rate, trimmed to detected speech."""
    root = Path(path)
    if not root.is_dir():
        raise ConfigError(f"utterance directory not found: {root}")
    index = root / "utterances.jsonl"
    if index.is_file():
        with open(index) as fh:
            files = [root / json.loads(line)["path"] for line in fh if line.strip()]
    else:
        files = sorted(root.glob("*.wav"))
    if limit is not None:
        files = files[:limit]
    out = []
    for f in files:
        wav = read_wav(f)
        if wav.sample_rate != SAMPLE_RATE:
            wav = resample_linear(wav, SAMPLE_RATE)
        x = wav.samples
        if vad is not None:
            segs = detect_speech(wav, vad)
            if not segs:
                continue
            x = x[int(segs[0][0] * SAMPLE_RATE) : int(math.ceil(segs[-1][1] * SAMPLE_RATE))]
        out.append(x.astype(np.float32))
    return out


def _crop_batch(utts: list[np.ndarray], order: np.ndarray, max_len: int, rng: np.random.Generator):
    chunks = []
    for i in order:
        u = utts[i]
        if len(u) > max_len:
            s = int(rng.integers(0, len(u) - max_len + 1))
            u = u[s : s + max_len]
        chunks.append(u)
    lengths = [len(u) for u in chunks]
    x = np.zeros((len(chunks), max(lengths)), dtype=np.float32)
    for b, u in enumerate(chunks):
        x[b, : len(u)] = u
    return torch.from_numpy(x), lengths


def pretrain(
    utterances: list[np.ndarray],
    cfg: BackboneConfig = BackboneConfig(),
    pcfg: PretrainConfig = PretrainConfig(),
    model: Backbone | None = None,
) -> tuple[Backbone, list[dict]]:
    """Train a backbone on unlabeled utterances; returns the model and per-epoch log rows."""
    if not utterances:
        raise DataError("empty pre-training corpus")
    min_len = cfg.receptive_field + cfg.total_stride * 2 * (cfg.num_negatives + 1)
    utts = [u for u in utterances if len(u) >= min_len]
    if not utts:
        raise DataError("no utterance is long enough for masking")
    model = model if model is not None else build_backbone(cfg, pcfg.seed)
    cfg = model.cfg
    opt = Adam(model.parameters(), lr=pcfg.lr)
    rng = make_rng(pcfg.seed, "pretrain")
    max_len = int(pcfg.crop_s * SAMPLE_RATE)
    step = 0
    rows = []
    model.train()
    for epoch in range(1, pcfg.epochs + 1):
        order = rng.permutation(len(utts))
        sums = {"contrastive": 0.0, "diversity": 0.0, "perplexity": 0.0}
        ppl_groups = np.zeros(cfg.num_groups)
        n_steps = 0
        for s in range(0, len(order), pcfg.batch_size):
            x, lengths = _crop_batch(utts, order[s : s + pcfg.batch_size], max_len, rng)
            fl = [cfg.num_frames(n) for n in lengths]
            masks, noise, negatives = draw_batch_randomness(model, fl, max(fl), rng)
            tau = gumbel_tau(step, cfg)
            loss, stats = pretrain_loss(model, x, lengths, masks, noise, negatives, tau)
            if not torch.isfinite(loss):
                raise NumericalError(f"non-finite pre-training loss at epoch {epoch}, step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
            n_steps += 1
            sums["contrastive"] += float(stats["contrastive"])
            sums["diversity"] += float(stats["diversity"])
            ppl = stats["perplexity"].numpy()
            ppl_groups += ppl
            sums["perplexity"] += float(ppl.mean())
        row = {
            "epoch": epoch,
            "contrastive_loss": sums["contrastive"] / n_steps,
            "diversity_loss": sums["diversity"] / n_steps,
            "codebook_perplexity": sums["perplexity"] / n_steps,
            "group_perplexity": (ppl_groups / n_steps).tolist(),
            "num_negatives": cfg.num_negatives,
            "tau": gumbel_tau(step, cfg),
        }
        rows.append(row)
        log.info("epoch %d contrastive %.4f diversity %.4f ppl %.2f", epoch, row["contrastive_loss"],
                 row["diversity_loss"], row["codebook_perplexity"])
    model.eval()
    return model, rows


def write_pretrain_log(path: str | Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "contrastive_loss", "diversity_loss", "codebook_perplexity"])
        for r in rows:
            w.writerow([r["epoch"], f"{r['contrastive_loss']:.6f}", f"{r['diversity_loss']:.6f}",
                        f"{r['codebook_perplexity']:.6f}"])
