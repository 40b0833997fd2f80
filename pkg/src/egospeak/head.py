"""Child/adult classifier on top of backbone hidden states.

Pipeline per segment: backbone hidden states -> softmax-weighted sum over
layers -> kernel-1 conv stack with ReLU -> mean over valid frames -> MLP with
ReLU -> two logits (0 = adult, 1 = child). Dual mode runs the shared
backbone on both device channels and concatenates the per-frame weighted
features before the conv stack.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass
from typing import Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .autodiff import Adam
from .backbone import Backbone, config_from_dict
from .checkpoint import load_checkpoint, load_state, save_checkpoint
from .errors import ConfigError, DataError, NumericalError
from .rng import make_rng

log = logging.getLogger(__name__)

ADULT, CHILD = 0, 1
LR_GRID = (2e-4, 5e-4)

Example = Union[np.ndarray, tuple]


@dataclass(frozen=True)
class ClassifierConfig:
    conv_channels: int = 256
    conv_layers: int = 2
    mlp_hidden: tuple[int, ...] = (128,)
    num_classes: int = 2
    input_mode: str = "mono"
    backbone_trainable: bool = True
    # Keep the conv feature encoder fixed when the backbone is fine-tuned.
    freeze_encoder: bool = False
    lr: float = 5e-4
    lr_grid: tuple[float, ...] = LR_GRID
    epochs: int = 6
    batch_size: int = 16
    # Standardise each (layer, feature) with statistics frozen from the
    # training frames. Inner residual streams of a pre-trained backbone are an
    # order of magnitude larger than the final normed layer and would swamp
    # the mixture otherwise.
    standardize: bool = True

    def __post_init__(self):
        if self.num_classes != 2:
            raise ConfigError("the classifier is binary (child vs adult)")
        if self.input_mode not in ("mono", "dual"):
            raise ConfigError(f"input_mode must be mono or dual, got {self.input_mode!r}")
        if not any(np.isclose(self.lr, g) for g in self.lr_grid):
            raise ConfigError(f"lr {self.lr} is not in the configured grid {self.lr_grid}")
        if self.conv_layers < 1 or self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("conv_layers, epochs and batch_size must be positive")


def layer_weighted_sum(hidden_states, w: torch.Tensor) -> torch.Tensor:
    """sum_l softmax(w)_l * H_l for a list of ``(..., T, d)`` states or a stacked ``(..., L+1, T, d)`` tensor."""
    if isinstance(hidden_states, (list, tuple)):
        shapes = {tuple(h.shape) for h in hidden_states}
        if len(shapes) != 1:
            raise ValueError(f"hidden states differ in shape: {sorted(shapes)}")
        hidden_states = torch.stack(hidden_states, dim=-3)
    if hidden_states.shape[-3] != w.shape[0]:
        raise ValueError(f"{hidden_states.shape[-3]} hidden states but {w.shape[0]} layer weights")
    alpha = torch.softmax(w, dim=0).to(hidden_states.dtype)
    return torch.einsum("...ltd,l->...td", hidden_states, alpha)


def masked_mean(x: torch.Tensor, frame_lengths: torch.Tensor) -> torch.Tensor:
    """Mean over the time axis of ``(B, T, F)`` counting only the first ``frame_lengths[b]`` frames."""
    T = x.shape[1]
    valid = (torch.arange(T)[None, :] < frame_lengths[:, None]).to(x.dtype)
    return (x * valid[..., None]).sum(1) / frame_lengths.to(x.dtype)[:, None]


class ClassifierModel(nn.Module):
    def __init__(self, backbone: Backbone, cfg: ClassifierConfig = ClassifierConfig()):
        super().__init__()
        self.cfg = cfg
        self.backbone = backbone
        d = backbone.cfg.d_model * (2 if cfg.input_mode == "dual" else 1)
        self.layer_logits = nn.Parameter(torch.zeros(backbone.num_hidden))
        chans = [d] + [cfg.conv_channels] * cfg.conv_layers
        self.convs = nn.ModuleList(nn.Conv1d(chans[i], chans[i + 1], 1) for i in range(cfg.conv_layers))
        sizes = [cfg.conv_channels, *cfg.mlp_hidden, cfg.num_classes]
        self.mlp = nn.ModuleList(nn.Linear(sizes[i], sizes[i + 1]) for i in range(len(sizes) - 1))
        self.acts = nn.ModuleList(nn.ReLU() for _ in range(cfg.conv_layers + len(cfg.mlp_hidden)))
        shape = (backbone.num_hidden, 1, backbone.cfg.d_model)
        self.register_buffer("feat_mean", torch.zeros(shape))
        self.register_buffer("feat_std", torch.ones(shape))

    def head_parameters(self):
        return [p for n, p in self.named_parameters() if not n.startswith("backbone.")]

    def layer_weights(self) -> torch.Tensor:
        return torch.softmax(self.layer_logits, dim=0)

    def mix(self, hidden: torch.Tensor) -> torch.Tensor:
        if self.cfg.standardize:
            hidden = (hidden - self.feat_mean) / self.feat_std
        return layer_weighted_sum(hidden, self.layer_logits)

    def fit_standardizer(self, features) -> None:
        """Set per-(layer, feature) mean and std from cached ``(L+1, T_i, d)`` arrays."""
        arrays = [a for f in features for a in (f if isinstance(f, tuple) else (f,))]
        flat = np.concatenate([a.astype(np.float64) for a in arrays], axis=1)
        with torch.no_grad():
            self.feat_mean.copy_(torch.as_tensor(flat.mean(1, keepdims=True)))
            self.feat_std.copy_(torch.as_tensor(flat.std(1, keepdims=True) + 1e-5))

    def head(self, hidden, frame_lengths: torch.Tensor) -> torch.Tensor:
        """Logits from stacked hidden states ``(B, L+1, T, d)``, or a pair of them in dual mode."""
        if self.cfg.input_mode == "dual":
            a, b = hidden
            feats = torch.cat([self.mix(a), self.mix(b)], -1)
        else:
            feats = self.mix(hidden)
        h = feats.transpose(1, 2)
        acts = iter(self.acts)
        for conv in self.convs:
            h = next(acts)(conv(h))
        h = masked_mean(h.transpose(1, 2), frame_lengths)
        for i, lin in enumerate(self.mlp):
            h = lin(h)
            if i < len(self.mlp) - 1:
                h = next(acts)(h)
        return h

    def embed(self, x: torch.Tensor, lengths) -> tuple[torch.Tensor, torch.Tensor]:
        hidden, fl = self.backbone.hidden_states(x, lengths)
        return torch.stack(hidden, dim=1), fl

    def forward(self, x, lengths=None) -> torch.Tensor:
        """Logits for padded waveforms ``(B, N)``, or a ``(xa, xb)`` pair in dual mode."""
        if self.cfg.input_mode == "dual":
            xa, xb = x
            if xa.shape != xb.shape:
                raise DataError("dual-channel inputs must have equal length")
            ha, fl = self.embed(xa, lengths)
            hb, _ = self.embed(xb, lengths)
            return self.head((ha, hb), fl)
        h, fl = self.embed(x, lengths)
        return self.head(h, fl)


def init_head(model: ClassifierModel, rng: np.random.Generator) -> None:
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.startswith("backbone.") or name == "layer_logits":
                continue
            if p.dim() >= 2:
                bound = 1.0 / np.sqrt(int(np.prod(p.shape[1:])))
                p.copy_(torch.as_tensor(rng.uniform(-bound, bound, size=tuple(p.shape)), dtype=p.dtype))
            else:
                p.zero_()


def _pad(arrays: Sequence[np.ndarray]) -> tuple[torch.Tensor, list[int]]:
    lengths = [len(a) for a in arrays]
    out = np.zeros((len(arrays), max(lengths)) + arrays[0].shape[1:], dtype=np.float32)
    for i, a in enumerate(arrays):
        out[i, : len(a)] = a
    return torch.from_numpy(out), lengths


def _check_examples(examples: Sequence[Example], mode: str) -> None:
    for ex in examples:
        if mode == "dual":
            if not (isinstance(ex, tuple) and len(ex) == 2):
                raise DataError("dual mode needs (child_channel, exam_channel) pairs")
            if len(ex[0]) != len(ex[1]):
                raise DataError("dual-channel segments must have equal length")
        elif isinstance(ex, tuple):
            raise DataError("mono mode got a channel pair")


def compute_hidden(backbone: Backbone, waves: Sequence[np.ndarray], batch_size: int = 32) -> list[np.ndarray]:
    """Frozen-backbone hidden states per segment, each ``(L+1, T_i, d)`` float32."""
    out = []
    with torch.no_grad():
        for s in range(0, len(waves), batch_size):
            x, lengths = _pad(waves[s : s + batch_size])
            hidden, fl = backbone.hidden_states(x, lengths)
            stacked = torch.stack(hidden, dim=1).numpy()
            out.extend(stacked[b, :, : int(fl[b])].copy() for b in range(len(lengths)))
    return out


def _batch_hidden(feats: Sequence[np.ndarray]) -> tuple[torch.Tensor, torch.Tensor]:
    """Stack cached ``(L+1, T_i, d)`` arrays into ``(B, L+1, T, d)`` with frame lengths."""
    T = max(f.shape[1] for f in feats)
    out = np.zeros((len(feats), feats[0].shape[0], T, feats[0].shape[2]), dtype=np.float32)
    for i, f in enumerate(feats):
        out[i, :, : f.shape[1]] = f
    return torch.from_numpy(out), torch.as_tensor([f.shape[1] for f in feats])


class _Runner:
    """Feeds batches to the model through whichever path the training mode allows."""

    def __init__(self, model: ClassifierModel, examples, features, mode: str):
        self.model, self.mode = model, mode
        self.examples = examples
        self.features = features
        self.latents = None
        if self.features is None and mode in ("lora", "full-frozen-encoder"):
            # The conv encoder is not trained in these modes, so its output is cached.
            bb = model.backbone
            self.latents = []
            with torch.no_grad():
                for ex in examples:
                    chans = ex if isinstance(ex, tuple) else (ex,)
                    zs = tuple(bb.conv_encode(torch.from_numpy(np.asarray(c, np.float32))[None])[0][0].numpy() for c in chans)
                    self.latents.append(zs)

    def logits(self, idx) -> torch.Tensor:
        model = self.model
        dual = model.cfg.input_mode == "dual"
        if self.features is not None:
            if dual:
                ha, fl = _batch_hidden([self.features[i][0] for i in idx])
                hb, _ = _batch_hidden([self.features[i][1] for i in idx])
                return model.head((ha, hb), fl)
            h, fl = _batch_hidden([self.features[i] for i in idx])
            return model.head(h, fl)
        if self.latents is not None:
            hs = []
            for ch in range(2 if dual else 1):
                z, lengths = _pad([self.latents[i][ch] for i in idx])
                fl = torch.as_tensor(lengths)
                hs.append(torch.stack(model.backbone.contextualize(z, None, fl), dim=1))
            return model.head(tuple(hs) if dual else hs[0], fl)
        if dual:
            xa, lengths = _pad([self.examples[i][0] for i in idx])
            xb, _ = _pad([self.examples[i][1] for i in idx])
            return model((xa, xb), lengths)
        x, lengths = _pad([self.examples[i] for i in idx])
        return model(x, lengths)


def _features_for(backbone: Backbone, examples, mode: str):
    if mode == "dual":
        fa = compute_hidden(backbone, [e[0] for e in examples])
        fb = compute_hidden(backbone, [e[1] for e in examples])
        return list(zip(fa, fb))
    return compute_hidden(backbone, list(examples))


def finetune(
    examples: Sequence[Example],
    labels: Sequence[int],
    cfg: ClassifierConfig,
    backbone: Backbone,
    seed: int = 0,
    lora=None,
    features: Sequence | None = None,
) -> tuple[ClassifierModel, list[dict]]:
    """Train a classifier; returns the model and per-epoch log rows.

    ``lora`` is an optional :class:`~egospeak.lora.LoraSpec`; the backbone is
    then wrapped and only adapters plus head are trained. ``features`` may
    carry precomputed frozen-backbone hidden states (see :func:`compute_hidden`)
    and is only honoured when the backbone is frozen and no LoRA is used.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) != len(examples) or len(labels) == 0:
        raise DataError("examples and labels must be non-empty and of equal length")
    if not set(np.unique(labels)) <= {ADULT, CHILD}:
        raise DataError("labels must be 0 (adult) or 1 (child)")
    if len(np.unique(labels)) < 2:
        raise DataError("degenerate labels: training set holds a single class")
    _check_examples(examples, cfg.input_mode)
    rng = make_rng(seed, "finetune")

    if lora is not None:
        from .lora import lora_wrap

        bb, _ = lora_wrap(backbone, lora, rng=make_rng(seed, "lora-init"))
        mode = "lora"
    elif cfg.backbone_trainable:
        bb = copy.deepcopy(backbone)
        mode = "full-frozen-encoder" if cfg.freeze_encoder else "full"
    else:
        bb = backbone
        mode = "frozen"
    model = ClassifierModel(bb, cfg)
    init_head(model, rng)
    if mode == "frozen" and features is None:
        features = _features_for(bb, examples, cfg.input_mode)
    if cfg.standardize:
        model.fit_standardizer(features if features is not None else _features_for(bb, examples, cfg.input_mode))
    runner = _Runner(model, examples, features if mode == "frozen" else None, mode)

    if mode == "full":
        params = list(model.parameters())
    elif mode == "full-frozen-encoder":
        params = [p for n, p in model.named_parameters()
                  if not n.startswith(("backbone.feature_encoder.", "backbone.feature_norm."))]
    elif mode == "lora":
        params = model.head_parameters() + [p for n, p in bb.named_parameters() if n.endswith(("lora_A", "lora_B"))]
    else:
        params = model.head_parameters()
    opt = Adam(params, lr=cfg.lr)
    target = torch.as_tensor(labels)
    rows = []
    model.train()
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(labels))
        total, correct = 0.0, 0
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s : s + cfg.batch_size]
            logits = runner.logits(idx)
            loss = F.cross_entropy(logits, target[idx])
            if not torch.isfinite(loss):
                raise NumericalError(f"non-finite fine-tuning loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
            correct += int((logits.detach().argmax(1) == target[idx]).sum())
        rows.append({"epoch": epoch, "loss": total / len(labels), "train_acc": correct / len(labels)})
    model.eval()
    for p in params:
        p.grad = None
    return model, rows


def probs_to_labels(probs: np.ndarray) -> np.ndarray:
    """Argmax with ties going to label 0 (adult)."""
    return (probs[:, CHILD] > probs[:, ADULT]).astype(np.int64)


def predict(model: ClassifierModel, examples: Sequence[Example] | None = None, features: Sequence | None = None,
            batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Labels and class probabilities ``(N, 2)``."""
    if features is None:
        _check_examples(examples, model.cfg.input_mode)
    n = len(features) if features is not None else len(examples)
    runner = _Runner(model, examples, features, "infer")
    probs = []
    with torch.no_grad():
        for s in range(0, n, batch_size):
            idx = np.arange(s, min(n, s + batch_size))
            probs.append(torch.softmax(runner.logits(idx), dim=-1).double().numpy())
    probs = np.concatenate(probs) if probs else np.zeros((0, 2))
    return probs_to_labels(probs), probs


def save_classifier(path, model: ClassifierModel, meta: dict | None = None) -> None:
    """Single-file checkpoint: backbone base weights, LoRA section (if any), head."""
    tensors = {}
    for name, t in model.state_dict().items():
        if name.startswith("backbone."):
            section = "lora." if name.endswith(("lora_A", "lora_B")) else ""
            tensors[section + name] = t
        else:
            tensors["head." + name] = t
    info = {
        "kind": "classifier",
        "classifier_config": asdict(model.cfg),
        "backbone_config": asdict(model.backbone.cfg),
        "lora": getattr(model.backbone, "lora_spec", None),
    }
    info.update(meta or {})
    save_checkpoint(path, tensors, info)


def load_classifier(path) -> tuple[ClassifierModel, dict]:
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "classifier":
        raise DataError(f"{path}: not a classifier checkpoint")
    bb = Backbone(config_from_dict(meta["backbone_config"]))
    ccfg = {k: tuple(v) if isinstance(v, list) else v for k, v in meta["classifier_config"].items()}
    if meta.get("lora"):
        from .lora import LoraSpec, lora_wrap

        bb, _ = lora_wrap(bb, LoraSpec(**meta["lora"]), rng=make_rng(0))
    model = ClassifierModel(bb, ClassifierConfig(**ccfg))
    state = {}
    for k, v in tensors.items():
        if k.startswith("head."):
            state[k[5:]] = v
        elif k.startswith("lora."):
            state[k[5:]] = v
        else:
            state[k] = v
    load_state(model, state)
    model.eval()
    return model, meta


__all__ = [
    "ClassifierConfig",
    "ClassifierModel",
    "compute_hidden",
    "finetune",
    "layer_weighted_sum",
    "load_classifier",
    "predict",
    "probs_to_labels",
    "save_classifier",
]
