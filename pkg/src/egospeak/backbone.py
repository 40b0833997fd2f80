"""wav2vec 2.0-style backbone: conv encoder, quantizer, transformer context network.

Shapes follow a batch-first convention: waveforms ``(B, N)``, latent frames
``Z`` ``(B, T, d_z)``, hidden states ``(B, T, d)``. Padded batches carry a
per-item valid length; every operation is arranged so valid frames never see
padded ones (per-frame norms, masked attention, zeroed padding before the
positional convolution).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import load_checkpoint, load_state, save_checkpoint, state_to_tensors
from .errors import ConfigError, DataError
from .rng import make_rng


@dataclass(frozen=True)
class BackboneConfig:
    conv_channels: int = 64
    conv_kernels: tuple[int, ...] = (10, 3, 3, 3, 2)
    conv_strides: tuple[int, ...] = (5, 2, 2, 2, 2)
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    ffn_dim: int = 512
    pos_conv_kernel: int = 15
    pos_conv_groups: int = 4
    num_groups: int = 2  # G
    num_vars: int = 8  # V, entries per group
    codevector_dim: int = 128
    proj_dim: int = 128
    mask_ratio: float = 0.5
    mask_span: int = 10
    logit_temp: float = 0.1  # kappa
    num_negatives: int = 10  # K
    diversity_weight: float = 0.1  # alpha
    gumbel_start: float = 2.0
    gumbel_end: float = 0.5
    gumbel_decay: float = 0.99
    normalize_input: bool = True

    def __post_init__(self):
        if len(self.conv_kernels) != len(self.conv_strides):
            raise ConfigError("conv_kernels and conv_strides differ in length")
        if self.d_model % self.n_heads:
            raise ConfigError("d_model must be divisible by n_heads")
        if self.codevector_dim % self.num_groups:
            raise ConfigError("codevector_dim must be divisible by num_groups")
        if self.pos_conv_kernel % 2 == 0:
            raise ConfigError("pos_conv_kernel must be odd")

    @property
    def total_stride(self) -> int:
        return int(np.prod(self.conv_strides))

    @property
    def receptive_field(self) -> int:
        rf, jump = 1, 1
        for k, s in zip(self.conv_kernels, self.conv_strides):
            rf += (k - 1) * jump
            jump *= s
        return rf

    def num_frames(self, n_samples: int) -> int:
        if n_samples < self.receptive_field:
            return 0
        return (n_samples - self.receptive_field) // self.total_stride + 1

    @classmethod
    def tiny(cls, **kw) -> "BackboneConfig":
        """Small config for unit tests and gradient checks."""
        base = dict(
            conv_channels=8, d_model=16, n_layers=2, n_heads=2, ffn_dim=32, pos_conv_kernel=5,
            pos_conv_groups=2, num_groups=2, num_vars=4, codevector_dim=8, proj_dim=8, num_negatives=3,
        )
        base.update(kw)
        return cls(**base)


class ConvFeatureEncoder(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        chans = [1] + [cfg.conv_channels] * len(cfg.conv_kernels)
        self.convs = nn.ModuleList(
            nn.Conv1d(chans[i], chans[i + 1], k, stride=s)
            for i, (k, s) in enumerate(zip(cfg.conv_kernels, cfg.conv_strides))
        )
        self.norms = nn.ModuleList(nn.LayerNorm(cfg.conv_channels) for _ in cfg.conv_kernels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = x.unsqueeze(1)
        for conv, norm in zip(self.convs, self.norms):
            h = conv(h)
            h = F.gelu(norm(h.transpose(1, 2)).transpose(1, 2))
        return h.transpose(1, 2)


class MultiHeadAttention(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q_proj = nn.Linear(d, d)
        self.k_proj = nn.Linear(d, d)
        self.v_proj = nn.Linear(d, d)
        self.out_proj = nn.Linear(d, d)

    def forward(self, x: torch.Tensor, valid: torch.Tensor | None = None) -> torch.Tensor:
        return attention(self.q_proj(x), self.k_proj(x), self.v_proj(x), self.heads, valid, self.out_proj)


def attention(q, k, v, heads: int, valid: torch.Tensor | None = None, out_proj=None) -> torch.Tensor:
    """Scaled dot-product attention over ``(B, T, d)`` inputs; ``valid`` masks keys."""
    B, T, d = q.shape
    dh = d // heads

    def split(t):
        return t.reshape(B, T, heads, dh).transpose(1, 2)

    scores = split(q) @ split(k).transpose(-1, -2) / math.sqrt(dh)
    if valid is not None:
        scores = scores.masked_fill(~valid[:, None, None, :], float("-inf"))
    out = (torch.softmax(scores, dim=-1) @ split(v)).transpose(1, 2).reshape(B, T, d)
    return out_proj(out) if out_proj is not None else out


class FeedForward(nn.Module):
    def __init__(self, d: int, ffn: int):
        super().__init__()
        self.fc1 = nn.Linear(d, ffn)
        self.fc2 = nn.Linear(ffn, d)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class TransformerLayer(nn.Module):
    """Pre-norm encoder layer."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.attn_norm = nn.LayerNorm(cfg.d_model)
        self.attn = MultiHeadAttention(cfg.d_model, cfg.n_heads)
        self.ffn_norm = nn.LayerNorm(cfg.d_model)
        self.ffn = FeedForward(cfg.d_model, cfg.ffn_dim)

    def forward(self, x, valid=None):
        x = x + self.attn(self.attn_norm(x), valid)
        return x + self.ffn(self.ffn_norm(x))


def gumbel_softmax(logits: torch.Tensor, tau: float, noise: torch.Tensor | None = None, hard: bool = True) -> torch.Tensor:
    """Gumbel-softmax over the last axis; ``hard`` gives a straight-through one-hot."""
    if not tau > 0:
        raise ValueError("gumbel temperature must be positive")
    y = logits if noise is None else logits + noise
    soft = torch.softmax(y / tau, dim=-1)
    if not hard:
        return soft
    onehot = F.one_hot(soft.argmax(dim=-1), soft.shape[-1]).to(soft.dtype)
    return onehot - soft.detach() + soft


class GumbelQuantizer(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.G, self.V = cfg.num_groups, cfg.num_vars
        self.weight_proj = nn.Linear(cfg.conv_channels, self.G * self.V)
        self.codevectors = nn.Parameter(torch.empty(self.G, self.V, cfg.codevector_dim // self.G))
        self.project_q = nn.Linear(cfg.codevector_dim, cfg.proj_dim)

    def forward(self, z: torch.Tensor, tau: float, noise: torch.Tensor | None = None, hard: bool = True):
        """Returns ``(Q, probs)`` with ``probs`` the pre-noise softmax ``(..., G, V)``."""
        logits = self.weight_proj(z).unflatten(-1, (self.G, self.V))
        probs = torch.softmax(logits, dim=-1)
        sel = gumbel_softmax(logits, tau, noise, hard)
        codes = torch.einsum("...gv,gvc->...gc", sel, self.codevectors).flatten(-2)
        return self.project_q(codes), probs


def sample_gumbel(shape, rng: np.random.Generator, dtype=torch.float32) -> torch.Tensor:
    u = rng.uniform(1e-10, 1.0 - 1e-10, size=shape)
    return torch.as_tensor(-np.log(-np.log(u)), dtype=dtype)


class Backbone(nn.Module):
    """Conv encoder (X -> Z), quantizer (Z -> Q) and context network (Z -> C)."""

    def __init__(self, cfg: BackboneConfig = BackboneConfig()):
        super().__init__()
        self.cfg = cfg
        self.feature_encoder = ConvFeatureEncoder(cfg)
        self.feature_norm = nn.LayerNorm(cfg.conv_channels)
        self.feature_proj = nn.Linear(cfg.conv_channels, cfg.d_model)
        self.mask_emb = nn.Parameter(torch.empty(cfg.d_model))
        self.pos_conv = nn.Conv1d(
            cfg.d_model, cfg.d_model, cfg.pos_conv_kernel, padding=cfg.pos_conv_kernel // 2, groups=cfg.pos_conv_groups
        )
        self.layers = nn.ModuleList(TransformerLayer(cfg) for _ in range(cfg.n_layers))
        self.final_norm = nn.LayerNorm(cfg.d_model)
        self.quantizer = GumbelQuantizer(cfg)
        self.final_proj = nn.Linear(cfg.d_model, cfg.proj_dim)

    @property
    def num_hidden(self) -> int:
        return self.cfg.n_layers + 1

    def frame_lengths(self, lengths) -> torch.Tensor:
        return torch.as_tensor([self.cfg.num_frames(int(n)) for n in lengths], dtype=torch.long)

    def conv_encode(self, x: torch.Tensor, lengths=None) -> tuple[torch.Tensor, torch.Tensor]:
        """Waveforms ``(B, N)`` -> latent frames ``Z (B, T, d_z)`` and valid frame counts."""
        if x.dim() == 1:
            x = x.unsqueeze(0)
        B, N = x.shape
        lengths = torch.full((B,), N, dtype=torch.long) if lengths is None else torch.as_tensor(lengths)
        if int(lengths.min()) < self.cfg.receptive_field:
            raise DataError(f"segment too short: {int(lengths.min())} samples < receptive field {self.cfg.receptive_field}")
        if self.cfg.normalize_input:
            sample_valid = (torch.arange(N)[None, :] < lengths[:, None]).to(x.dtype)
            n = lengths.to(x.dtype)[:, None]
            mean = (x * sample_valid).sum(1, keepdim=True) / n
            var = (((x - mean) * sample_valid) ** 2).sum(1, keepdim=True) / n
            x = (x - mean) / torch.sqrt(var + 1e-7) * sample_valid
        z = self.feature_norm(self.feature_encoder(x))
        return z, self.frame_lengths(lengths)

    def contextualize(self, z: torch.Tensor, mask: torch.Tensor | None = None, frame_lengths=None) -> list[torch.Tensor]:
        """Latent frames -> list of ``n_layers + 1`` hidden states ``(B, T, d)``.

        ``mask`` (bool ``(B, T)``) replaces those frames' inputs with the mask
        embedding. The last entry is the final-normed context ``C``.
        """
        B, T, _ = z.shape
        valid = None
        if frame_lengths is not None:
            valid = torch.arange(T)[None, :] < torch.as_tensor(frame_lengths)[:, None]
            if bool(valid.all()):
                valid = None
        x = self.feature_proj(z)
        if mask is not None:
            x = torch.where(mask[..., None], self.mask_emb.to(x.dtype).expand_as(x), x)
        if valid is not None:
            x = x * valid[..., None].to(x.dtype)
        x = x + F.gelu(self.pos_conv(x.transpose(1, 2))).transpose(1, 2)
        hidden = [x]
        for i, layer in enumerate(self.layers):
            x = layer(x, valid)
            hidden.append(self.final_norm(x) if i == len(self.layers) - 1 else x)
        return hidden

    def hidden_states(self, x: torch.Tensor, lengths=None) -> tuple[list[torch.Tensor], torch.Tensor]:
        z, fl = self.conv_encode(x, lengths)
        return self.contextualize(z, None, fl), fl


def init_backbone(model: nn.Module, rng: np.random.Generator) -> nn.Module:
    """Initialise every parameter from ``rng`` in ``named_parameters`` order.

    Weight matrices/kernels: U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases zero;
    norm gains one. Quantizer logit projection N(0, 1), codevectors and the
    mask embedding U(0, 1).
    """
    norm_gains = {id(m.weight) for m in model.modules() if isinstance(m, nn.LayerNorm)}
    with torch.no_grad():
        for name, p in model.named_parameters():
            shape = tuple(p.shape)
            if name.endswith("codevectors") or name.endswith("mask_emb"):
                v = rng.uniform(0.0, 1.0, size=shape)
            elif name.endswith("quantizer.weight_proj.weight"):
                v = rng.standard_normal(shape)
            elif p.dim() >= 2:
                bound = 1.0 / math.sqrt(int(np.prod(shape[1:])))
                v = rng.uniform(-bound, bound, size=shape)
            elif id(p) in norm_gains:
                v = np.ones(shape)
            else:
                v = np.zeros(shape)
            p.copy_(torch.as_tensor(v, dtype=p.dtype))
    return model


def build_backbone(cfg: BackboneConfig, seed: int) -> Backbone:
    return init_backbone(Backbone(cfg), make_rng(seed, "backbone-init"))


def config_from_dict(d: dict) -> BackboneConfig:
    d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
    return BackboneConfig(**d)


def save_backbone(path, model: Backbone, meta: dict | None = None) -> None:
    info = {"kind": "backbone", "config": asdict(model.cfg)}
    info.update(meta or {})
    save_checkpoint(path, state_to_tensors(model, "backbone."), info)


def load_backbone(path) -> Backbone:
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") not in ("backbone", "classifier"):
        raise DataError(f"{path}: not a backbone checkpoint")
    cfg_dict = meta["config"] if meta.get("kind") == "backbone" else meta["backbone_config"]
    model = Backbone(config_from_dict(cfg_dict))
    load_state(model, tensors, "backbone.")
    model.eval()
    return model
