"""Low-rank adapters on the backbone's feedforward or query/value projections."""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .backbone import Backbone
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, DataError
from .rng import make_rng

VARIANT_TARGETS = {
    "ff": ("ffn.fc1", "ffn.fc2"),
    "qv": ("attn.q_proj", "attn.v_proj"),
}


@dataclass(frozen=True)
class LoraSpec:
    variant: str = "ff"
    rank: int = 8
    alpha: float = 16.0

    def __post_init__(self):
        if self.variant not in VARIANT_TARGETS:
            raise ConfigError(f"unknown LoRA variant {self.variant!r}; expected one of {sorted(VARIANT_TARGETS)}")
        if self.rank < 1:
            raise ConfigError("LoRA rank must be >= 1")
        if not self.alpha > 0:
            raise ConfigError("LoRA alpha must be positive")

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank


class LoRALinear(nn.Module):
    """``base(x) + (alpha/r) * x A^T B^T`` with ``base`` frozen."""

    def __init__(self, base: nn.Linear, rank: int, alpha: float, rng: np.random.Generator):
        super().__init__()
        self.base = base
        for p in self.base.parameters():
            p.requires_grad_(False)
        self.scaling = alpha / rank
        n_in, n_out = base.in_features, base.out_features
        a = rng.normal(0.0, 1.0 / rank, size=(rank, n_in))
        self.lora_A = nn.Parameter(torch.as_tensor(a, dtype=base.weight.dtype))
        self.lora_B = nn.Parameter(torch.zeros(n_out, rank, dtype=base.weight.dtype))

    def effective_weight(self) -> torch.Tensor:
        return self.base.weight + self.scaling * self.lora_B @ self.lora_A

    def forward(self, x):
        return self.base(x) + self.scaling * ((x @ self.lora_A.T) @ self.lora_B.T)


def target_names(model: Backbone, variant: str) -> list[str]:
    return [f"layers.{i}.{t}" for i in range(len(model.layers)) for t in VARIANT_TARGETS[variant]]


def lora_wrap(model: Backbone, spec: LoraSpec, rng: np.random.Generator | None = None) -> tuple[Backbone, dict[str, LoRALinear]]:
    """Copy ``model``, freeze every base weight and wrap the spec's targets.

    Returns the wrapped copy and an inventory ``{target name: LoRALinear}``;
    the only trainable backbone tensors are the adapters' A and B.
    """
    rng = rng if rng is not None else make_rng(0, "lora")
    wrapped = copy.deepcopy(model)
    for p in wrapped.parameters():
        p.requires_grad_(False)
    inventory = {}
    for name in target_names(wrapped, spec.variant):
        parent_name, attr = name.rsplit(".", 1)
        parent = wrapped.get_submodule(parent_name)
        base = getattr(parent, attr)
        if not isinstance(base, nn.Linear):
            raise ConfigError(f"{name} is not a linear layer")
        layer = LoRALinear(base, spec.rank, spec.alpha, rng)
        setattr(parent, attr, layer)
        inventory[name] = layer
    wrapped.lora_spec = asdict(spec)
    return wrapped, inventory


def trainable_lora_parameters(model: nn.Module) -> dict[str, torch.Tensor]:
    return {n: p for n, p in model.named_parameters() if n.endswith(("lora_A", "lora_B"))}


def lora_parameter_count(inventory: dict[str, LoRALinear]) -> int:
    return sum(m.lora_A.numel() + m.lora_B.numel() for m in inventory.values())


def save_lora(path, wrapped: Backbone) -> None:
    """Write only the adapter tensors plus the spec."""
    spec = getattr(wrapped, "lora_spec", None)
    if spec is None:
        raise DataError("model has no LoRA adapters")
    save_checkpoint(path, {n: p for n, p in trainable_lora_parameters(wrapped).items()}, {"kind": "lora", "spec": spec})


def load_lora(base: Backbone, path) -> Backbone:
    """Rebuild a wrapped backbone from base weights and a delta file."""
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "lora":
        raise DataError(f"{path}: not a LoRA delta file")
    wrapped, _ = lora_wrap(base, LoraSpec(**meta["spec"]))
    params = trainable_lora_parameters(wrapped)
    if set(params) != set(tensors):
        raise DataError(f"{path}: adapter names do not match the base model")
    with torch.no_grad():
        for n, p in params.items():
            p.copy_(torch.from_numpy(tensors[n]))
    return wrapped
