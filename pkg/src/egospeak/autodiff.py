"""Gradient plumbing on top of torch tensors.

torch supplies the tensor type and the reverse-mode tape. This module adds
the pieces the rest of the package relies on being exactly specified: a
gradient call that zero-fills unreachable parameters, a central
finite-difference checker that is independent of the tape, and an Adam
implementation with explicit, inspectable state.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import torch

from .errors import NumericalError

__all__ = [
    "AdamState",
    "Adam",
    "adam_step",
    "forward_backward",
    "grad_check",
    "grad_check_module",
    "relative_error",
]


def forward_backward(output: torch.Tensor, parameters: Sequence[torch.Tensor]) -> list[torch.Tensor]:
    """Gradients of a scalar ``output`` with respect to ``parameters``.

    Parameters the output does not depend on (or that do not require grad)
    get zero tensors of their own shape.
    """
    if output.numel() != 1 or output.dim() != 0:
        raise ValueError(f"forward_backward needs a scalar output, got shape {tuple(output.shape)}")
    live = [i for i, p in enumerate(parameters) if p.requires_grad]
    grads: list[torch.Tensor] = [torch.zeros_like(p) for p in parameters]
    if not live or not output.requires_grad:
        return grads
    got = torch.autograd.grad(output, [parameters[i] for i in live], allow_unused=True)
    for i, g in zip(live, got):
        if g is not None:
            grads[i] = g
    return grads


def relative_error(g_ad: np.ndarray, g_fd: np.ndarray) -> float:
    """max |a - f| / max(|a|, |f|, 1e-8) over coordinates."""
    g_ad = np.asarray(g_ad, dtype=np.float64).ravel()
    g_fd = np.asarray(g_fd, dtype=np.float64).ravel()
    if g_ad.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(g_ad), np.abs(g_fd)), 1e-8)
    return float(np.max(np.abs(g_ad - g_fd) / denom))


def _pick_coords(n: int, max_coords: int | None, rng: np.random.Generator | None) -> np.ndarray:
    if max_coords is None or n <= max_coords:
        return np.arange(n)
    rng = rng if rng is not None else np.random.Generator(np.random.PCG64(0))
    return np.sort(rng.choice(n, size=max_coords, replace=False))


def grad_check(
    op: Callable[[torch.Tensor], torch.Tensor],
    point: torch.Tensor,
    eps: float = 1e-6,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
    fd_dtype: torch.dtype | None = None,
) -> float:
    """Compare autodiff against central differences for a scalar ``op``.

    Autodiff runs in the dtype of ``point``; pass a float64 tensor for tight
    checks. ``fd_dtype`` evaluates the finite differences in another dtype
    (e.g. float64 as the reference for a float32 gradient); ``op`` must then
    accept either dtype. ``max_coords`` limits the sweep to a random subset.
    Returns the maximum relative error over the checked coordinates.
    """
    x = point.detach().clone().requires_grad_(True)
    out = op(x)
    (g_ad,) = forward_backward(out, [x])
    g_ad = g_ad.detach().reshape(-1)

    base = point.detach().clone().reshape(-1)
    if fd_dtype is not None:
        base = base.to(fd_dtype)
    coords = _pick_coords(base.numel(), max_coords, rng)
    g_fd = np.empty(len(coords))
    with torch.no_grad():
        for j, c in enumerate(coords):
            xp = base.clone()
            xp[c] += eps
            xm = base.clone()
            xm[c] -= eps
            fp = float(op(xp.reshape(point.shape)))
            fm = float(op(xm.reshape(point.shape)))
            g_fd[j] = (fp - fm) / (2.0 * eps)
    return relative_error(g_ad[torch.as_tensor(coords)].numpy(), g_fd)


def grad_check_module(
    loss_fn: Callable[[], torch.Tensor],
    parameters: Iterable[tuple[str, torch.nn.Parameter]],
    eps: float = 1e-6,
    max_coords_per_tensor: int | None = 16,
    rng: np.random.Generator | None = None,
) -> dict[str, float]:
    """Finite-difference check of ``loss_fn`` against each named parameter.

    ``loss_fn`` must be a deterministic function of the parameters (fix any
    noise, masks and negatives beforehand). Returns the max relative error
    per parameter name.
    """
    named = [(n, p) for n, p in parameters if p.requires_grad]
    params = [p for _, p in named]
    out = loss_fn()
    grads = forward_backward(out, params)
    errors: dict[str, float] = {}
    rng = rng if rng is not None else np.random.Generator(np.random.PCG64(0))
    with torch.no_grad():
        for (name, p), g in zip(named, grads):
            flat = p.data.view(-1)
            coords = _pick_coords(flat.numel(), max_coords_per_tensor, rng)
            g_fd = np.empty(len(coords))
            for j, c in enumerate(coords):
                orig = flat[c].item()
                flat[c] = orig + eps
                fp = float(loss_fn())
                flat[c] = orig - eps
                fm = float(loss_fn())
                flat[c] = orig
                g_fd[j] = (fp - fm) / (2.0 * eps)
            errors[name] = relative_error(g.reshape(-1)[torch.as_tensor(coords)].numpy(), g_fd)
    return errors


@dataclass
class AdamState:
    """Moment accumulators and step counter for :func:`adam_step`."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[torch.Tensor] = field(default_factory=list)
    v: list[torch.Tensor] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[torch.Tensor], lr: float, **kw) -> "AdamState":
        return cls(
            lr=lr,
            m=[torch.zeros_like(p) for p in params],
            v=[torch.zeros_like(p) for p in params],
            **kw,
        )


@torch.no_grad()
def adam_step(
    params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor], state: AdamState
) -> tuple[Sequence[torch.Tensor], AdamState]:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise ValueError("params, grads and Adam accumulators differ in length")
    for p, g, m in zip(params, grads, state.m):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError(f"shape mismatch: param {tuple(p.shape)}, grad {tuple(g.shape)}, state {tuple(m.shape)}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
        v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
        denom = (v / bc2).sqrt_().add_(state.eps)
        p.addcdiv_(m / bc1, denom, value=-state.lr)
    return params, state


class Adam:
    """Minimal optimizer wrapper reading ``.grad`` like ``torch.optim``."""

    def __init__(self, params: Iterable[torch.Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = [p for p in params if p.requires_grad]
        self.state = AdamState.for_params(self.params, lr, beta1=betas[0], beta2=betas[1], eps=eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else torch.zeros_like(p) for p in self.params]
        for g in grads:
            if not bool(torch.isfinite(g).all()):
                raise NumericalError("non-finite gradient")
        adam_step(self.params, grads, self.state)
