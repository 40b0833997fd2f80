import numpy as np
import pytest
import torch
import torch.nn.functional as F

from egospeak.autodiff import Adam, AdamState, adam_step, forward_backward, grad_check, relative_error
from egospeak.backbone import attention
from egospeak.errors import NumericalError
from egospeak.rng import make_rng

F64 = torch.float64


def rand(shape, seed=0, dtype=F64):
    return torch.as_tensor(make_rng(seed, "t").standard_normal(shape), dtype=dtype)


def test_square_gradient():
    x = torch.tensor(3.0, dtype=F64, requires_grad=True)
    (g,) = forward_backward(x**2, [x])
    assert float(g) == 6.0


def test_softmax_sum_has_zero_gradient():
    z = rand(7).requires_grad_(True)
    (g,) = forward_backward(torch.softmax(z, 0).sum(), [z])
    assert torch.allclose(g, torch.zeros(7, dtype=F64), atol=1e-12)


def test_cosine_self_similarity_gradient_vanishes():
    a = rand(5)
    a = (a / a.norm()).requires_grad_(True)
    b = a.detach().clone()
    (g,) = forward_backward(F.cosine_similarity(a, b, dim=0), [a])
    assert g.abs().max() < 1e-10
    # Finite-difference oracle: the cosine is flat to first order at a == b.
    eps = 1e-6
    fd = []
    for i in range(5):
        d = torch.zeros(5, dtype=F64)
        d[i] = eps
        fd.append((F.cosine_similarity(b + d, b, dim=0) - F.cosine_similarity(b - d, b, dim=0)) / (2 * eps))
    assert max(abs(float(v)) for v in fd) < 1e-8


def test_unreachable_parameters_get_zeros():
    x = torch.ones(3, dtype=F64, requires_grad=True)
    y = torch.ones(2, dtype=F64, requires_grad=True)
    frozen = torch.ones(4, dtype=F64)
    gx, gy, gf = forward_backward((x * 2).sum(), [x, y, frozen])
    assert torch.equal(gx, torch.full((3,), 2.0, dtype=F64))
    assert torch.equal(gy, torch.zeros(2, dtype=F64))
    assert torch.equal(gf, torch.zeros(4, dtype=F64))


def test_non_scalar_output_rejected():
    x = torch.ones(3, requires_grad=True)
    with pytest.raises(ValueError):
        forward_backward(x * 2, [x])


def test_relative_error_definition():
    assert relative_error(np.array([1.0, 2.0]), np.array([1.0, 2.0])) == 0.0
    assert relative_error(np.array([1.0]), np.array([0.5])) == pytest.approx(0.5)
    assert relative_error(np.array([0.0]), np.array([0.0])) == 0.0


def test_bilinear_grad_check():
    op = lambda v: v[0] * v[1]  # noqa: E731
    assert grad_check(op, torch.tensor([2.0, 5.0], dtype=F64), eps=1e-5) < 1e-6


def test_layernorm_sum_grad_check():
    w, b = rand(8, 1), rand(8, 2)
    op = lambda x: (F.layer_norm(x, (8,), w, b) * torch.arange(1.0, 9.0, dtype=x.dtype)).sum()  # noqa: E731
    assert grad_check(op, rand(8, 3)) < 1e-5


def _relu_point_ok(pre: torch.Tensor) -> bool:
    """Reject points where any ReLU pre-activation sits within 1e-3 of the kink."""
    return bool((pre.abs() >= 1e-3).all())


def _primitives():
    W = rand((5, 6), 10)
    kern = rand((3, 2, 4), 11)
    emb = rand((9, 4), 12)
    ids = torch.tensor([3, 1, 3, 7])
    # Projections at initialisation scale (1/sqrt(d)); unscaled weights saturate the softmax.
    wq, wk, wv = (rand((8, 8), s) / 8**0.5 for s in (13, 14, 15))
    return {
        "matmul": ((4, 5), lambda x: ((x @ W.to(x.dtype)) ** 2).sum()),
        "conv1d": ((1, 2, 12), lambda x: (F.conv1d(x, kern.to(x.dtype), stride=2) ** 2).sum()),
        "layernorm": ((3, 8), lambda x: (F.layer_norm(x, (8,)) * torch.linspace(-1, 1, 8, dtype=x.dtype)).sum()),
        "softmax": ((3, 6), lambda x: (torch.softmax(x, -1) * torch.arange(6.0, dtype=x.dtype)).sum()),
        "gelu": ((10,), lambda x: (F.gelu(x) * torch.linspace(0.5, 1.5, 10, dtype=x.dtype)).sum()),
        "relu": ((10,), lambda x: (F.relu(x) * torch.linspace(0.5, 1.5, 10, dtype=x.dtype)).sum()),
        "embedding": ((9, 4), lambda table: (F.embedding(ids, table) ** 2).sum() + table[0, 0] * 0),
        "embedding_scaled": ((4,), lambda s: (F.embedding(ids, emb.to(s.dtype)) * s).sum() ** 2),
        "attention": (
            (1, 5, 8),
            lambda x: (attention(x @ wq.to(x.dtype), x @ wk.to(x.dtype), x @ wv.to(x.dtype), 2) ** 2).sum(),
        ),
    }


@pytest.mark.parametrize("name", list(_primitives()))
def test_primitive_grad_check_float64(name):
    shape, op = _primitives()[name]
    point = rand(shape, 20)
    if name == "relu":
        assert _relu_point_ok(point)
    assert grad_check(op, point, eps=1e-6) < 1e-6


@pytest.mark.parametrize("name", list(_primitives()))
def test_primitive_grad_check_float32(name):
    shape, op = _primitives()[name]
    point = rand(shape, 21)
    if name == "relu":
        assert _relu_point_ok(point)
    # float32 tape against a float64 finite-difference reference.
    assert grad_check(op, point.float(), eps=1e-6, fd_dtype=F64) < 1e-4


def test_softmax_normalisation():
    p = torch.softmax(rand((50, 13), 3).float() * 10, -1)
    assert (p >= 0).all()
    assert torch.allclose(p.sum(-1), torch.ones(50), atol=1e-6)


def test_adam_first_step():
    p = torch.zeros(3, dtype=F64)
    state = AdamState.for_params([p], lr=1e-3)
    adam_step([p], [torch.ones(3, dtype=F64)], state)
    assert state.step == 1
    assert torch.allclose(p, torch.full((3,), -1e-3, dtype=F64), atol=1e-6)


def test_adam_zero_gradient_is_noop():
    p = rand(4)
    before = p.clone()
    state = AdamState.for_params([p], lr=1e-2)
    for _ in range(3):
        adam_step([p], [torch.zeros(4, dtype=F64)], state)
    assert torch.equal(p, before)
    assert state.step == 3


def test_adam_shape_mismatch():
    p = torch.zeros(3)
    state = AdamState.for_params([p], lr=1e-3)
    with pytest.raises(ValueError):
        adam_step([p], [torch.zeros(4)], state)


def test_adam_matches_torch_reference():
    p1 = rand(6, 5).float()
    p2 = p1.clone().requires_grad_(True)
    state = AdamState.for_params([p1], lr=1e-2)
    ref = torch.optim.Adam([p2], lr=1e-2)
    for k in range(5):
        g = rand(6, 30 + k).float()
        adam_step([p1], [g], state)
        p2.grad = g.clone()
        ref.step()
    assert torch.allclose(p1, p2.detach(), atol=1e-7)


def test_adam_deterministic():
    def run():
        p = torch.nn.Parameter(rand(5, 7).float())
        opt = Adam([p], lr=1e-2)
        for k in range(4):
            opt.zero_grad()
            ((p * rand(5, 40 + k).float()) ** 2).sum().backward()
            opt.step()
        return p.detach()

    assert torch.equal(run(), run())


def test_adam_rejects_non_finite_gradient():
    p = torch.nn.Parameter(torch.zeros(2))
    opt = Adam([p], lr=1e-3)
    p.grad = torch.tensor([float("nan"), 0.0])
    with pytest.raises(NumericalError):
        opt.step()
