import copy
import hashlib

import numpy as np
import pytest
import torch

from egospeak.backbone import BackboneConfig, build_backbone
from egospeak.errors import ConfigError
from egospeak.head import ClassifierConfig, ClassifierModel, finetune, init_head, predict
from egospeak.lora import (LoRALinear, LoraSpec, load_lora, lora_parameter_count, lora_wrap, save_lora,
                           trainable_lora_parameters)
from egospeak.rng import make_rng


def base_hash(model):
    h = hashlib.sha256()
    for name, t in sorted(model.state_dict().items()):
        if not name.endswith(("lora_A", "lora_B")):
            h.update(name.replace(".base.", ".").encode())
            h.update(t.numpy().tobytes())
    return h.hexdigest()


def test_unknown_variant_and_bad_rank():
    with pytest.raises(ConfigError):
        LoraSpec("kv")
    with pytest.raises(ConfigError):
        LoraSpec("ff", rank=0)
    with pytest.raises(ConfigError):
        LoraSpec("ff", alpha=0.0)


def test_qv_wraps_eight_matrices_on_desk_config():
    _, inv = lora_wrap(build_backbone(BackboneConfig(), 0), LoraSpec("qv"))
    assert len(inv) == 8
    assert sorted({n.split(".", 2)[2] for n in inv}) == ["attn.q_proj", "attn.v_proj"]


def test_ff_parameter_count_per_layer():
    cfg = BackboneConfig()
    _, inv = lora_wrap(build_backbone(cfg, 0), LoraSpec("ff", rank=8))
    r, d, f = 8, cfg.d_model, cfg.ffn_dim
    per_layer = (r * d + f * r) + (r * f + d * r)
    assert per_layer == 10240
    assert lora_parameter_count(inv) == cfg.n_layers * per_layer


@pytest.mark.parametrize("variant", ["ff", "qv"])
def test_trainable_fraction_below_ten_percent(variant):
    bb = build_backbone(BackboneConfig(), 0)
    wrapped, inv = lora_wrap(bb, LoraSpec(variant, rank=8))
    full = sum(p.numel() for p in bb.parameters())
    trainable = sum(p.numel() for p in wrapped.parameters() if p.requires_grad)
    assert trainable == lora_parameter_count(inv)
    assert trainable < 0.1 * full


def test_variant_targeting():
    bb = build_backbone(BackboneConfig(), 0)
    ff, _ = lora_wrap(bb, LoraSpec("ff"))
    qv, _ = lora_wrap(bb, LoraSpec("qv"))
    assert all(".ffn." in n for n in trainable_lora_parameters(ff))
    assert all(".attn." in n and ("q_proj" in n or "v_proj" in n) for n in trainable_lora_parameters(qv))


def test_zero_init_is_bit_identical():
    bb = build_backbone(BackboneConfig(), 0)
    x = torch.randn(2, 4000)
    ref, _ = bb.hidden_states(x)
    for variant in ("ff", "qv"):
        wrapped, inv = lora_wrap(bb, LoraSpec(variant), rng=make_rng(1))
        assert all(torch.count_nonzero(m.lora_B) == 0 for m in inv.values())
        out, _ = wrapped.hidden_states(x)
        assert all(torch.equal(a, b) for a, b in zip(ref, out))


def test_effective_weight():
    lin = torch.nn.Linear(5, 3)
    layer = LoRALinear(lin, 2, 4.0, make_rng(0))
    with torch.no_grad():
        layer.lora_B.normal_()
    x = torch.randn(7, 5)
    expected = x @ layer.effective_weight().T + lin.bias
    assert torch.allclose(layer(x), expected, atol=1e-6)


def test_full_rank_fits_any_delta_by_least_squares():
    rng = make_rng(0)
    m, n = 6, 4
    lin = torch.nn.Linear(n, m).double()
    layer = LoRALinear(lin, min(m, n), float(min(m, n)), rng)
    target = torch.as_tensor(rng.standard_normal((m, n)))
    # With A fixed and full rank, B solves B A = delta exactly in the least-squares sense.
    A = layer.lora_A.detach()
    sol = torch.linalg.lstsq(A.T, target.T).solution.T / layer.scaling
    with torch.no_grad():
        layer.lora_B.copy_(sol)
    residual = (layer.effective_weight() - lin.weight - target).abs().max()
    assert residual < 1e-4


def _tone_set(n=8):
    t = np.arange(2400) / 16000
    ex = [(0.3 * np.sin(2 * np.pi * (150 if i % 2 else 420) * t + i)).astype(np.float32) for i in range(n)]
    return ex, [i % 2 for i in range(n)]


@pytest.mark.parametrize("variant", ["ff", "qv"])
def test_training_keeps_base_weights(variant):
    ex, y = _tone_set()
    bb = build_backbone(BackboneConfig.tiny(), 0)
    cfg = ClassifierConfig(conv_channels=16, mlp_hidden=(8,), epochs=5, batch_size=4)
    before = base_hash(bb)
    model, _ = finetune(ex, y, cfg, bb, seed=0, lora=LoraSpec(variant, rank=2, alpha=4.0))
    assert base_hash(model.backbone) == before == base_hash(bb)
    assert any(torch.count_nonzero(p) for n, p in trainable_lora_parameters(model.backbone).items() if n.endswith("B"))


def test_zero_init_predictions_match_base_before_training():
    ex, _ = _tone_set()
    bb = build_backbone(BackboneConfig.tiny(), 0)
    cfg = ClassifierConfig(conv_channels=16, mlp_hidden=(8,))
    base = ClassifierModel(bb, cfg)
    init_head(base, make_rng(0))
    wrapped = copy.deepcopy(base)
    wrapped.backbone, _ = lora_wrap(bb, LoraSpec("qv", rank=2))
    assert np.array_equal(predict(base.eval(), ex)[1], predict(wrapped.eval(), ex)[1])


def test_delta_file_round_trip(tmp_path):
    bb = build_backbone(BackboneConfig.tiny(), 0)
    wrapped, inv = lora_wrap(bb, LoraSpec("ff", rank=2))
    with torch.no_grad():
        for m in inv.values():
            m.lora_B.normal_()
    save_lora(tmp_path / "delta.ckpt", wrapped)
    rebuilt = load_lora(bb, tmp_path / "delta.ckpt")
    x = torch.randn(1, 2000)
    assert torch.equal(wrapped.hidden_states(x)[0][-1], rebuilt.hidden_states(x)[0][-1])
