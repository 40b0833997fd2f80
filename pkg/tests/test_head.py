import math

import numpy as np
import pytest
import torch

from egospeak.autodiff import grad_check_module
from egospeak.backbone import BackboneConfig, build_backbone
from egospeak.errors import ConfigError, DataError
from egospeak.head import (ClassifierConfig, ClassifierModel, finetune, init_head, layer_weighted_sum,
                           load_classifier, masked_mean, predict, probs_to_labels, save_classifier)
from egospeak.rng import make_rng

F64 = torch.float64


def rand(shape, seed=0):
    return torch.as_tensor(make_rng(seed, "h").standard_normal(shape), dtype=F64)


def tone(f0, n=2400, seed=0):
    t = np.arange(n) / 16000
    rng = make_rng(seed, "tone")
    x = sum(np.sin(2 * np.pi * f0 * h * t + rng.uniform(0, 6.28)) / h for h in range(1, 5))
    return (0.2 * x + 0.01 * rng.standard_normal(n)).astype(np.float32)


def tiny_model(mode="mono", seed=0, **kw):
    bb = build_backbone(BackboneConfig.tiny(), seed)
    cfg = ClassifierConfig(conv_channels=16, mlp_hidden=(8,), input_mode=mode, **kw)
    model = ClassifierModel(bb, cfg)
    init_head(model, make_rng(seed, "head"))
    return model.eval()


def test_equal_weights_give_mean():
    hs = [rand((4, 3), s) for s in range(3)]
    out = layer_weighted_sum(hs, torch.zeros(3, dtype=F64))
    assert torch.allclose(out, sum(hs) / 3, atol=1e-12)


def test_saturated_weight_selects_layer():
    hs = [rand((4, 3), s) for s in range(3)]
    out = layer_weighted_sum(hs, torch.tensor([0.0, 50.0, 0.0], dtype=F64))
    assert torch.allclose(out, hs[1], atol=1e-6)


def test_hand_set_weights():
    hs = [rand((5, 4), s) for s in range(3)]
    w = torch.log(torch.tensor([0.5, 0.3, 0.2], dtype=F64))
    direct = 0.5 * hs[0] + 0.3 * hs[1] + 0.2 * hs[2]
    assert torch.allclose(layer_weighted_sum(hs, w), direct, atol=1e-6)


def test_weighted_sum_shape_errors():
    with pytest.raises(ValueError):
        layer_weighted_sum([rand((4, 3)), rand((5, 3))], torch.zeros(2))
    with pytest.raises(ValueError):
        layer_weighted_sum([rand((4, 3)), rand((4, 3))], torch.zeros(3))


def test_masked_mean_of_constant():
    x = torch.full((2, 6, 3), 0.37)
    assert torch.allclose(masked_mean(x, torch.tensor([6, 2])), torch.full((2, 3), 0.37), atol=1e-6)


def test_padding_invariance():
    model = tiny_model()
    a, b = tone(200, 2000), tone(300, 3200, 1)
    with torch.no_grad():
        alone = model(torch.from_numpy(a)[None])
        x = torch.zeros(2, 3200)
        x[0, :2000] = torch.from_numpy(a)
        x[1] = torch.from_numpy(b)
        batched = model(x, [2000, 3200])
    assert torch.allclose(alone[0], batched[0], atol=1e-5)


def test_frame_permutation_invariance():
    model = tiny_model()
    h = torch.randn(1, model.backbone.num_hidden, 12, 16)
    perm = torch.as_tensor(make_rng(1).permutation(12))
    fl = torch.tensor([12])
    with torch.no_grad():
        assert torch.allclose(model.head(h, fl), model.head(h[:, :, perm], fl), atol=1e-6)


def test_dual_duplicate_channel_is_deterministic():
    model = tiny_model("dual")
    x = torch.from_numpy(tone(250))[None]
    with torch.no_grad():
        a, b = model((x, x.clone())), model((x, x.clone()))
    assert a.shape == (1, 2) and torch.equal(a, b)


def test_dual_length_mismatch_and_short_input():
    model = tiny_model("dual")
    with pytest.raises(DataError):
        model((torch.zeros(1, 1000), torch.zeros(1, 1200)))
    with pytest.raises(DataError, match="too short"):
        tiny_model()(torch.zeros(1, 100))


def test_mono_and_dual_share_one_backbone():
    bb = build_backbone(BackboneConfig.tiny(), 0)
    mono = ClassifierModel(bb, ClassifierConfig(input_mode="mono"))
    dual = ClassifierModel(bb, ClassifierConfig(input_mode="dual"))
    for (na, pa), (nb, pb) in zip(mono.backbone.named_parameters(), dual.backbone.named_parameters()):
        assert na == nb and pa is pb


def test_predict_tie_rule_and_example():
    logits = torch.tensor([[3.0, -1.0], [0.0, 0.0], [-1.0, 3.0]], dtype=F64)
    probs = torch.softmax(logits, -1).numpy()
    assert list(probs_to_labels(probs)) == [0, 0, 1]
    assert abs(probs[0, 0] - 1 / (1 + math.exp(-4))) < 1e-12
    assert round(probs[0, 0], 3) == 0.982


def test_config_validation():
    with pytest.raises(ConfigError):
        ClassifierConfig(num_classes=3)
    with pytest.raises(ConfigError):
        ClassifierConfig(lr=1e-3)
    with pytest.raises(ConfigError):
        ClassifierConfig(input_mode="stereo")


def _toy_set(n=20):
    ex = [tone(150 if i % 2 == 0 else 450, 2400, i) for i in range(n)]
    return ex, [i % 2 for i in range(n)]


def test_separable_toy_reaches_full_training_accuracy():
    ex, y = _toy_set()
    cfg = ClassifierConfig(conv_channels=16, mlp_hidden=(8,), epochs=50, batch_size=5, backbone_trainable=False)
    _, rows = finetune(ex, y, cfg, build_backbone(BackboneConfig.tiny(), 0), seed=0)
    assert max(r["train_acc"] for r in rows) == 1.0


def test_frozen_backbone_bytes_unchanged():
    ex, y = _toy_set(8)
    bb = build_backbone(BackboneConfig.tiny(), 0)
    before = {k: v.numpy().tobytes() for k, v in bb.state_dict().items()}
    cfg = ClassifierConfig(conv_channels=16, mlp_hidden=(8,), epochs=2, batch_size=4, backbone_trainable=False)
    model, _ = finetune(ex, y, cfg, bb, seed=0)
    assert {k: v.numpy().tobytes() for k, v in model.backbone.state_dict().items()} == before


@pytest.mark.parametrize("freeze_encoder", [True, False])
def test_full_finetune_leaves_source_backbone_alone(freeze_encoder):
    ex, y = _toy_set(8)
    bb = build_backbone(BackboneConfig.tiny(), 0)
    before = {k: v.clone() for k, v in bb.state_dict().items()}
    cfg = ClassifierConfig(conv_channels=16, mlp_hidden=(8,), epochs=2, batch_size=4, freeze_encoder=freeze_encoder)
    model, _ = finetune(ex, y, cfg, bb, seed=0)
    assert all(torch.equal(before[k], v) for k, v in bb.state_dict().items())
    tuned = model.backbone.state_dict()
    assert not torch.equal(tuned["layers.0.ffn.fc1.weight"], before["layers.0.ffn.fc1.weight"])
    enc = "feature_encoder.convs.0.weight"
    assert torch.equal(tuned[enc], before[enc]) == freeze_encoder


def test_same_seed_same_model():
    ex, y = _toy_set(8)
    cfg = ClassifierConfig(conv_channels=16, mlp_hidden=(8,), epochs=2, batch_size=4)
    a, _ = finetune(ex, y, cfg, build_backbone(BackboneConfig.tiny(), 0), seed=5)
    b, _ = finetune(ex, y, cfg, build_backbone(BackboneConfig.tiny(), 0), seed=5)
    sa, sb = a.state_dict(), b.state_dict()
    assert all(torch.equal(sa[k], sb[k]) for k in sa)


def test_degenerate_labels_rejected():
    ex, _ = _toy_set(4)
    with pytest.raises(DataError, match="degenerate labels"):
        finetune(ex, [1, 1, 1, 1], ClassifierConfig(), build_backbone(BackboneConfig.tiny(), 0))


def test_layer_weights_stay_a_distribution():
    ex, y = _toy_set(8)
    cfg = ClassifierConfig(conv_channels=16, mlp_hidden=(8,), epochs=3, batch_size=2, backbone_trainable=False)
    model, _ = finetune(ex, y, cfg, build_backbone(BackboneConfig.tiny(), 0), seed=0)
    w = model.layer_weights().detach()
    assert (w >= 0).all() and abs(float(w.sum()) - 1) < 1e-6
    assert not torch.allclose(w, torch.full_like(w, 1 / len(w)))


def _kink_free_point(margin=1e-4):
    """Draw seeds until no ReLU pre-activation lies within ``margin`` of zero."""
    for seed in range(50):
        model = tiny_model(seed=seed).double()
        x = torch.as_tensor(np.stack([tone(180, 1600, seed), tone(420, 1600, seed + 1)]), dtype=F64)
        acts = []
        hooks = [m.register_forward_hook(lambda m, i, o: acts.append(i[0].detach())) for m in model.acts]
        with torch.no_grad():
            model(x)
        for h in hooks:
            h.remove()
        if all((a.abs() >= margin).all() for a in acts):
            return model, x
    raise AssertionError("no kink-free evaluation point found")


def test_finetune_loss_grad_check_float64():
    model, x = _kink_free_point()
    y = torch.tensor([0, 1])

    def loss_fn():
        return torch.nn.functional.cross_entropy(model(x), y)

    # Softmax is shift-invariant per query, so key biases get an exact zero
    # gradient and the relative error there is pure round-off.
    params = [(n, p) for n, p in model.named_parameters() if not n.endswith("k_proj.bias")]
    errors = grad_check_module(loss_fn, params, eps=1e-5, max_coords_per_tensor=4, rng=make_rng(2))
    assert max(errors.values()) < 1e-4, {k: v for k, v in errors.items() if v >= 1e-4}


def test_predict_and_checkpoint_round_trip(tmp_path):
    ex, y = _toy_set(8)
    cfg = ClassifierConfig(conv_channels=16, mlp_hidden=(8,), epochs=2, batch_size=4)
    model, _ = finetune(ex, y, cfg, build_backbone(BackboneConfig.tiny(), 0), seed=0)
    labels, probs = predict(model, ex)
    assert probs.shape == (8, 2) and np.allclose(probs.sum(1), 1)
    save_classifier(tmp_path / "m.ckpt", model, {"fold": 0})
    loaded, meta = load_classifier(tmp_path / "m.ckpt")
    assert meta["fold"] == 0
    labels2, probs2 = predict(loaded, ex)
    assert np.array_equal(labels, labels2) and np.array_equal(probs, probs2)
