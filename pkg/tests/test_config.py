import json

import pytest

from egospeak.config import RunConfig, build, load_config, override, to_dict, write_resolved
from egospeak.errors import ConfigError


def write(tmp_path, doc):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(doc))
    return p


def test_defaults_round_trip(tmp_path):
    cfg = RunConfig()
    assert load_config(write(tmp_path, to_dict(cfg))) == cfg
    assert load_config(None) == cfg


def test_partial_file_keeps_defaults(tmp_path):
    cfg = load_config(write(tmp_path, {"pretrain": {"epochs": 3}, "harness": {"seeds": [4, 5]}}))
    assert cfg.pretrain.epochs == 3 and cfg.harness.seeds == (4, 5)
    assert cfg.pretrain.lr == RunConfig().pretrain.lr


@pytest.mark.parametrize("doc", [
    {"pretrian": {}},
    {"pretrain": {"epoch": 3}},
    {"harness": {"classifier": {"dropout": 0.1}}},
])
def test_unknown_keys_rejected(tmp_path, doc):
    with pytest.raises(ConfigError, match="unknown config key"):
        load_config(write(tmp_path, doc))


@pytest.mark.parametrize("doc", [
    {"pretrain": {"epochs": "3"}},
    {"pretrain": {"epochs": 2.5}},
    {"harness": {"seeds": 3}},
    {"backbone": {"normalize_input": 1}},
    {"harness": {"classifier": {"lr": 0.3}}},
])
def test_bad_values_rejected(tmp_path, doc):
    with pytest.raises(ConfigError):
        load_config(write(tmp_path, doc))


def test_missing_and_malformed_files(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(bad)
    bad.write_text("[1, 2]")
    with pytest.raises(ConfigError):
        load_config(bad)


def test_override():
    cfg = override(RunConfig(), "harness.classifier.epochs", 7)
    assert cfg.harness.classifier.epochs == 7
    assert override(cfg, "harness.seeds", (1,)).harness.seeds == (1,)
    with pytest.raises(ConfigError):
        override(cfg, "harness.nope", 1)
    with pytest.raises(ConfigError):
        override(cfg, "pretrain.epochs", "x")


def test_build_nested_optional():
    from egospeak.harness import HarnessConfig

    assert build(HarnessConfig, {"max_segments_per_session": None}).max_segments_per_session is None


def test_write_resolved(tmp_path):
    path = write_resolved(tmp_path, RunConfig(), {"seeds": {"run": 3}})
    doc = json.loads(path.read_text())
    assert doc["seeds"] == {"run": 3} and doc["config"]["pretrain"]["epochs"] == RunConfig().pretrain.epochs
