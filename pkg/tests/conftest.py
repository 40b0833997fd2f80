from dataclasses import replace

import pytest

from egospeak.synth import PretrainCorpusConfig, SynthConfig, generate_corpus, generate_pretrain_corpus


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """Ten 30 s sessions plus a handful of pre-training utterances."""
    out = tmp_path_factory.mktemp("corpus")
    generate_corpus(out, 10, seed=0, cfg=replace(SynthConfig(), duration_s=30.0))
    generate_pretrain_corpus(out / "pretrain", 6, 0, replace(PretrainCorpusConfig(), duration_s=(1.0, 2.0)))
    return out


ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """Record one acceptance line: ``criterion(n, ok, detail)`` then assert ``ok``."""
    lines = request.config.stash.setdefault(ACCEPTANCE, {})

    def record(n: int, ok: bool, detail: str):
        lines[n] = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        assert ok, detail

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
