import json
import time

import numpy as np
import pytest

from sicl_aed.data import generate_corpus
from sicl_aed.decoder import DecoderConfig
from sicl_aed.encoder import EncoderConfig
from sicl_aed.model import ModelConfig, SiclAed
from sicl_aed.recipes import DESK_RECIPE, icft_desk, train_desk


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_config():
    return ModelConfig(EncoderConfig(num_layers=1, model_dim=8, num_heads=2, ff_dim=12, feature_dim=16),
                       DecoderConfig(num_layers=2, model_dim=8, num_heads=2, ff_dim=12, max_document_tokens=512))


@pytest.fixture(scope="session")
def tiny_model(tiny_config):
    """Random double-precision model; enough for equivalence properties."""
    return SiclAed.initialize(tiny_config, seed=3, dtype=np.float64)


@pytest.fixture(scope="session")
def corpus():
    return generate_corpus(seed=0)


@pytest.fixture(scope="session")
def desk_run(request, corpus):
    """Desk preset trained on the seed-0 corpus, plus its ICFT fine-tune.

    Checkpoints are kept in the pytest cache keyed by the recipe; run
    ``pytest --cache-clear`` to force retraining.
    """
    key = json.dumps(DESK_RECIPE, sort_keys=True)
    cache_dir = request.config.cache.mkdir("sicl_desk_run")
    meta_path = cache_dir / "meta.json"
    base_path, icft_path = cache_dir / "base.ckpt", cache_dir / "icft.ckpt"
    if meta_path.exists() and base_path.exists() and icft_path.exists():
        meta = json.loads(meta_path.read_text())
        if meta.get("recipe") == key:
            return {"base": SiclAed.load(base_path), "icft": SiclAed.load(icft_path), **meta}
    model, info = train_desk(corpus, seed=0)
    model.save(base_path)
    start = time.perf_counter()
    icft_desk(model, corpus, seed=0)
    info["icft_seconds"] = time.perf_counter() - start
    model.save(icft_path)
    meta = {"recipe": key, **info}
    meta_path.write_text(json.dumps(meta))
    return {"base": SiclAed.load(base_path), "icft": SiclAed.load(icft_path), **meta}


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def report_criterion():
    """Record a PASS/FAIL line for the acceptance summary, then assert."""
    def record(number: int, passed: bool, detail: str) -> None:
        line = f"{'PASS' if passed else 'FAIL'} criterion {number}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert passed, line
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
