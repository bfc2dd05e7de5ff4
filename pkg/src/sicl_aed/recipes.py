"""Default step counts and rates for the desk preset on the synthetic corpus."""
from __future__ import annotations

import time

from .data import Corpus
from .icft import IcftConfig
from .model import PRESETS, SiclAed
from .training import TrainConfig, train

DESK_RECIPE = {
    "utterance": {"steps": 300, "docs_per_batch": 24, "warmup": 50, "swap_prob": 0.5},
    "document": {"steps": 4000, "docs_per_batch": 8, "warmup": 20, "swap_prob": 0.5},
    "icft": {"steps": 1500, "docs_per_batch": 8, "warmup": 20, "swap_prob": 0.5, "lr": 5e-4, "min_lr": 1e-4},
}


def stage_config(stage: str, seed: int = 0, **overrides) -> TrainConfig:
    values = dict(DESK_RECIPE[stage])
    values.update(overrides)
    return TrainConfig(stage=stage, seed=seed, **values)


def train_desk(corpus: Corpus, seed: int = 0, time_budget_s: float | None = None) -> tuple[SiclAed, dict]:
    """Utterance stage followed by the document stage; returns the model and timings."""
    model = SiclAed.initialize(PRESETS["desk"], seed=seed)
    pool = corpus.split("train")
    start = time.perf_counter()
    train(model, pool, stage_config("utterance", seed))
    remaining = None if time_budget_s is None else time_budget_s - (time.perf_counter() - start)
    train(model, pool, stage_config("document", seed + 1, time_budget_s=remaining))
    return model, {"train_seconds": time.perf_counter() - start}


def icft_desk(model: SiclAed, corpus: Corpus, seed: int = 0, cfg: IcftConfig = IcftConfig()) -> SiclAed:
    """Fine-tune a trained model in place with the ICFT mixture."""
    train(model, corpus.split("train"), stage_config("icft", seed + 2), cfg)
    return model
