"""Time and memory of utterance-level vs full-document cross-attention."""
from __future__ import annotations

import csv
import statistics
import time
import tracemalloc
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_info, threadpool_limits

from . import layers as L
from .decoder import DecoderConfig, decoder_forward, init_decoder
from .encoder import EncodedBatch
from .errors import ContractError
from .tensor import Tensor

VARIANTS = ("full", "block")
CSV_HEADER = ("variant", "n_utterances", "wall_ms", "score_elems", "bytes")
SECONDS_PER_ENCODER_FRAME = 0.04  # 10 ms features, 4x subsampling


@dataclass(frozen=True)
class BenchConfig:
    n_utterances: tuple[int, ...] = (1, 2, 4, 6)
    frames_per_utterance: int = 256  # encoder frames (after subsampling)
    tokens_per_utterance: int = 32
    model_dim: int = 64
    num_heads: int = 4
    num_layers: int = 2
    ff_dim: int = 128
    repeats: int = 7
    warmup: int = 2
    seed: int = 0
    max_score_elements: int = 50_000_000  # rows above this are skipped


@dataclass
class BenchRow:
    variant: str
    n_utterances: int
    doc_seconds_equivalent: float
    wall_time: float  # seconds, median
    peak_score_elements: int
    peak_bytes_tracked: int
    skipped: str = ""


@dataclass
class BenchReport:
    rows: list[BenchRow] = field(default_factory=list)
    max_abs_diff: dict[int, float] = field(default_factory=dict)

    def row(self, variant: str, n: int) -> BenchRow:
        for r in self.rows:
            if r.variant == variant and r.n_utterances == n:
                return r
        raise KeyError((variant, n))


def _require_single_thread() -> None:
    busy = [p for p in threadpool_info() if p.get("num_threads", 1) != 1]
    if busy:
        raise ContractError(f"benchmark needs single-threaded BLAS/OpenMP, found {busy}")


def _inputs(cfg: BenchConfig, n: int, rng: np.random.Generator):
    tokens = rng.integers(4, 31, n * cfg.tokens_per_utterance)
    assignment = np.repeat(np.arange(n), cfg.tokens_per_utterance)
    enc = rng.normal(0.0, 1.0, (n, cfg.frames_per_utterance, cfg.model_dim))
    return tokens, assignment, EncodedBatch(Tensor(enc), np.full(n, cfg.frames_per_utterance))


def bench_cross_attention(cfg: BenchConfig = BenchConfig()) -> BenchReport:
    """Median decoder forward time and score memory for both cross-attention variants.

    Runs in double precision and also records the largest output difference
    between the variants.
    """
    rng = np.random.default_rng(cfg.seed)
    dec_cfg = DecoderConfig(cfg.num_layers, cfg.model_dim, cfg.num_heads, cfg.ff_dim,
                            max_document_tokens=max(cfg.n_utterances) * cfg.tokens_per_utterance)
    params: L.Params = {}
    init_decoder(params, rng, dec_cfg, np.float64)
    report = BenchReport()
    variants = {"full": "blockmask", "block": "utterance"}
    with threadpool_limits(limits=1):
        _require_single_thread()
        for n in cfg.n_utterances:
            tokens, assignment, encoded = _inputs(cfg, n, rng)
            seconds = n * cfg.frames_per_utterance * SECONDS_PER_ENCODER_FRAME
            outputs = {}
            for name in VARIANTS:
                elems = cfg.num_heads * (n if name == "block" else n * n) \
                    * cfg.tokens_per_utterance * cfg.frames_per_utterance
                if elems > cfg.max_score_elements:
                    report.rows.append(BenchRow(name, n, seconds, float("nan"), elems, 0,
                                                skipped=f"{elems} score elements exceed guard"))
                    continue

                def run():
                    return decoder_forward(params, dec_cfg, tokens, assignment, encoded,
                                           cross_attention=variants[name])[0].data

                for _ in range(cfg.warmup):
                    run()
                times = []
                for _ in range(cfg.repeats):
                    t0 = time.perf_counter()
                    run()
                    times.append(time.perf_counter() - t0)
                with L.track_scores() as tracker:
                    tracemalloc.start()
                    outputs[name] = run()
                    _, peak = tracemalloc.get_traced_memory()
                    tracemalloc.stop()
                report.rows.append(BenchRow(name, n, seconds, statistics.median(times),
                                            tracker.peak.get("cross", 0), peak))
            if len(outputs) == 2:
                report.max_abs_diff[n] = float(np.max(np.abs(outputs["full"] - outputs["block"])))
    return report


def emit_report(report: BenchReport, path) -> None:
    """Write the CSV report; row order is variant-major as listed in ``VARIANTS``."""
    rows = sorted(report.rows, key=lambda r: (VARIANTS.index(r.variant), r.n_utterances))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in rows:
            wall = "" if r.skipped else f"{r.wall_time * 1000:.3f}"
            w.writerow([r.variant, r.n_utterances, wall, r.peak_score_elements, r.peak_bytes_tracked])
