import csv

import numpy as np
import pytest

from sicl_aed import benchmark as B
from sicl_aed.benchmark import BenchConfig, BenchReport, bench_cross_attention, emit_report
from sicl_aed.errors import ContractError

SMALL = BenchConfig(n_utterances=(1, 2, 4), frames_per_utterance=8, tokens_per_utterance=8, model_dim=8,
                    num_heads=2, num_layers=1, ff_dim=8, repeats=1, warmup=0)


@pytest.fixture(scope="module")
def report():
    return bench_cross_attention(SMALL)


def test_score_element_counts(report):
    for n in SMALL.n_utterances:
        block = report.row("block", n).peak_score_elements
        full = report.row("full", n).peak_score_elements
        assert block == n * 8 * 8 * SMALL.num_heads
        assert full == n * block


def test_variants_agree(report):
    assert set(report.max_abs_diff) == set(SMALL.n_utterances)
    assert max(report.max_abs_diff.values()) < 1e-10


def test_csv_rows_and_determinism(report, tmp_path):
    emit_report(report, tmp_path / "a.csv")
    emit_report(report, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    rows = list(csv.reader((tmp_path / "a.csv").open()))
    assert rows[0] == list(B.CSV_HEADER)
    assert [(r[0], int(r[1])) for r in rows[1:]] == [(v, n) for v in B.VARIANTS for n in SMALL.n_utterances]


def test_empty_report_is_header_only(tmp_path):
    emit_report(BenchReport(), tmp_path / "e.csv")
    assert (tmp_path / "e.csv").read_text() == ",".join(B.CSV_HEADER) + "\n"


def test_unwritable_path(report, tmp_path):
    with pytest.raises(OSError):
        emit_report(report, tmp_path / "missing" / "dir" / "r.csv")


def test_guard_skips_oversized_rows():
    cfg = BenchConfig(n_utterances=(3,), frames_per_utterance=4, tokens_per_utterance=4, model_dim=8, num_heads=2,
                      num_layers=1, ff_dim=8, repeats=1, warmup=0, max_score_elements=200)
    rep = bench_cross_attention(cfg)
    assert rep.row("full", 3).skipped and np.isnan(rep.row("full", 3).wall_time)
    assert not rep.row("block", 3).skipped


def test_background_threads_fail_fast(monkeypatch):
    monkeypatch.setattr(B, "threadpool_info", lambda: [{"internal_api": "openblas", "num_threads": 4}])
    with pytest.raises(ContractError):
        bench_cross_attention(SMALL)
