import json
import subprocess
import sys

import pytest

from sicl_aed.cli import EXIT_IO, EXIT_OK, EXIT_USAGE, main

GEN = ["--speakers", "6", "--utts-per-speaker", "16", "--entities", "3"]
FAST = ["--beam", "2", "--max-tokens", "5"]


def _hyps(path):
    return {r["id"]: r["hyp"] for r in map(json.loads, (path / "hypotheses.jsonl").read_text().splitlines())}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["generate", "--out", str(root / "data"), "--seed", "1", *GEN]) == EXIT_OK
    assert main(["train", "--data", str(root / "data"), "--out", str(root / "run"), "--steps", "2",
                 "--docs-per-batch", "2"]) == EXIT_OK
    return root


def test_generate_writes_corpus_and_resolved_config(workspace):
    data = workspace / "data"
    assert (data / "manifest.jsonl").exists() and (data / "corpus.json").exists()
    resolved = json.loads((data / "config.resolved").read_text())
    assert resolved["seed"] == 1 and resolved["speakers"] == 6


def test_generate_is_deterministic(workspace, tmp_path):
    assert main(["generate", "--out", str(tmp_path / "again"), "--seed", "1", *GEN]) == EXIT_OK
    assert (tmp_path / "again" / "manifest.jsonl").read_text() == (workspace / "data" / "manifest.jsonl").read_text()


def test_train_outputs(workspace):
    summary = json.loads((workspace / "run" / "train_summary.json").read_text())
    assert summary["steps"] == 2 and (workspace / "run" / "model.ckpt").exists()


def _decode(workspace, out, *extra):
    return main(["decode", "--checkpoint", str(workspace / "run" / "model.ckpt"), "--data",
                 str(workspace / "data"), "--out", str(out), *FAST, *extra])


def test_adapt_without_context_equals_utterance_mode(workspace, tmp_path):
    assert _decode(workspace, tmp_path / "a", "--mode", "adapt", "--context-size", "0", "--n-eval", "4") == EXIT_OK
    assert _decode(workspace, tmp_path / "u", "--mode", "utterance", "--split", "adapt") == EXIT_OK
    adapt, utt = _hyps(tmp_path / "a"), _hyps(tmp_path / "u")
    assert len(adapt) == 4
    assert all(utt[k] == v for k, v in adapt.items())
    metrics = json.loads((tmp_path / "a" / "metrics.json").read_text())
    assert metrics["context_size"] == 0


def test_longform_with_single_utterance_documents_equals_utterance_mode(workspace, tmp_path):
    assert _decode(workspace, tmp_path / "l", "--mode", "longform", "--split", "test", "--doc-size", "1") == EXIT_OK
    assert _decode(workspace, tmp_path / "u", "--mode", "utterance", "--split", "test") == EXIT_OK
    assert _hyps(tmp_path / "l") == _hyps(tmp_path / "u")


def test_decoding_is_repeatable(workspace, tmp_path):
    for name in ("x", "y"):
        assert _decode(workspace, tmp_path / name, "--mode", "bias", "--seed", "3") == EXIT_OK
    assert (tmp_path / "x" / "hypotheses.jsonl").read_bytes() == (tmp_path / "y" / "hypotheses.jsonl").read_bytes()


def test_icft_command(workspace, tmp_path):
    rc = main(["icft", "--checkpoint", str(workspace / "run" / "model.ckpt"), "--data", str(workspace / "data"),
               "--out", str(tmp_path), "--steps", "1"])
    assert rc == EXIT_OK and (tmp_path / "model.ckpt").exists()


def test_config_file_values_and_unknown_keys(workspace, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"speakers": 5, "utts-per-speaker": 12, "entities": 2}))
    assert main(["--config", str(cfg), "generate", "--out", str(tmp_path / "d")]) == EXIT_OK
    assert json.loads((tmp_path / "d" / "config.resolved").read_text())["speakers"] == 5
    cfg.write_text(json.dumps({"not_an_option": 1}))
    assert main(["--config", str(cfg), "generate", "--out", str(tmp_path / "e")]) == EXIT_USAGE


def test_usage_and_io_errors(workspace, tmp_path):
    assert main(["decode", "--mode", "sideways"]) == EXIT_USAGE
    assert main([]) == EXIT_USAGE
    assert main(["decode", "--checkpoint", str(tmp_path / "missing.ckpt"), "--data", str(workspace / "data"),
                 "--out", str(tmp_path / "o")]) == EXIT_IO
    assert main(["--config", str(tmp_path / "missing.json"), "verify"]) == EXIT_IO
    assert _decode(workspace, tmp_path / "s", "--split", "nope") == EXIT_USAGE


def test_verify_suite_exit_code(capsys):
    assert main(["verify", "--suite", "roundtrip"]) == EXIT_OK
    out = capsys.readouterr().out
    assert out.strip() and all(line.startswith("PASS") for line in out.strip().splitlines())


def test_console_script_runs():
    proc = subprocess.run([sys.executable, "-m", "sicl_aed.cli", "verify", "--suite", "ctc"],
                          capture_output=True, text=True, timeout=120)
    assert proc.returncode == EXIT_OK, proc.stderr
    assert " INFO " in proc.stderr  # `ts level msg` log lines


def test_bench_command(tmp_path):
    out = tmp_path / "report.csv"
    assert main(["bench", "--n-utts", "1,2", "--frames", "8", "--tokens", "4", "--repeats", "1",
                 "--out", str(out)]) == EXIT_OK
    lines = out.read_text().splitlines()
    assert lines[0] == "variant,n_utterances,wall_ms,score_elems,bytes" and len(lines) == 5
