"""Command-line entry point: generate, train, icft, decode, bench, verify."""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .errors import ContractError

EXIT_OK, EXIT_USAGE, EXIT_VERIFY, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("sicl_aed")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse exits with 2 by default; usage errors are 1 here
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _setup_logging(verbose: bool) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s", "%Y-%m-%dT%H:%M:%S"))
    log.handlers[:] = [handler]
    log.setLevel(logging.DEBUG if verbose else logging.INFO)
    log.propagate = False


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sicl-aed", description=__doc__)
    p.add_argument("--config", help="flat JSON file of option values (keys as the long flag names)")
    p.add_argument("--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write a synthetic corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--speakers", type=int, default=12)
    g.add_argument("--utts-per-speaker", type=int, default=80)
    g.add_argument("--feature-dim", type=int, default=16)
    g.add_argument("--entities", type=int, default=20)

    t = sub.add_parser("train", help="utterance- or document-stage training")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--preset", choices=("desk", "full"), default="desk")
    t.add_argument("--stage", choices=("utterance", "document"), default="utterance")
    t.add_argument("--init", help="checkpoint to continue from (required by a document stage run "
                                   "unless training from scratch is intended)")
    t.add_argument("--steps", type=int, default=None)
    t.add_argument("--docs-per-batch", type=int, default=None)
    t.add_argument("--max-utterances", type=int, default=4)
    t.add_argument("--lr", type=float, default=2e-3)
    t.add_argument("--swap-prob", type=float, default=None)
    t.add_argument("--time-budget", type=float, default=None, help="seconds")
    t.add_argument("--seed", type=int, default=0)

    f = sub.add_parser("icft", help="in-context fine-tuning of a trained checkpoint")
    f.add_argument("--checkpoint", required=True)
    f.add_argument("--data", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--steps", type=int, default=None)
    f.add_argument("--lr", type=float, default=None)
    f.add_argument("--icft-ratio", type=float, default=0.5)
    f.add_argument("--context-size", type=int, default=3)
    f.add_argument("--seed", type=int, default=0)

    d = sub.add_parser("decode", help="decode a split and report metrics")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--data", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--mode", choices=("utterance", "longform", "adapt", "bias"), default="utterance")
    d.add_argument("--split", default="test")
    d.add_argument("--context-size", type=int, default=3)
    d.add_argument("--no-context", action="store_true", help="bias mode without exemplars")
    d.add_argument("--beam", type=int, default=4)
    d.add_argument("--lambda-dec", type=float, default=0.2)
    d.add_argument("--max-tokens", type=int, default=80)
    d.add_argument("--doc-size", type=int, default=6, help="utterances per long-form document")
    d.add_argument("--n-eval", type=int, default=200)
    d.add_argument("--seed", type=int, default=0)

    b = sub.add_parser("bench", help="cross-attention time/memory benchmark")
    b.add_argument("--n-utts", type=_int_list, default=[1, 2, 4, 6, 8])
    b.add_argument("--frames", type=int, default=256)
    b.add_argument("--tokens", type=int, default=32)
    b.add_argument("--repeats", type=int, default=7)
    b.add_argument("--out", default="report.csv")
    b.add_argument("--seed", type=int, default=0)

    v = sub.add_parser("verify", help="run self-check suites")
    v.add_argument("--suite", choices=("grad", "ctc", "equiv", "roundtrip", "all"), default="all")
    v.add_argument("--seed", type=int, default=0)
    return p


def _apply_config_file(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    """Parse twice: file values become defaults, explicit flags win. Unknown keys are rejected."""
    args = parser.parse_args(argv)
    if not args.config:
        return args
    try:
        raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
    except OSError as exc:
        raise OSError(f"cannot read config {args.config}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {args.config} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise UsageError("config file must hold a flat JSON object")
    known = {k for k in vars(args) if k not in ("command", "config", "verbose")}
    values = {}
    for key, val in raw.items():
        dest = key.replace("-", "_")
        if dest not in known:
            raise UsageError(f"unknown config key {key!r} for command {args.command!r}")
        if isinstance(val, (dict, list)) and dest != "n_utts":
            raise UsageError(f"config key {key!r} must be a scalar")
        values[dest] = val
    sub = parser._subparsers._group_actions[0].choices[args.command]  # noqa: SLF001
    sub.set_defaults(**values)
    return parser.parse_args(argv)


def _write_resolved(out_dir: Path, args: argparse.Namespace) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    resolved = {k: v for k, v in sorted(vars(args).items()) if k not in ("config", "verbose")}
    (out_dir / "config.resolved").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n",
                                             encoding="utf-8")


# -- commands ---------------------------------------------------------------

def cmd_generate(args) -> int:
    from .data import CorpusConfig, generate_corpus, save_corpus

    out = Path(args.out)
    _write_resolved(out, args)
    cfg = CorpusConfig(num_speakers=args.speakers, utts_per_speaker=args.utts_per_speaker,
                       feature_dim=args.feature_dim, num_entities=args.entities)
    corpus = generate_corpus(cfg, args.seed)
    save_corpus(corpus, out)
    log.info("wrote %d utterances (%s) to %s", len(corpus.utterances),
             ", ".join(f"{k}={len(v)}" for k, v in corpus.splits.items()), out)
    return EXIT_OK


def _stage_defaults(stage: str) -> dict:
    from .recipes import DESK_RECIPE

    return DESK_RECIPE[stage]


def cmd_train(args) -> int:
    from .data import load_corpus
    from .model import PRESETS, SiclAed
    from .training import TrainConfig, evaluation_documents, teacher_forced_accuracy, train

    out = Path(args.out)
    _write_resolved(out, args)
    corpus = load_corpus(args.data)
    if args.init:
        model = SiclAed.load(args.init)
    else:
        cfg = PRESETS[args.preset]
        if cfg.encoder.feature_dim != corpus.config.feature_dim:
            raise UsageError(f"preset expects feature_dim={cfg.encoder.feature_dim}, "
                             f"corpus has {corpus.config.feature_dim}")
        model = SiclAed.initialize(cfg, seed=args.seed)
    defaults = _stage_defaults(args.stage)
    tcfg = TrainConfig(
        stage=args.stage,
        steps=args.steps if args.steps is not None else defaults["steps"],
        docs_per_batch=args.docs_per_batch or defaults["docs_per_batch"],
        max_utterances=args.max_utterances, lr=args.lr,
        swap_prob=args.swap_prob if args.swap_prob is not None else defaults["swap_prob"],
        warmup=defaults["warmup"], seed=args.seed, time_budget_s=args.time_budget)
    start = time.perf_counter()
    history = train(model, corpus.split("train"), tcfg)
    acc = teacher_forced_accuracy(model, evaluation_documents(corpus.split("train"), 4))
    model.save(out / "model.ckpt")
    summary = {"stage": args.stage, "steps": len(history), "seconds": time.perf_counter() - start,
               "final_loss": history[-1]["loss"] if history else None, "train_tf_accuracy": acc}
    (out / "train_summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    log.info("saved %s (teacher-forced train accuracy %.4f)", out / "model.ckpt", acc)
    return EXIT_OK


def cmd_icft(args) -> int:
    from .data import load_corpus
    from .icft import IcftConfig
    from .model import SiclAed
    from .training import TrainConfig, train

    out = Path(args.out)
    _write_resolved(out, args)
    corpus = load_corpus(args.data)
    model = SiclAed.load(args.checkpoint)
    defaults = _stage_defaults("icft")
    tcfg = TrainConfig(stage="icft", steps=args.steps if args.steps is not None else defaults["steps"],
                       docs_per_batch=defaults["docs_per_batch"], lr=args.lr or defaults["lr"],
                       min_lr=defaults["min_lr"], warmup=defaults["warmup"],
                       swap_prob=defaults["swap_prob"], seed=args.seed)
    icft = IcftConfig(context_size=args.context_size, icft_ratio=args.icft_ratio)
    history = train(model, corpus.split("train"), tcfg, icft)
    model.save(out / "model.ckpt")
    log.info("saved %s after %d ICFT steps", out / "model.ckpt", len(history))
    return EXIT_OK


def cmd_decode(args) -> int:
    from . import evaluation as E
    from .data import load_corpus
    from .decoding import BeamConfig, write_hypotheses
    from .model import SiclAed

    out = Path(args.out)
    _write_resolved(out, args)
    corpus = load_corpus(args.data)
    model = SiclAed.load(args.checkpoint)
    beam = BeamConfig(beam_size=args.beam, lambda_dec=args.lambda_dec, max_tokens_per_utterance=args.max_tokens)
    if args.mode in ("utterance", "longform") and args.split not in corpus.splits:
        raise UsageError(f"unknown split {args.split!r}; have {sorted(corpus.splits)}")
    if args.mode == "utterance":
        result = E.recognise(model, corpus.split(args.split), beam)
    elif args.mode == "longform":
        docs = []
        for _, utts in sorted(corpus.by_speaker(corpus.split(args.split)).items()):
            docs += [utts[i:i + args.doc_size] for i in range(0, len(utts), args.doc_size)]
        result = E.longform(model, docs, beam)
    elif args.mode == "adapt":
        result = E.speaker_adaptation(model, corpus, args.context_size, args.n_eval, args.seed, beam)
    else:
        result = E.contextual_biasing(model, corpus, not args.no_context, args.seed, beam, args.context_size)
    write_hypotheses(out / "hypotheses.jsonl", result.records)
    (out / "metrics.json").write_text(json.dumps(result.metrics, indent=2, sort_keys=True) + "\n",
                                      encoding="utf-8")
    log.info("%s", " ".join(f"{k}={v:.3f}" if isinstance(v, float) else f"{k}={v}"
                            for k, v in result.metrics.items()))
    return EXIT_OK


def cmd_bench(args) -> int:
    from .benchmark import BenchConfig, bench_cross_attention, emit_report

    out = Path(args.out)
    _write_resolved(out.parent if str(out.parent) else Path("."), args)
    report = bench_cross_attention(BenchConfig(n_utterances=tuple(args.n_utts), frames_per_utterance=args.frames,
                                               tokens_per_utterance=args.tokens, repeats=args.repeats,
                                               seed=args.seed))
    emit_report(report, out)
    for r in report.rows:
        log.info("%s N=%d wall=%.2fms score_elems=%d bytes=%d%s", r.variant, r.n_utterances,
                 r.wall_time * 1000, r.peak_score_elements, r.peak_bytes_tracked,
                 f" skipped: {r.skipped}" if r.skipped else "")
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import run_suite

    checks = run_suite(args.suite, args.seed)
    for c in checks:
        print(c.line())
    failed = [c for c in checks if not c.passed]
    log.info("%d/%d checks passed", len(checks) - len(failed), len(checks))
    return EXIT_VERIFY if failed else EXIT_OK


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "icft": cmd_icft, "decode": cmd_decode,
            "bench": cmd_bench, "verify": cmd_verify}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = _apply_config_file(parser, argv)
    except UsageError as exc:
        print(f"sicl-aed: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"sicl-aed: error: {exc}", file=sys.stderr)
        return EXIT_IO
    except SystemExit as exc:
        return int(exc.code or 0)
    _setup_logging(args.verbose)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except (FileNotFoundError, PermissionError, IsADirectoryError) as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO
    except ContractError as exc:
        log.error("%s", exc)
        return EXIT_USAGE


if __name__ == "__main__":
    raise SystemExit(main())
