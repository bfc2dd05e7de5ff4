"""Self-checks shared by the CLI ``verify`` command and the acceptance tests."""
from __future__ import annotations

import tempfile
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import layers as L
from . import objectives as O
from . import tensor as T
from .data import build_document
from .decoder import (DecoderConfig, UtteranceAssignment, batch_to_doc, cross_attention_blockmask_reference,
                      decoder_forward, doc_to_batch, init_decoder, utterance_cross_attention)
from .encoder import EncodedBatch, EncoderConfig, encode, subsample
from .model import PRESETS, ModelConfig, SiclAed
from .tensor import Tensor

SUITES = ("grad", "ctc", "equiv", "roundtrip")
GRAD_TOL = 1e-4
EXACT_TOL = 1e-10


@dataclass
class Check:
    name: str
    passed: bool
    detail: str = ""

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.detail}"


def tiny_model_config() -> ModelConfig:
    return ModelConfig(EncoderConfig(num_layers=1, model_dim=8, num_heads=2, ff_dim=12, feature_dim=3),
                       DecoderConfig(num_layers=1, model_dim=8, num_heads=2, ff_dim=12))


# -- gradients ----------------------------------------------------------------

def _layer_cases(rng: np.random.Generator) -> dict:
    def r(*shape):
        return rng.normal(0.0, 1.0, shape)

    def weighted(t: Tensor) -> Tensor:
        # a fixed non-uniform projection so every output coordinate matters
        coef = np.sin(np.arange(1, t.size + 1) * 0.7).reshape(t.shape)
        return T.tsum(t * Tensor(coef))

    ff = {k: r(*s) for k, s in {"w_in": (4, 6), "b_in": (6,), "w_gate": (4, 6), "b_gate": (6,),
                                "w_out": (6, 4), "b_out": (4,)}.items()}
    names = list(ff)

    def attention(q, k, v):
        mask = L.causal_mask(3, 5, np.float64, offset=2)
        return L.scaled_dot_attention(q, k, v, mask)

    return {
        "linear": (lambda x, wt, b: weighted(T.linear(x, wt, b)), [r(2, 3, 4), r(4, 5), r(5)]),
        "layer_norm": (lambda x, g, b: weighted(T.layer_norm(x, g, b)), [r(2, 3, 4), r(4), r(4)]),
        "glu_feedforward": (lambda x, *p: weighted(T.glu_feedforward(x, dict(zip(names, p)))),
                            [r(2, 3, 4)] + [ff[n] for n in names]),
        "softmax": (lambda x: weighted(T.softmax(x)), [r(3, 5)]),
        "log_softmax": (lambda x: weighted(T.log_softmax(x)), [r(3, 5)]),
        "swish_tanh_sigmoid": (lambda x: weighted(T.swish(x) + T.tanh(x) * T.sigmoid(x)), [r(3, 4)]),
        "exp_log_div_pow": (lambda x: weighted(T.log(T.exp(x) + 1.0) / (x * x + 2.0) ** 1.5), [r(3, 4)]),
        "attention": (lambda q, k, v: weighted(attention(q, k, v)), [r(1, 2, 3, 2), r(1, 2, 5, 2), r(1, 2, 5, 2)]),
        "conv1d": (lambda x, wt, b: weighted(T.conv1d(x, wt, stride=2, padding=1, bias=b)),
                   [r(2, 7, 3), r(9, 4), r(4)]),
        "depthwise_conv1d": (lambda x, k, b: weighted(T.depthwise_conv1d(x, k, padding=1, bias=b)),
                             [r(2, 6, 3), r(3, 3), r(3)]),
        "embedding_take_rows": (lambda tab: weighted(T.take_rows(tab, np.array([[0, 2, -1], [1, 1, 3]]))),
                                [r(4, 3)]),
        "getitem_concat_transpose": (
            lambda x: weighted(T.concat([T.transpose(x[:, 1:], (1, 0)), x[:1, :2].reshape((2, 1))], axis=1)),
            [r(3, 3)]),
    }


def _ctc_case(rng: np.random.Generator):
    lengths = np.array([6, 4])
    targets = [np.array([1, 1]), np.array([2])]

    def fn(x):
        lp = T.log_softmax(x)
        return T.tsum(O.ctc_loss_batch(lp, lengths, targets, blank=0))
    return fn, [rng.normal(0.0, 1.0, (2, 6, 4))]


def _model_case(rng: np.random.Generator, cfg: ModelConfig):
    model = SiclAed.initialize(cfg, seed=int(rng.integers(1 << 30)), dtype=np.float64)
    feats = [rng.normal(0.0, 1.0, (n, cfg.encoder.feature_dim)) for n in (9, 12, 10)]
    doc = build_document(feats, ["ab", "c a", "b"], loss_utterances=[1, 2])
    names = sorted(model.params)

    def fn(*params):
        m = SiclAed(cfg, dict(zip(names, params)))
        loss, _, _ = m.loss(doc)
        return loss
    return fn, [model.params[n].data for n in names]


def grad_suite(seed: int = 0, model_coords: int = 3) -> list[Check]:
    rng = np.random.default_rng(seed)
    checks = []
    cases = _layer_cases(rng)
    cases["ctc_loss"] = _ctc_case(rng)
    for name, (fn, inputs) in cases.items():
        err = T.grad_check(fn, inputs, eps=1e-5)
        checks.append(Check(f"grad/{name}", err < GRAD_TOL, f"max rel err {err:.2e}"))
    fn_enc, inp = _subsample_case(rng)
    err = T.grad_check(fn_enc, inp, eps=1e-5)
    checks.append(Check("grad/encoder_subsample", err < GRAD_TOL, f"max rel err {err:.2e}"))
    for name, cfg in (("tiny_model_loss", tiny_model_config()), ("desk_model_loss", PRESETS["desk"])):
        fn, inputs = _model_case(rng, cfg)
        err = T.grad_check(fn, inputs, eps=1e-5, max_coords=model_coords, seed=seed)
        checks.append(Check(f"grad/{name}", err < GRAD_TOL,
                            f"max rel err {err:.2e} ({model_coords} coords per tensor, {len(inputs)} tensors)"))
    return checks


def _subsample_case(rng: np.random.Generator):
    cfg = tiny_model_config().encoder
    model = SiclAed.initialize(tiny_model_config(), seed=1, dtype=np.float64)
    w1, b1 = model.params["enc.sub1.w"].data, model.params["enc.sub1.b"].data
    w2, b2 = model.params["enc.sub2.w"].data, model.params["enc.sub2.b"].data
    lengths = np.array([9, 6])
    coef = rng.normal(0.0, 1.0, (2, 3, cfg.model_dim))

    def fn(x, a, b, c, d):
        out, _ = subsample({"enc.sub1.w": a, "enc.sub1.b": b, "enc.sub2.w": c, "enc.sub2.b": d}, x, lengths)
        return T.tsum(out * Tensor(coef))
    return fn, [rng.normal(0.0, 1.0, (2, 9, cfg.feature_dim)), w1, b1, w2, b2]


# -- CTC ------------------------------------------------------------------------

def random_ctc_instance(rng: np.random.Generator):
    t = int(rng.integers(1, 7))
    v = int(rng.integers(1, 4))  # labels, excluding the blank
    n = int(rng.integers(0, 4))
    target = rng.integers(0, v, n)
    logits = rng.normal(0.0, 2.0, (t, v + 1))
    lp = logits - np.logaddexp.reduce(logits, axis=1, keepdims=True)
    return lp, target


def ctc_suite(seed: int = 0, n: int = 500) -> list[Check]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    n_inf = n_empty = 0
    for _ in range(n):
        lp, target = random_ctc_instance(rng)
        blank = lp.shape[1] - 1
        ours = float(O.ctc_loss(Tensor(lp), target, blank=blank).data)
        ref = O.ctc_brute_force(lp, target, blank=blank)
        n_empty += len(target) == 0
        if np.isinf(ref) or np.isinf(ours):
            n_inf += 1
            if ours != ref:
                worst = np.inf
            continue
        worst = max(worst, abs(ours - ref))
    return [Check("ctc/brute_force", worst < EXACT_TOL,
                  f"{n} instances ({n_empty} empty, {n_inf} unrealisable), max abs diff {worst:.2e}")]


# -- equivalence --------------------------------------------------------------

def _mixed_encoded(rng, n: int, d: int) -> EncodedBatch:
    lengths = rng.integers(1, 9, n)
    out = rng.normal(0.0, 1.0, (n, int(lengths.max()), d))
    return EncodedBatch(Tensor(out), lengths)


def cross_attention_gap(rng: np.random.Generator, n: int, d: int = 8, heads: int = 2) -> float:
    params: L.Params = {}
    L.init_attention(params, rng, "x", d, np.float64)
    encoded = _mixed_encoded(rng, n, d)
    counts = rng.integers(1, 6, n)
    assign = UtteranceAssignment(np.repeat(np.arange(n), counts))
    hidden = Tensor(rng.normal(0.0, 1.0, (len(assign), d)))
    batched, _ = doc_to_batch(hidden, assign)
    block = batch_to_doc(utterance_cross_attention(params, "x", heads, batched, encoded), assign)
    ref = cross_attention_blockmask_reference(params, "x", heads, hidden, encoded, assign.assignment)
    return float(np.max(np.abs(block.data - ref.data)))


def utterance_reduction_gap(rng: np.random.Generator) -> float:
    """N=3 document with utterance-scoped self-attention vs three separate forwards."""
    cfg = DecoderConfig(num_layers=2, model_dim=8, num_heads=2, ff_dim=12)
    params: L.Params = {}
    init_decoder(params, rng, cfg, np.float64)
    encoded = _mixed_encoded(rng, 3, cfg.model_dim)
    counts = [4, 2, 5]
    tokens = [rng.integers(1, cfg.vocab_size, c) for c in counts]
    assign = np.repeat(np.arange(3), counts)
    doc_logits, _ = decoder_forward(params, cfg, np.concatenate(tokens), assign, encoded,
                                    self_scope="utterance")
    start = 0
    worst = 0.0
    for i, toks in enumerate(tokens):
        # each utterance alone, at the same document positions
        prefix_cache = None
        if start:
            prefix_cache = decoder_forward(params, cfg, np.concatenate(tokens)[:start], assign[:start], encoded,
                                           self_scope="utterance")[1]
        single, _ = decoder_forward(params, cfg, toks, np.full(len(toks), i), encoded, prefix_cache,
                                    self_scope="utterance")
        worst = max(worst, float(np.max(np.abs(single.data[0] - doc_logits.data[0, start:start + len(toks)]))))
        start += len(toks)
    return worst


def equiv_suite(seed: int = 0) -> list[Check]:
    rng = np.random.default_rng(seed)
    checks = []
    for n in (1, 2, 4, 8):
        gap = max(cross_attention_gap(rng, n) for _ in range(5))
        checks.append(Check(f"equiv/cross_attention_n{n}", gap < EXACT_TOL, f"max abs diff {gap:.2e}"))
    gap = utterance_reduction_gap(rng)
    checks.append(Check("equiv/utterance_scope_n3", gap < EXACT_TOL, f"max abs diff {gap:.2e}"))
    cfg = EncoderConfig(num_layers=1, model_dim=8, num_heads=2, ff_dim=12, feature_dim=3)
    model = SiclAed.initialize(ModelConfig(cfg, DecoderConfig(1, 8, 2, 12)), seed=seed, dtype=np.float64)
    feats = [rng.normal(0.0, 1.0, (n, 3)) for n in (9, 14)]
    alone = encode(model.params, cfg, feats[:1]).outputs.data
    feats2 = [feats[0], feats[1] + 1.0]
    again = encode(model.params, cfg, feats2).outputs.data[:1, :alone.shape[1]]
    checks.append(Check("equiv/encoder_independence", np.array_equal(alone, again), "bit-identical"))
    return checks


# -- round trips ----------------------------------------------------------------

def random_assignment(rng: np.random.Generator) -> UtteranceAssignment:
    n = int(rng.integers(1, 7))
    counts = rng.integers(0, 6, n)
    if counts.sum() == 0:
        counts[int(rng.integers(n))] = 1
    return UtteranceAssignment(np.repeat(np.arange(n), counts), num_utterances=n)


def roundtrip_suite(seed: int = 0, n: int = 100) -> list[Check]:
    rng = np.random.default_rng(seed)
    ok = True
    for _ in range(n):
        assign = random_assignment(rng)
        hidden = Tensor(rng.normal(0.0, 1.0, (len(assign), 5)))
        batched, _ = doc_to_batch(hidden, assign)
        ok &= np.array_equal(batch_to_doc(batched, assign).data, hidden.data)
    checks = [Check("roundtrip/doc_to_batch", bool(ok), f"{n} random assignments, bit-exact")]
    model = SiclAed.initialize(tiny_model_config(), seed=seed)
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "m.ckpt"
        model.save(path)
        loaded = SiclAed.load(path)
    same = loaded.config == model.config and all(
        np.array_equal(loaded.params[k].data, v.data) and loaded.params[k].dtype == v.dtype
        for k, v in model.params.items())
    checks.append(Check("roundtrip/checkpoint", same, "save -> load preserves config and tensors"))
    return checks


def run_suite(name: str, seed: int = 0) -> list[Check]:
    if name == "all":
        return [c for s in SUITES for c in run_suite(s, seed)]
    start = time.perf_counter()
    fn = {"grad": grad_suite, "ctc": ctc_suite, "equiv": equiv_suite, "roundtrip": roundtrip_suite}[name]
    checks = fn(seed)
    elapsed = time.perf_counter() - start
    for c in checks:
        c.detail += f" [{name} suite {elapsed:.1f}s]" if c is checks[-1] else ""
    return checks
