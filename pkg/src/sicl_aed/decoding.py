"""Joint CTC/attention beam search, long-form and in-context decoding, metrics."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from . import vocab as V
from .decoder import DecoderKVCache
from .encoder import EncodedBatch, stack_encoded
from .errors import CapacityError, ContractError
from .model import SiclAed
from .objectives import NEG_INF, ctc_prefix_extend

# Tokens a hypothesis may emit: letters, space and <eou>.
CANDIDATES = np.array([V.EOU_ID] + list(range(4, V.VOCAB_SIZE)), dtype=np.int64)


@dataclass(frozen=True)
class BeamConfig:
    beam_size: int = 4
    lambda_dec: float = 0.2
    max_tokens_per_utterance: int = 80
    length_penalty: float = 0.0

    def __post_init__(self) -> None:
        if self.beam_size < 1:
            raise ContractError("beam_size must be >= 1")
        if not 0.0 <= self.lambda_dec <= 1.0:
            raise ContractError("lambda_dec must lie in [0, 1]")


@dataclass
class ContextExample:
    features: np.ndarray
    transcription: str
    speaker_id: str = ""
    id: str = ""


@dataclass
class ContextSet:
    """Ordered in-context examples; empty means plain utterance decoding."""

    examples: list[ContextExample] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.examples)

    @classmethod
    def from_utterances(cls, utts) -> ContextSet:
        return cls([ContextExample(u.features, u.transcription, u.speaker_id, u.id) for u in utts])

    def target_tokens(self) -> list[list[int]]:
        return [V.encode_text(e.transcription) + [V.EOU_ID] for e in self.examples]

    @property
    def ids(self) -> list[str]:
        return [e.id for e in self.examples]


@dataclass
class Hypothesis:
    tokens: list[int]
    att_score: float
    ctc_score: float
    lambda_dec: float
    finished: bool = False
    truncated: bool = False

    @property
    def score(self) -> float:
        if self.lambda_dec == 0.0:  # keep an impossible CTC prefix from turning the score into nan
            return self.att_score
        return self.lambda_dec * self.ctc_score + (1.0 - self.lambda_dec) * self.att_score

    def ranked_score(self, length_penalty: float) -> float:
        return self.score + length_penalty * len(self.tokens)

    @property
    def text(self) -> str:
        return V.decode_ids(t for t in self.tokens if t != V.EOU_ID)


# -- step functions ---------------------------------------------------------
# A step function maps the hypothesis token lists (all of equal length) plus
# parent indices to next-token attention log-probs [H, V].

class _CachedSteps:
    """Feeds only the newest token per hypothesis; the context prefix is cached."""

    def __init__(self, model: SiclAed, encoded: EncodedBatch, prefix_cache: DecoderKVCache | None,
                 start_token: int, target_index: int):
        self.model = model
        self.encoded = encoded
        self.cache = prefix_cache
        self.start = start_token
        self.target = target_index

    def __call__(self, hyp_tokens: list[list[int]], parents: np.ndarray) -> np.ndarray:
        last = np.array([[toks[-1] if toks else self.start] for toks in hyp_tokens], dtype=np.int64)
        cache = self.cache.select(parents) if self.cache is not None and self.cache.length else None
        assign = np.full_like(last, self.target)
        logits, self.cache = self.model.decode_step(last, assign, self.encoded, cache)
        return T.log_softmax(logits).data[:, -1]


class _FullSteps:
    """Recomputes the whole document (context prefix plus hypothesis) every step."""

    def __init__(self, model: SiclAed, encoded: EncodedBatch, prefix_tokens: np.ndarray,
                 prefix_assign: np.ndarray, start_token: int, target_index: int, **kw):
        self.model = model
        self.encoded = encoded
        self.prefix_tokens = prefix_tokens
        self.prefix_assign = prefix_assign
        self.start = start_token
        self.target = target_index
        self.kw = kw

    def __call__(self, hyp_tokens: list[list[int]], parents: np.ndarray) -> np.ndarray:
        h = len(hyp_tokens)
        suffix = np.array([[self.start] + toks for toks in hyp_tokens], dtype=np.int64)
        tokens = np.concatenate([np.broadcast_to(self.prefix_tokens, (h, len(self.prefix_tokens))), suffix], 1)
        assign = np.concatenate([np.broadcast_to(self.prefix_assign, (h, len(self.prefix_assign))),
                                 np.full_like(suffix, self.target)], 1)
        logits, _ = self.model.decode_step(tokens, assign, self.encoded, None, **self.kw)
        return T.log_softmax(logits).data[:, -1]


# -- beam search ------------------------------------------------------------

def beam_search(step_fn, ctc_logp: np.ndarray, cfg: BeamConfig) -> tuple[Hypothesis, list[Hypothesis]]:
    """Maximise ``lambda*log p_ctc + (1-lambda)*log p_att`` with joint-score pruning.

    Returns the best hypothesis and all finished hypotheses.
    """
    lam = cfg.lambda_dec
    ctc_logp = np.asarray(ctc_logp, dtype=np.float64)
    t_len = ctc_logp.shape[0]
    hyps = [Hypothesis([], 0.0, 0.0, lam)]
    r_n = np.full((1, t_len), NEG_INF)
    r_b = np.cumsum(ctc_logp[:, V.BLANK_ID])[None]
    last = np.array([-1])
    parents = np.zeros(1, dtype=np.int64)
    finished: list[Hypothesis] = []
    n_cand = len(CANDIDATES)
    for _ in range(cfg.max_tokens_per_utterance):
        att = step_fn([h.tokens for h in hyps], parents)[:, CANDIDATES]  # [H, C]
        psi, new_n, new_b = ctc_prefix_extend(ctc_logp, r_n, r_b, last, CANDIDATES)
        prev_ctc = np.array([h.ctc_score for h in hyps])
        prev_att = np.array([h.att_score for h in hyps])
        ctc_tot = psi
        att_tot = prev_att[:, None] + att
        with np.errstate(invalid="ignore"):
            joint = lam * ctc_tot + (1.0 - lam) * att_tot if lam > 0 else att_tot
        joint = np.where(np.isnan(joint), NEG_INF, joint)
        flat = joint.ravel()
        order = np.argsort(-flat, kind="stable")[:cfg.beam_size]
        order = order[np.isfinite(flat[order])]
        if len(order) == 0:
            break
        next_hyps, keep = [], []
        for idx in order:
            hi, ci = divmod(int(idx), n_cand)
            tok = int(CANDIDATES[ci])
            hyp = Hypothesis(hyps[hi].tokens + [tok], float(att_tot[hi, ci]), float(ctc_tot[hi, ci]), lam)
            if tok == V.EOU_ID:
                hyp.finished = True
                finished.append(hyp)
            else:
                next_hyps.append(hyp)
                keep.append((hi, ci))
        if not next_hyps:
            hyps = []
            break
        hi_idx = np.array([k[0] for k in keep])
        ci_idx = np.array([k[1] for k in keep])
        r_n = new_n[hi_idx, ci_idx]
        r_b = new_b[hi_idx, ci_idx]
        last = CANDIDATES[ci_idx]
        parents = hi_idx
        hyps = next_hyps
        if finished and cfg.length_penalty == 0.0:
            best_done = max(h.score for h in finished)
            if best_done >= max(h.score for h in hyps):
                break
    if finished:
        best = max(finished, key=lambda h: h.ranked_score(cfg.length_penalty))
    elif hyps:
        best = max(hyps, key=lambda h: h.ranked_score(cfg.length_penalty))
        best.truncated = True
    else:
        raise ContractError("beam search produced no hypothesis")
    return best, finished


# -- public decoding entry points --------------------------------------------

@dataclass
class DecodeResult:
    hypothesis: Hypothesis
    context_ids: list[str] = field(default_factory=list)

    @property
    def tokens(self) -> list[int]:
        return [t for t in self.hypothesis.tokens if t != V.EOU_ID]

    @property
    def text(self) -> str:
        return self.hypothesis.text

    @property
    def score(self) -> float:
        return self.hypothesis.score

    @property
    def truncated(self) -> bool:
        return self.hypothesis.truncated


def _prefix_layout(context_tokens: list[list[int]]) -> tuple[np.ndarray, np.ndarray, int]:
    """Inputs/assignment for a teacher-forced context prefix and the target's start token."""
    targets = [t for toks in context_tokens for t in toks]
    assign = [i for i, toks in enumerate(context_tokens) for _ in toks]
    inputs = np.array([V.SOS_ID] + targets[:-1], dtype=np.int64) if targets else np.zeros(0, np.int64)
    start = targets[-1] if targets else V.SOS_ID
    return inputs, np.array(assign, dtype=np.int64), start


def _check_budget(model: SiclAed, n_prefix: int, cfg: BeamConfig) -> None:
    limit = model.config.decoder.max_document_tokens
    if n_prefix + cfg.max_tokens_per_utterance + 1 > limit:
        raise CapacityError(f"context of {n_prefix} tokens leaves no room for decoding (limit {limit})")


def decode_encoded(model: SiclAed, encoded: EncodedBatch, context_tokens: list[list[int]],
                   cfg: BeamConfig, use_cache: bool = True,
                   prefix_cache: DecoderKVCache | None = None) -> tuple[Hypothesis, DecoderKVCache | None]:
    """Decode the last utterance of ``encoded`` given teacher-forced context.

    ``encoded`` holds the context utterances followed by the target. Returns
    the best hypothesis and, when caching, the cache after the context prefix.
    """
    n_ctx = len(context_tokens)
    if len(encoded) != n_ctx + 1:
        raise ContractError("encoded batch must hold the context utterances plus one target")
    inputs, assign, start = _prefix_layout(context_tokens)
    _check_budget(model, len(inputs), cfg)
    target_enc = encoded.select([n_ctx])
    ctc_logp = model.ctc_log_probs(target_enc).data[0, :int(target_enc.lengths[0])]
    if use_cache:
        if prefix_cache is None and len(inputs):
            _, prefix_cache = model.decode_step(inputs, assign, encoded)
        steps = _CachedSteps(model, encoded, prefix_cache, start, n_ctx)
    else:
        steps = _FullSteps(model, encoded, inputs, assign, start, n_ctx)
    best, _ = beam_search(steps, ctc_logp, cfg)
    return best, prefix_cache


def decode_utterance(model: SiclAed, features: np.ndarray, context: ContextSet | None = None,
                     cfg: BeamConfig = BeamConfig()) -> DecodeResult:
    """Joint CTC/attention decoding of one utterance with optional in-context examples."""
    context = context or ContextSet()
    feats = [e.features for e in context.examples] + [features]
    encoded = model.encode(feats)
    best, _ = decode_encoded(model, encoded, context.target_tokens(), cfg)
    return DecodeResult(best, context.ids)


def decode_with_context(model: SiclAed, features: np.ndarray, context: ContextSet,
                        cfg: BeamConfig = BeamConfig()) -> DecodeResult:
    """Speaker adaptation / contextual biasing: ground-truth pairs as context."""
    return decode_utterance(model, features, context, cfg)


def plain_hybrid_decode(model: SiclAed, features: np.ndarray, cfg: BeamConfig = BeamConfig()) -> DecodeResult:
    """Utterance-level AED decoding: no context, no cache, full recomputation."""
    encoded = model.encode([features])
    ctc_logp = model.ctc_log_probs(encoded).data[0, :int(encoded.lengths[0])]
    steps = _FullSteps(model, encoded, np.zeros(0, np.int64), np.zeros(0, np.int64), V.SOS_ID, 0,
                       self_scope="utterance")
    best, _ = beam_search(steps, ctc_logp, cfg)
    return DecodeResult(best)


def evict_oldest(token_costs: list[int], frame_costs: list[int], max_tokens: int,
                 max_frames: int | None = None) -> int:
    """Index of the first context utterance to keep so the newest ones fit."""
    keep_from = len(token_costs)
    tok = frm = 0
    for i in range(len(token_costs) - 1, -1, -1):
        tok += token_costs[i]
        frm += frame_costs[i]
        if tok > max_tokens or (max_frames is not None and frm > max_frames):
            break
        keep_from = i
    return keep_from


def decode_longform(model: SiclAed, utterances: list[np.ndarray], cfg: BeamConfig = BeamConfig(),
                    use_cache: bool = True, max_context_frames: int | None = None,
                    ids: list[str] | None = None) -> list[DecodeResult]:
    """Sequential decoding: utterance k is conditioned on the audio and hypotheses of 1..k-1.

    Context is carried as a KV cache that grows by one forced pass per decoded
    utterance. When the next utterance would overflow the decoder's token
    budget, the oldest utterances are dropped and the cache rebuilt.
    """
    ids = ids or [str(i) for i in range(len(utterances))]
    parts = [model.encode([f]) for f in utterances]
    budget = model.config.decoder.max_document_tokens - cfg.max_tokens_per_utterance - 1
    hyps: list[list[int]] = []  # hypothesis tokens including <eou>
    window = 0  # index of the oldest utterance kept in context
    cache: DecoderKVCache | None = None
    cache_covers = 0  # number of context utterances represented in ``cache``
    results = []
    for k in range(len(utterances)):
        frame_costs = [int(p.lengths[0]) for p in parts[window:k]]
        new_window = window + evict_oldest([len(h) for h in hyps[window:k]], frame_costs, budget,
                                           max_context_frames)
        if new_window != window:
            window, cache, cache_covers = new_window, None, 0
        context_tokens = hyps[window:k]
        encoded = stack_encoded(parts[window:k + 1])
        if use_cache and context_tokens:
            inputs, assign, _ = _prefix_layout(context_tokens)
            done = sum(len(h) for h in context_tokens[:cache_covers])
            if len(inputs) > done:
                _, cache = model.decode_step(inputs[done:], assign[done:], encoded, cache)
            cache_covers = len(context_tokens)
        best, _ = decode_encoded(model, encoded, context_tokens, cfg, use_cache,
                                 prefix_cache=cache if use_cache else None)
        hyps.append(best.tokens if best.finished else best.tokens + [V.EOU_ID])
        results.append(DecodeResult(best, ids[window:k]))
    return results


# -- metrics ----------------------------------------------------------------

def _edit_distance(ref: list, hyp: list) -> int:
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i]
        for j, h in enumerate(hyp, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h)))
        prev = cur
    return prev[-1]


def wer(ref, hyp) -> float:
    """Word error rate in percent; inputs are strings or token lists."""
    ref_w = ref.split() if isinstance(ref, str) else list(ref)
    hyp_w = hyp.split() if isinstance(hyp, str) else list(hyp)
    if not ref_w:
        if hyp_w:
            raise ContractError("WER undefined for an empty reference with a non-empty hypothesis")
        return 0.0
    return 100.0 * _edit_distance(ref_w, hyp_w) / len(ref_w)


def corpus_wer(refs: list[str], hyps: list[str]) -> float:
    """Total word edits over total reference words, in percent."""
    edits = sum(_edit_distance(r.split(), h.split()) for r, h in zip(refs, hyps, strict=True))
    words = sum(len(r.split()) for r in refs)
    if words == 0:
        raise ContractError("no reference words")
    return 100.0 * edits / words


def character_wer(refs: list[str], hyps: list[str]) -> float:
    """Error rate over characters (each character counts as one token)."""
    edits = sum(_edit_distance(list(r), list(h)) for r, h in zip(refs, hyps, strict=True))
    chars = sum(len(r) for r in refs)
    if chars == 0:
        raise ContractError("no reference characters")
    return 100.0 * edits / chars


def entity_recall(entities: list[list[str]], hyps: list[str]) -> float:
    """Percent of entity occurrences whose exact surface form appears in the hypothesis."""
    total = hit = 0
    for ents, hyp in zip(entities, hyps, strict=True):
        words = hyp.split()
        for e in ents:
            total += 1
            hit += e in words
    if total == 0:
        raise ContractError("no entity occurrences to score")
    return 100.0 * hit / total


def write_hypotheses(path, records: list[dict]) -> None:
    """JSON Lines with id, speaker, ref, hyp, scores and context ids."""
    keys = ("id", "speaker", "ref", "hyp", "att_score", "ctc_score", "joint_score", "context_ids")
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps({k: rec.get(k) for k in keys}) + "\n")


def hypothesis_record(uid: str, speaker: str, ref: str, result: DecodeResult) -> dict:
    h = result.hypothesis
    return {"id": uid, "speaker": speaker, "ref": ref, "hyp": result.text, "att_score": h.att_score,
            "ctc_score": h.ctc_score, "joint_score": h.score, "context_ids": result.context_ids}
