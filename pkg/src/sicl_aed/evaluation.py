"""Experiment drivers: recognition, speaker adaptation and contextual biasing."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import AMBIGUOUS, Corpus, Utterance, split_adaptation
from .decoding import (BeamConfig, ContextSet, character_wer, corpus_wer, decode_longform,
                       decode_utterance, entity_recall, hypothesis_record)
from .model import SiclAed


def align_chars(ref: str, hyp: str) -> list[tuple[str, str | None]]:
    """Levenshtein alignment; pairs each reference char with its hypothesis char (or None)."""
    n, m = len(ref), len(hyp)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            d[i, j] = min(d[i - 1, j] + 1, d[i, j - 1] + 1, d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]))
    pairs = []
    i, j = n, m
    while i > 0:
        if j > 0 and d[i, j] == d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            pairs.append((ref[i - 1], hyp[j - 1]))
            i, j = i - 1, j - 1
        elif d[i, j] == d[i - 1, j] + 1:
            pairs.append((ref[i - 1], None))
            i -= 1
        else:
            j -= 1
    return pairs[::-1]


def ambiguous_counts(ref: str, hyp: str, letters=AMBIGUOUS) -> tuple[int, int]:
    """(correct, total) over reference occurrences of the ambiguous letters."""
    correct = total = 0
    for r, h in align_chars(ref, hyp):
        if r in letters:
            total += 1
            correct += r == h
    return correct, total


@dataclass
class EvalResult:
    metrics: dict = field(default_factory=dict)
    records: list[dict] = field(default_factory=list)


def recognise(model: SiclAed, utts: list[Utterance], cfg: BeamConfig = BeamConfig()) -> EvalResult:
    """Context-free decoding of each utterance."""
    records = []
    for u in utts:
        res = decode_utterance(model, u.features, None, cfg)
        records.append(hypothesis_record(u.id, u.speaker_id, u.transcription, res))
    refs = [r["ref"] for r in records]
    hyps = [r["hyp"] for r in records]
    return EvalResult({"wer": corpus_wer(refs, hyps), "cer": character_wer(refs, hyps),
                       "utterances": len(utts)}, records)


def longform(model: SiclAed, documents: list[list[Utterance]], cfg: BeamConfig = BeamConfig(),
             use_cache: bool = True) -> EvalResult:
    records = []
    for doc in documents:
        results = decode_longform(model, [u.features for u in doc], cfg, use_cache, ids=[u.id for u in doc])
        for u, res in zip(doc, results):
            records.append(hypothesis_record(u.id, u.speaker_id, u.transcription, res))
    refs = [r["ref"] for r in records]
    hyps = [r["hyp"] for r in records]
    return EvalResult({"wer": corpus_wer(refs, hyps), "cer": character_wer(refs, hyps)}, records)


def speaker_adaptation(model: SiclAed, corpus: Corpus, context_size: int, n_eval: int = 200,
                       seed: int = 0, cfg: BeamConfig = BeamConfig(),
                       context_per_speaker: int = 10) -> EvalResult:
    """Decode held-out speakers with ``context_size`` random same-speaker examples."""
    ctx_pool, eval_pool = split_adaptation(corpus, context_per_speaker, seed)
    rng = np.random.default_rng(seed)
    chosen = [eval_pool[i] for i in np.sort(rng.choice(len(eval_pool), min(n_eval, len(eval_pool)),
                                                       replace=False))]
    by_speaker = corpus.by_speaker(ctx_pool)
    records = []
    correct = total = 0
    for u in chosen:
        pool = by_speaker[u.speaker_id]
        picks = rng.choice(len(pool), context_size, replace=False) if context_size else []
        ctx = ContextSet.from_utterances([pool[i] for i in picks])
        res = decode_utterance(model, u.features, ctx, cfg)
        records.append(hypothesis_record(u.id, u.speaker_id, u.transcription, res))
        c, t = ambiguous_counts(u.transcription, res.text)
        correct += c
        total += t
    refs = [r["ref"] for r in records]
    hyps = [r["hyp"] for r in records]
    return EvalResult({"context_size": context_size, "ambiguous_accuracy": 100.0 * correct / max(total, 1),
                       "ambiguous_chars": total, "wer": corpus_wer(refs, hyps),
                       "cer": character_wer(refs, hyps), "utterances": len(chosen)}, records)


def bias_contexts(corpus: Corpus, target: Utterance, rng: np.random.Generator, context_size: int = 3,
                  relevant: int = 1) -> list[Utterance]:
    """Exemplars for biasing: ``relevant`` other utterances with the target's entity plus distractors."""
    bias = corpus.split("bias")
    same = [u for u in bias if u.id != target.id and set(u.entities) & set(target.entities)]
    other = [u for u in bias if not set(u.entities) & set(target.entities)]
    picks = [same[i] for i in rng.choice(len(same), min(relevant, len(same)), replace=False)]
    n_other = max(0, context_size - len(picks))
    picks += [other[i] for i in rng.choice(len(other), n_other, replace=False)]
    return [picks[i] for i in rng.permutation(len(picks))]


def contextual_biasing(model: SiclAed, corpus: Corpus, with_context: bool, seed: int = 0,
                       cfg: BeamConfig = BeamConfig(), context_size: int = 3,
                       relevant: int = 1) -> EvalResult:
    """Entity recall on the biasing split, with or without entity exemplars as context."""
    rng = np.random.default_rng(seed)
    records, ents = [], []
    for u in corpus.split("bias"):
        ctx_utts = bias_contexts(corpus, u, rng, context_size, relevant)  # drawn either way
        ctx = ContextSet.from_utterances(ctx_utts) if with_context else None
        res = decode_utterance(model, u.features, ctx, cfg)
        records.append(hypothesis_record(u.id, u.speaker_id, u.transcription, res))
        ents.append(u.entities)
    hyps = [r["hyp"] for r in records]
    refs = [r["ref"] for r in records]
    return EvalResult({"entity_recall": entity_recall(ents, hyps), "wer": corpus_wer(refs, hyps),
                       "with_context": with_context}, records)
