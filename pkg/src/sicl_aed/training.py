"""Optimizer, batch sampling and the utterance/document/ICFT training loops."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass

import numpy as np

from . import objectives as O
from .data import (AMBIGUOUS, Corpus, DocumentBatch, DocumentBudget, Utterance, build_document,
                   collate, sample_utterances)
from .errors import ContractError
from .icft import IcftConfig, build_icft_example
from .model import SiclAed
from .tensor import Tape, Tensor

log = logging.getLogger("sicl_aed")

STAGES = ("utterance", "document", "icft")


class Adam:
    """Adam with global-norm gradient clipping."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, betas=(0.9, 0.98),
                 eps: float = 1e-9, clip_norm: float | None = 5.0):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float | None = None) -> float:
        lr = self.lr if lr is None else lr
        grads = {k: p.grad for k, p in self.params.items() if p.grad is not None}
        norm = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))
        scale = 1.0
        if self.clip_norm is not None and norm > self.clip_norm:
            scale = self.clip_norm / (norm + 1e-12)
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, g in grads.items():
            g = g * scale
            self.m[k] *= self.b1
            self.m[k] += (1.0 - self.b1) * g
            self.v[k] *= self.b2
            self.v[k] += (1.0 - self.b2) * g * g
            p = self.params[k]
            p.data -= (lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)).astype(p.data.dtype)
        return norm


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "document"
    steps: int = 1000
    docs_per_batch: int = 8
    max_utterances: int = 4  # document stage samples N uniformly in [1, max]
    mode: str = "random-same-speaker"
    lr: float = 2e-3
    min_lr: float = 2e-4
    warmup: int = 100
    clip_norm: float = 5.0
    # Probability of rewriting k<->q across a whole multi-utterance document; keeps the
    # spelling of the shared sound recoverable only from context.
    swap_prob: float = 0.3
    seed: int = 0
    time_budget_s: float | None = None
    log_every: int = 50

    def __post_init__(self) -> None:
        if self.stage not in STAGES:
            raise ContractError(f"unknown stage {self.stage!r}; expected one of {STAGES}")
        if self.steps < 0 or self.docs_per_batch < 1 or self.max_utterances < 1:
            raise ContractError("steps, docs_per_batch and max_utterances must be positive")


def swap_ambiguous(text: str) -> str:
    a, b = AMBIGUOUS
    return text.translate(str.maketrans({a: b, b: a}))


def document_from(utts: list[Utterance], swap: bool = False, **kw) -> DocumentBatch:
    texts = [swap_ambiguous(u.transcription) if swap else u.transcription for u in utts]
    return build_document([u.features for u in utts], texts, utterance_ids=[u.id for u in utts], **kw)


def learning_rate(cfg: TrainConfig, step: int) -> float:
    if step < cfg.warmup:
        return cfg.lr * (step + 1) / cfg.warmup
    frac = (step - cfg.warmup) / max(1, cfg.steps - cfg.warmup)
    return cfg.min_lr + 0.5 * (cfg.lr - cfg.min_lr) * (1.0 + np.cos(np.pi * min(1.0, frac)))


def sample_batch(pool: list[Utterance], cfg: TrainConfig, rng: np.random.Generator,
                 icft: IcftConfig | None = None) -> DocumentBatch:
    docs = []
    by_speaker: dict[str, list[Utterance]] = {}
    for u in pool:
        by_speaker.setdefault(u.speaker_id, []).append(u)
    speakers = sorted(by_speaker)
    for _ in range(cfg.docs_per_batch):
        if cfg.stage == "icft" and icft is not None and rng.random() < icft.icft_ratio:
            spk = speakers[int(rng.integers(len(speakers)))]
            docs.append(build_icft_example(by_speaker[spk], rng, icft).document)
            continue
        n = 1 if cfg.stage == "utterance" else int(rng.integers(1, cfg.max_utterances + 1))
        utts = sample_utterances(pool, cfg.mode if n > 1 else "random-any", n, rng)
        # Single utterances keep their true spelling, so the speaker remains a
        # usable cue when there is no context.
        swap = n > 1 and bool(rng.random() < cfg.swap_prob)
        docs.append(document_from(utts, swap=swap))
    return collate(docs)


def train(model: SiclAed, pool: list[Utterance], cfg: TrainConfig,
          icft: IcftConfig | None = None, optimizer: Adam | None = None) -> list[dict]:
    """Run ``cfg.steps`` optimizer steps in place; returns per-step records."""
    rng = np.random.default_rng(cfg.seed)
    opt = optimizer or Adam(model.params, cfg.lr, clip_norm=cfg.clip_norm)
    loss_cfg = O.HybridLossConfig(model.config.ctc_weight)
    history = []
    start = time.perf_counter()
    for step in range(cfg.steps):
        batch = sample_batch(pool, cfg, rng, icft)
        model.zero_grad()
        with Tape() as tape:
            loss, stats, _ = model.loss(batch, loss_cfg)
            tape.backward(loss)
        lr = learning_rate(cfg, step)
        norm = opt.step(lr)
        rec = {"step": step, "loss": stats.total, "ctc": stats.ctc, "att": stats.attention,
               "grad_norm": norm, "lr": lr, "skipped_ctc": stats.skipped_ctc}
        history.append(rec)
        if cfg.log_every and (step % cfg.log_every == 0 or step == cfg.steps - 1):
            log.info("stage=%s step=%d loss=%.4f ctc=%.4f att=%.4f lr=%.2e elapsed=%.0fs", cfg.stage, step,
                     stats.total, stats.ctc, stats.attention, lr, time.perf_counter() - start)
        if cfg.time_budget_s is not None and time.perf_counter() - start > cfg.time_budget_s:
            log.warning("time budget reached after %d steps", step + 1)
            break
    model.zero_grad()
    return history


def teacher_forced_accuracy(model: SiclAed, docs: list[DocumentBatch], chunk: int = 8) -> float:
    """Token accuracy of argmax predictions under teacher forcing (loss-masked positions)."""
    correct = total = 0
    for i in range(0, len(docs), chunk):
        batch = collate(docs[i:i + chunk])
        enc = model.encode_padded(batch.features, batch.frame_lengths)
        logits, _ = model.decode_step(batch.tokens, batch.assignment, enc)
        pred = logits.data.argmax(-1)
        mask = batch.loss_mask
        correct += int(((pred == batch.targets) & mask).sum())
        total += int(mask.sum())
    return correct / max(total, 1)


def evaluation_documents(pool: list[Utterance], n_utterances: int, seed: int = 0,
                         mode: str = "consecutive") -> list[DocumentBatch]:
    """Partition each speaker's utterances into documents of ``n_utterances``."""
    docs = []
    sessions: dict[str, list[Utterance]] = {}
    for u in pool:
        sessions.setdefault(u.speaker_id, []).append(u)
    rng = np.random.default_rng(seed)
    for spk in sorted(sessions):
        utts = list(sessions[spk])
        if mode != "consecutive":
            utts = [utts[i] for i in rng.permutation(len(utts))]
        for j in range(0, len(utts), n_utterances):
            docs.append(document_from(utts[j:j + n_utterances]))
    return docs


def train_corpus(model: SiclAed, corpus: Corpus, utterance_steps: int, document_steps: int,
                 seed: int = 0, **overrides) -> list[dict]:
    """Two-stage schedule: single utterances, then multi-utterance documents."""
    pool = corpus.split("train")
    history = []
    if utterance_steps:
        history += train(model, pool, TrainConfig(stage="utterance", steps=utterance_steps, seed=seed,
                                                  **overrides))
    if document_steps:
        history += train(model, pool, TrainConfig(stage="document", steps=document_steps, seed=seed + 1,
                                                  **overrides))
    return history
