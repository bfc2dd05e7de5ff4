"""In-context fine-tuning examples: copy a perturbed spelling from context."""
from __future__ import annotations

import string
from dataclasses import dataclass

import numpy as np

from . import vocab as V
from .data import DocumentBatch, DocumentBudget, Utterance, build_document
from .errors import ContractError

EDIT_TYPES = ("insert", "delete", "substitute")
MIN_WORD_LENGTH = 3


@dataclass(frozen=True)
class IcftConfig:
    context_size: int = 3
    icft_ratio: float = 0.5  # share of fine-tuning documents that are ICFT examples
    max_edits: int = 2
    # Rewrite the chosen word in the context transcriptions too, so the
    # target spelling is predictable from context.
    rewrite_context: bool = True
    # Draw one context utterance among those sharing a word with the target,
    # so that most examples carry a perturbation.
    ensure_shared: bool = True
    alphabet: str = string.ascii_lowercase


@dataclass
class IcftExample:
    context: list[Utterance]
    target: Utterance
    modified_word: tuple[str, str] | None  # (original, perturbed)
    document: DocumentBatch

    @property
    def loss_mask(self) -> np.ndarray:
        return self.document.loss_mask[0]


def select_shared_word(target: str, context: list[str], rng: np.random.Generator) -> str | None:
    """Uniform choice among words of length >= 3 present in target and any context."""
    in_context = set()
    for text in context:
        in_context.update(text.split())
    shared = sorted({w for w in target.split() if len(w) >= MIN_WORD_LENGTH} & in_context)
    if not shared:
        return None
    return shared[int(rng.integers(len(shared)))]


def apply_edit(word: str, kind: str, pos: int, letter: str | None = None) -> str:
    if kind == "delete":
        return word[:pos] + word[pos + 1:]
    if kind == "substitute":
        return word[:pos] + letter + word[pos + 1:]
    if kind == "insert":
        return word[:pos] + letter + word[pos:]
    raise ContractError(f"unknown edit {kind!r}")


def edit_distance(a: str, b: str) -> int:
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def perturb_word(word: str, rng: np.random.Generator, max_edits: int = 2,
                 alphabet: str = string.ascii_lowercase) -> str:
    """Apply 1..max_edits random insert/delete/substitute edits.

    Draws are repeated in the rare case where the edits cancel out.
    """
    if len(word) < MIN_WORD_LENGTH:
        raise ContractError(f"cannot perturb {word!r}: need at least {MIN_WORD_LENGTH} letters")
    while True:
        out = word
        for _ in range(int(rng.integers(1, max_edits + 1))):
            kind = EDIT_TYPES[int(rng.integers(3))]
            if kind == "insert":
                pos = int(rng.integers(len(out) + 1))
                out = apply_edit(out, kind, pos, alphabet[int(rng.integers(len(alphabet)))])
            elif kind == "delete" and len(out) > 1:
                out = apply_edit(out, kind, int(rng.integers(len(out))))
            elif kind == "substitute":
                pos = int(rng.integers(len(out)))
                choices = [c for c in alphabet if c != out[pos]]
                out = apply_edit(out, kind, pos, choices[int(rng.integers(len(choices)))])
        if out and out != word:
            return out


def replace_word(text: str, original: str, new: str) -> str:
    return " ".join(new if w == original else w for w in text.split(" "))


def build_icft_example(pool: list[Utterance], rng: np.random.Generator,
                       cfg: IcftConfig = IcftConfig(),
                       budget: DocumentBudget = DocumentBudget()) -> IcftExample:
    """Sample same-speaker context plus a target and perturb a shared word.

    ``pool`` must hold utterances of one speaker. Loss (attention and CTC) is
    restricted to the target utterance. The attention loss sees the perturbed
    spelling, the CTC loss the original one. Without a shared word the document is
    left unmodified.
    """
    if len(pool) < cfg.context_size + 1:
        raise ContractError(f"speaker pool has {len(pool)} utterances, need {cfg.context_size + 1}")
    if len({u.speaker_id for u in pool}) != 1:
        raise ContractError("ICFT pool must come from a single speaker")
    t = int(rng.integers(len(pool)))
    target = pool[t]
    others = [i for i in range(len(pool)) if i != t]
    chosen: list[int] = []
    if cfg.ensure_shared:
        words = {w for w in target.transcription.split() if len(w) >= MIN_WORD_LENGTH}
        sharing = [i for i in others if words & set(pool[i].transcription.split())]
        if sharing:
            chosen.append(sharing[int(rng.integers(len(sharing)))])
    rest = [i for i in others if i not in chosen]
    chosen += [rest[i] for i in rng.choice(len(rest), cfg.context_size - len(chosen), replace=False)]
    context = [pool[i] for i in rng.permutation(chosen)]
    ctx_texts = [u.transcription for u in context]
    word = select_shared_word(target.transcription, ctx_texts, rng)
    tgt_text = target.transcription
    modified = None
    if word is not None:
        new = perturb_word(word, rng, cfg.max_edits, cfg.alphabet)
        modified = (word, new)
        tgt_text = replace_word(tgt_text, word, new)
        if cfg.rewrite_context:
            ctx_texts = [replace_word(t, word, new) for t in ctx_texts]
    doc = build_document([u.features for u in context] + [target.features], ctx_texts + [tgt_text],
                         loss_utterances=[len(context)],
                         utterance_ids=[u.id for u in context] + [target.id], budget=budget)
    # The CTC head only hears the audio, so its target keeps the original spelling.
    doc.ctc_targets[-1] = np.array(V.encode_text(target.transcription), dtype=np.int64)
    new_target = Utterance(target.id, target.speaker_id, target.features, tgt_text, list(target.entities))
    return IcftExample(context, new_target, modified, doc)
