"""Deterministic speech-like corpus and document assembly.

Every character renders as a prototype vector held for 4-8 frames, mixed by
a per-speaker transform plus gaussian noise. Two details make context
informative:

* The letters ``k`` and ``q`` share one prototype. Speakers of group 0 write
  that sound as ``k`` and speakers of group 1 as ``q``, so a single
  utterance cannot tell which spelling applies, but same-speaker examples can.
* Entities (pseudo-names) are pronounced one way and spelled another. They
  only occur in the biasing split.
"""
from __future__ import annotations

import json
import string
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import vocab as V
from .decoder import UtteranceAssignment
from .encoder import subsampled_length
from .errors import CapacityError, ContractError

FEATURE_MAGIC = b"SICLFEAT"

DEFAULT_WORDS: tuple[str, ...] = (
    "red", "blue", "green", "river", "stone", "house", "garden", "window", "little", "silver",
    "morning", "paper", "table", "winter", "summer", "bright", "forest", "yellow", "orange",
    "music", "travel", "number", "letter", "animal", "simple", "mother", "father", "doctor",
    "sister", "water", "bread", "light", "horse", "cloud", "dream", "plant", "train", "sound",
    "early", "happy",
    # words carrying the speaker-dependent sound
    "baker", "market", "kitten", "smoke", "basket", "kind", "walk", "dark", "lake", "rocket",
    "kettle", "book",
)

AMBIGUOUS = ("k", "q")  # spelling used by speaker group 0 / group 1
_ENTITY_CONSONANTS = "bdfghlmnprstv"
_ENTITY_VOWELS = "aeiou"
_WORD_CONSONANTS = _ENTITY_CONSONANTS + AMBIGUOUS[0]  # ordinary pseudo-words may carry the shared sound
_ENTITY_EDIT_ALPHABET = "".join(c for c in string.ascii_lowercase if c not in AMBIGUOUS)


@dataclass(frozen=True)
class CorpusConfig:
    num_speakers: int = 12
    utts_per_speaker: int = 80
    feature_dim: int = 16
    words: tuple[str, ...] = DEFAULT_WORDS
    min_words: int = 2
    max_words: int = 4
    frames_min: int = 4
    frames_max: int = 8
    num_entities: int = 20
    pseudo_word_prob: float = 0.5
    topic_words_per_speaker: int = 6
    utts_per_entity: int = 6
    adaptation_speakers: int = 4
    test_per_speaker: int = 10
    rotation_scale: float = 0.15
    gain_range: tuple[float, float] = (0.85, 1.2)
    noise_range: tuple[float, float] = (0.2, 0.35)

    def __post_init__(self) -> None:
        if not self.words:
            raise ContractError("word list must not be empty")
        if self.adaptation_speakers >= self.num_speakers:
            raise ContractError("need at least one training speaker")


@dataclass
class SpeakerProfile:
    speaker_id: str
    transform: np.ndarray  # [F, F]
    noise_scale: float
    group: int  # index into AMBIGUOUS

    @property
    def ambiguous_letter(self) -> str:
        return AMBIGUOUS[self.group]


@dataclass
class Entity:
    spelling: str
    pronunciation: str


@dataclass
class Utterance:
    id: str
    speaker_id: str
    features: np.ndarray  # [T, F] float32
    transcription: str
    entities: list[str] = field(default_factory=list)

    @property
    def num_frames(self) -> int:
        return int(self.features.shape[0])

    @property
    def token_ids(self) -> list[int]:
        return V.encode_text(self.transcription)


@dataclass
class Corpus:
    config: CorpusConfig
    seed: int
    speakers: dict[str, SpeakerProfile]
    utterances: dict[str, Utterance]
    splits: dict[str, list[str]]
    entities: list[Entity]

    def split(self, name: str) -> list[Utterance]:
        return [self.utterances[i] for i in self.splits[name]]

    def by_speaker(self, utts: list[Utterance]) -> dict[str, list[Utterance]]:
        out: dict[str, list[Utterance]] = {}
        for u in utts:
            out.setdefault(u.speaker_id, []).append(u)
        return out


# -- rendering ---------------------------------------------------------------

def _prototypes(rng: np.random.Generator, dim: int) -> dict[str, np.ndarray]:
    chars = string.ascii_lowercase + " "
    protos = {c: rng.normal(0.0, 1.0, dim) for c in chars}
    protos[AMBIGUOUS[1]] = protos[AMBIGUOUS[0]]
    return protos


def _speaker_transform(rng: np.random.Generator, dim: int, cfg: CorpusConfig) -> np.ndarray:
    a = rng.normal(0.0, 1.0, (dim, dim))
    skew = (a - a.T) / 2.0
    w, vecs = np.linalg.eig(skew * cfg.rotation_scale)
    rotation = np.real(vecs @ np.diag(np.exp(w)) @ np.linalg.inv(vecs))
    gains = rng.uniform(*cfg.gain_range, dim)
    return rotation @ np.diag(gains)


def ctc_realizable(num_labels_with_repeats: int, frames: int) -> bool:
    return frames >= num_labels_with_repeats


def ctc_min_frames(tokens) -> int:
    tokens = list(tokens)
    repeats = sum(1 for a, b in zip(tokens, tokens[1:]) if a == b)
    return len(tokens) + repeats


def render(pronunciation: str, speaker: SpeakerProfile, protos: dict[str, np.ndarray],
           rng: np.random.Generator, cfg: CorpusConfig, min_subsampled: int = 0) -> np.ndarray:
    """Frames for ``pronunciation``; durations are redrawn until the subsampled
    length can host ``min_subsampled`` CTC labels."""
    for _ in range(100):
        durations = rng.integers(cfg.frames_min, cfg.frames_max + 1, len(pronunciation))
        if subsampled_length(int(durations.sum())) >= min_subsampled:
            break
    else:
        raise ContractError(f"cannot render a CTC-realisable utterance for {pronunciation!r}")
    clean = np.concatenate([np.repeat(protos[c][None], d, axis=0)
                            for c, d in zip(pronunciation, durations)])
    noisy = clean @ speaker.transform.T
    noisy += rng.normal(0.0, speaker.noise_scale, noisy.shape)
    return noisy.astype(np.float32)


def spell_for_speaker(text: str, speaker: SpeakerProfile) -> str:
    """Write the shared sound with the speaker's letter."""
    return text.replace(AMBIGUOUS[0], speaker.ambiguous_letter)


def pseudo_word(rng: np.random.Generator, min_len: int = 4, max_len: int = 7,
                consonants: str = _WORD_CONSONANTS) -> str:
    """Alternating consonant/vowel string outside the lexicon's spelling habits."""
    n = int(rng.integers(min_len, max_len + 1))
    return "".join(rng.choice(list(consonants if i % 2 == 0 else _ENTITY_VOWELS)) for i in range(n))


def _make_entities(rng: np.random.Generator, cfg: CorpusConfig, taken: set[str]) -> list[Entity]:
    from .icft import perturb_word

    out: list[Entity] = []
    while len(out) < cfg.num_entities:
        pron = pseudo_word(rng, 5, 7, _ENTITY_CONSONANTS)
        spelling = perturb_word(pron, rng, alphabet=_ENTITY_EDIT_ALPHABET)
        if pron in taken or spelling in taken or len(spelling) < 3:
            continue
        taken.update((pron, spelling))
        out.append(Entity(spelling, pron))
    return out


def _fresh_words(rng: np.random.Generator, count: int, taken: set[str]) -> list[str]:
    out = []
    while len(out) < count:
        w = pseudo_word(rng)
        if w not in taken:
            taken.add(w)
            out.append(w)
    return out


def generate_corpus(cfg: CorpusConfig = CorpusConfig(), seed: int = 0) -> Corpus:
    """Build the full corpus in memory (see :func:`save_corpus` for disk)."""
    rng = np.random.default_rng(seed)
    protos = _prototypes(rng, cfg.feature_dim)
    speakers: dict[str, SpeakerProfile] = {}
    for s in range(cfg.num_speakers):
        sid = f"spk{s:02d}"
        speakers[sid] = SpeakerProfile(
            sid, _speaker_transform(rng, cfg.feature_dim, cfg),
            float(rng.uniform(*cfg.noise_range)), group=s % 2)

    taken = set(cfg.words)
    entities = _make_entities(rng, cfg, taken)
    # Pseudo-words keep the model spelling from acoustics rather than from a
    # closed lexicon; each speaker also reuses a few of them.
    topic_words = {sid: _fresh_words(rng, cfg.topic_words_per_speaker, taken) for sid in speakers}

    utterances: dict[str, Utterance] = {}
    splits: dict[str, list[str]] = {"train": [], "test": [], "adapt": [], "bias": []}
    n_train_speakers = cfg.num_speakers - cfg.adaptation_speakers
    words = list(cfg.words)
    for s, (sid, spk) in enumerate(speakers.items()):
        for j in range(cfg.utts_per_speaker):
            n = int(rng.integers(cfg.min_words, cfg.max_words + 1))
            ws = list(rng.choice(words, n))
            if rng.random() < cfg.pseudo_word_prob:
                if topic_words[sid] and rng.random() < 0.5:
                    extra = topic_words[sid][int(rng.integers(len(topic_words[sid])))]
                else:
                    extra = _fresh_words(rng, 1, taken)[0]
                ws[int(rng.integers(n))] = extra
            text = " ".join(ws)
            spelled = spell_for_speaker(text, spk)
            need = ctc_min_frames(V.encode_text(spelled))
            feats = render(text, spk, protos, rng, cfg, need)
            uid = f"{sid}-{j:03d}"
            utterances[uid] = Utterance(uid, sid, feats, spelled)
            if s >= n_train_speakers:
                splits["adapt"].append(uid)
            elif j >= cfg.utts_per_speaker - cfg.test_per_speaker:
                splits["test"].append(uid)
            else:
                splits["train"].append(uid)

    speaker_list = list(speakers.values())
    for e_idx, ent in enumerate(entities):
        for j in range(cfg.utts_per_entity):
            spk = speaker_list[int(rng.integers(len(speaker_list)))]
            n = int(rng.integers(1, cfg.max_words))
            ws = list(rng.choice(words, n))
            slot = int(rng.integers(0, n + 1))
            pron_words = ws[:slot] + [ent.pronunciation] + ws[slot:]
            text_words = ws[:slot] + [ent.spelling] + ws[slot:]
            pron = " ".join(pron_words)
            spelled = spell_for_speaker(" ".join(text_words), spk)
            need = ctc_min_frames(V.encode_text(spelled))
            feats = render(pron, spk, protos, rng, cfg, need)
            uid = f"bias-e{e_idx:02d}-{j}"
            utterances[uid] = Utterance(uid, spk.speaker_id, feats, spelled, [ent.spelling])
            splits["bias"].append(uid)
    return Corpus(cfg, seed, speakers, utterances, splits, entities)


# -- on-disk format ----------------------------------------------------------

def write_features(path, features: np.ndarray) -> None:
    arr = np.ascontiguousarray(features, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(arr.tobytes())


def read_features(path, feature_dim: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:8] != FEATURE_MAGIC:
        raise ContractError(f"{path}: bad feature magic")
    data = np.frombuffer(raw, dtype="<f4", offset=8)
    if data.size % feature_dim:
        raise ContractError(f"{path}: size not a multiple of feature_dim={feature_dim}")
    return data.reshape(-1, feature_dim).astype(np.float32)


def save_corpus(corpus: Corpus, out_dir) -> Path:
    """Write ``manifest.jsonl``, ``feats/*.bin`` and ``corpus.json``."""
    out = Path(out_dir)
    (out / "feats").mkdir(parents=True, exist_ok=True)
    lines = []
    for uid, utt in corpus.utterances.items():
        rel = f"feats/{uid}.bin"
        write_features(out / rel, utt.features)
        lines.append(json.dumps({
            "id": uid, "speaker": utt.speaker_id, "path": rel, "num_frames": utt.num_frames,
            "transcription": utt.transcription, "entities": utt.entities,
        }, sort_keys=True))
    (out / "manifest.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")
    cfg = asdict(corpus.config)
    meta = {
        "seed": corpus.seed,
        "config": cfg,
        "splits": corpus.splits,
        "speakers": {
            sid: {"group": s.group, "noise_scale": s.noise_scale, "transform": s.transform.tolist()}
            for sid, s in corpus.speakers.items()
        },
        "entities": [asdict(e) for e in corpus.entities],
    }
    (out / "corpus.json").write_text(json.dumps(meta, sort_keys=True), encoding="utf-8")
    return out


def load_corpus(data_dir) -> Corpus:
    root = Path(data_dir)
    meta = json.loads((root / "corpus.json").read_text(encoding="utf-8"))
    raw_cfg = meta["config"]
    raw_cfg["words"] = tuple(raw_cfg["words"])
    for key in ("gain_range", "noise_range"):
        raw_cfg[key] = tuple(raw_cfg[key])
    cfg = CorpusConfig(**raw_cfg)
    speakers = {
        sid: SpeakerProfile(sid, np.asarray(s["transform"]), s["noise_scale"], s["group"])
        for sid, s in meta["speakers"].items()
    }
    utterances: dict[str, Utterance] = {}
    for line in (root / "manifest.jsonl").read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        feats = read_features(root / rec["path"], cfg.feature_dim)
        if feats.shape[0] != rec["num_frames"]:
            raise ContractError(f"{rec['id']}: frame count mismatch")
        utterances[rec["id"]] = Utterance(rec["id"], rec["speaker"], feats, rec["transcription"],
                                          list(rec["entities"]))
    entities = [Entity(**e) for e in meta["entities"]]
    return Corpus(cfg, meta["seed"], speakers, utterances, meta["splits"], entities)


# -- documents ---------------------------------------------------------------

@dataclass(frozen=True)
class DocumentBudget:
    max_tokens: int = 512
    max_frames: int = 4096


@dataclass
class DocumentBatch:
    """One or more documents ready for a forward pass.

    ``tokens``/``targets``/``assignment``/``loss_mask`` are ``[B, L]``;
    ``assignment`` indexes the flat utterance list (-1 marks padding).
    """

    features: np.ndarray  # [U, T_max, F]
    frame_lengths: np.ndarray  # [U]
    tokens: np.ndarray
    targets: np.ndarray
    assignment: np.ndarray
    loss_mask: np.ndarray
    ctc_targets: list[np.ndarray]
    ctc_mask: np.ndarray  # [U] utterances whose CTC term counts
    utterance_ids: list[str] = field(default_factory=list)

    @property
    def num_documents(self) -> int:
        return self.tokens.shape[0]

    @property
    def num_utterances(self) -> int:
        return len(self.frame_lengths)

    def utterance_assignment(self, doc: int = 0) -> UtteranceAssignment:
        a = self.assignment[doc]
        a = a[a >= 0]
        return UtteranceAssignment(a - a.min() if len(a) else a)


def document_targets(transcriptions: list[str]) -> tuple[np.ndarray, np.ndarray]:
    """Concatenate transcriptions with <eou>; returns (targets, assignment)."""
    targets: list[int] = []
    assignment: list[int] = []
    for i, text in enumerate(transcriptions):
        ids = V.encode_text(text) + [V.EOU_ID]
        targets.extend(ids)
        assignment.extend([i] * len(ids))
    return np.array(targets, dtype=np.int64), np.array(assignment, dtype=np.int64)


def build_document(features: list[np.ndarray], transcriptions: list[str],
                   loss_utterances=None, utterance_ids=None,
                   budget: DocumentBudget | None = None) -> DocumentBatch:
    """Teacher-forcing layout: one <sos>, then every utterance ends with <eou>."""
    if len(features) != len(transcriptions) or not features:
        raise ContractError("need one transcription per utterance and at least one utterance")
    targets, assignment = document_targets(transcriptions)
    frames = np.array([f.shape[0] for f in features], dtype=np.int64)
    if budget is not None and (len(targets) > budget.max_tokens or frames.sum() > budget.max_frames):
        raise CapacityError(f"document of {len(targets)} tokens / {frames.sum()} frames exceeds budget")
    tokens = np.concatenate([[V.SOS_ID], targets[:-1]])
    if loss_utterances is None:
        loss_mask = np.ones(len(targets), dtype=bool)
        ctc_mask = np.ones(len(features), dtype=bool)
    else:
        chosen = np.zeros(len(features), dtype=bool)
        chosen[list(loss_utterances)] = True
        loss_mask = chosen[assignment]
        ctc_mask = chosen
    padded = np.zeros((len(features), int(frames.max()), features[0].shape[1]), dtype=np.float32)
    for i, f in enumerate(features):
        padded[i, :f.shape[0]] = f
    return DocumentBatch(
        padded, frames, tokens[None], targets[None], assignment[None], loss_mask[None],
        [np.array(V.encode_text(t), dtype=np.int64) for t in transcriptions], ctc_mask,
        list(utterance_ids or []),
    )


def collate(docs: list[DocumentBatch]) -> DocumentBatch:
    """Stack single documents into one padded batch."""
    n_utts = sum(d.num_utterances for d in docs)
    t_max = max(d.features.shape[1] for d in docs)
    f_dim = docs[0].features.shape[2]
    l_max = max(d.tokens.shape[1] for d in docs)
    feats = np.zeros((n_utts, t_max, f_dim), dtype=np.float32)
    tokens = np.full((len(docs), l_max), V.PAD_ID, dtype=np.int64)
    targets = np.full((len(docs), l_max), V.PAD_ID, dtype=np.int64)
    assignment = np.full((len(docs), l_max), -1, dtype=np.int64)
    loss_mask = np.zeros((len(docs), l_max), dtype=bool)
    lengths, ctc_targets, ctc_mask, ids = [], [], [], []
    base = 0
    for b, d in enumerate(docs):
        if d.num_documents != 1:
            raise ContractError("collate expects single-document batches")
        u = d.num_utterances
        feats[base:base + u, :d.features.shape[1]] = d.features
        n = d.tokens.shape[1]
        tokens[b, :n] = d.tokens[0]
        targets[b, :n] = d.targets[0]
        assignment[b, :n] = d.assignment[0] + base
        loss_mask[b, :n] = d.loss_mask[0]
        lengths.append(d.frame_lengths)
        ctc_targets.extend(d.ctc_targets)
        ctc_mask.append(d.ctc_mask)
        ids.extend(d.utterance_ids)
        base += u
    return DocumentBatch(feats, np.concatenate(lengths), tokens, targets, assignment, loss_mask,
                         ctc_targets, np.concatenate(ctc_mask), ids)


MODES = ("consecutive", "random-same-speaker", "random-any")


def sample_utterances(pool: list[Utterance], mode: str, n_utterances: int,
                      rng: np.random.Generator) -> list[Utterance]:
    if n_utterances < 1:
        raise ContractError("n_utterances must be >= 1")
    if mode == "random-any":
        if n_utterances > len(pool):
            raise ContractError("pool smaller than requested document")
        idx = rng.choice(len(pool), n_utterances, replace=False)
        return [pool[i] for i in idx]
    sessions: dict[str, list[Utterance]] = {}
    for u in pool:
        sessions.setdefault(u.speaker_id, []).append(u)
    eligible = sorted(s for s, us in sessions.items() if len(us) >= n_utterances)
    if not eligible:
        raise ContractError(f"no speaker has {n_utterances} utterances")
    utts = sessions[eligible[int(rng.integers(len(eligible)))]]
    if mode == "consecutive":
        start = int(rng.integers(0, len(utts) - n_utterances + 1))
        return utts[start:start + n_utterances]
    if mode == "random-same-speaker":
        idx = rng.choice(len(utts), n_utterances, replace=False)
        return [utts[i] for i in idx]
    raise ContractError(f"unknown mode {mode!r}; expected one of {MODES}")


def assemble_document(pool: list[Utterance], mode: str, n_utterances: int, seed=0,
                      budget: DocumentBudget = DocumentBudget()) -> DocumentBatch:
    """Sample utterances from ``pool`` and lay them out as one document."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    utts = sample_utterances(pool, mode, n_utterances, rng)
    return build_document([u.features for u in utts], [u.transcription for u in utts],
                          utterance_ids=[u.id for u in utts], budget=budget)


def split_adaptation(corpus: Corpus, context_per_speaker: int = 10, seed: int = 0
                     ) -> tuple[list[Utterance], list[Utterance]]:
    """Split the adaptation speakers into disjoint context and evaluation pools."""
    rng = np.random.default_rng(seed)
    context, evaluation = [], []
    for sid, utts in sorted(corpus.by_speaker(corpus.split("adapt")).items()):
        if len(utts) <= context_per_speaker:
            raise ContractError(f"speaker {sid} has only {len(utts)} utterances")
        chosen = set(rng.choice(len(utts), context_per_speaker, replace=False).tolist())
        for i, u in enumerate(utts):
            (context if i in chosen else evaluation).append(u)
    return context, evaluation
