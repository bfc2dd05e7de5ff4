"""Transformer decoder with document self-attention and utterance cross-attention.

Each layer attends causally over the whole output document, then regroups
the hidden vectors per utterance (doc -> batch), lets every utterance attend
only to its own encoder frames, and scatters the result back (batch -> doc).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import layers as L
from . import tensor as T
from .encoder import EncodedBatch
from .errors import CapacityError, ContractError, DimensionError
from .tensor import Tensor

EOU_ID = 2


@dataclass(frozen=True)
class DecoderConfig:
    num_layers: int = 2
    model_dim: int = 64
    num_heads: int = 4
    ff_dim: int = 128
    vocab_size: int = 31
    max_document_tokens: int = 512

    def __post_init__(self) -> None:
        if self.model_dim % self.num_heads:
            raise ContractError("model_dim must be divisible by num_heads")


@dataclass
class UtteranceAssignment:
    """Utterance index of every document position."""

    assignment: np.ndarray
    num_utterances: int | None = None

    def __post_init__(self) -> None:
        self.assignment = np.asarray(self.assignment, dtype=np.int64)
        if self.assignment.ndim != 1:
            raise DimensionError("assignment must be 1-D")
        if self.assignment.size and self.assignment.min() < 0:
            raise ContractError("assignment indices must be non-negative")
        n = int(self.assignment.max()) + 1 if self.assignment.size else 0
        if self.num_utterances is None:
            self.num_utterances = n
        elif n > self.num_utterances:
            raise ContractError(f"assignment index {n - 1} >= num_utterances {self.num_utterances}")

    @property
    def utterance_token_counts(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.num_utterances)

    def __len__(self) -> int:
        return len(self.assignment)

    @classmethod
    def from_targets(cls, targets, eou_id: int = EOU_ID) -> UtteranceAssignment:
        """Derive the assignment from <eou> positions in a target document."""
        targets = np.asarray(targets)
        ends = (targets == eou_id).astype(np.int64)
        assignment = np.concatenate([[0], np.cumsum(ends)[:-1]]) if len(targets) else ends
        return cls(assignment)


# -- doc <-> batch -----------------------------------------------------------

@dataclass
class _Layout:
    """Index maps between a padded document batch ``[B, L]`` and utterance rows."""

    utterances: np.ndarray  # utterance ids, one per batch row
    gather: np.ndarray  # [U, Lmax] flat document index or -1
    scatter: np.ndarray  # [B * L] flat batch index or -1

    @property
    def valid(self) -> np.ndarray:
        return self.gather >= 0

    @classmethod
    def build(cls, assignment: np.ndarray, utterances: np.ndarray | None = None) -> _Layout:
        flat = assignment.reshape(-1)
        if utterances is None:
            utterances = np.unique(flat[flat >= 0])
        utterances = np.asarray(utterances, dtype=np.int64)
        positions = np.nonzero(flat >= 0)[0]
        owners = flat[positions]
        rows = np.searchsorted(utterances, owners)
        if len(owners) and (rows.max() >= len(utterances) or (utterances[rows] != owners).any()):
            raise ContractError("assignment refers to an utterance outside the batch")
        counts = np.bincount(rows, minlength=len(utterances))
        width = max(int(counts.max()) if len(counts) else 0, 1)
        # rank of each position within its utterance, in document order
        order = np.argsort(rows, kind="stable")
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        slot = np.empty_like(rows)
        slot[order] = np.arange(len(rows)) - np.repeat(starts, counts)
        gather = np.full((len(utterances), width), -1, dtype=np.int64)
        gather[rows, slot] = positions
        scatter = np.full(flat.shape, -1, dtype=np.int64)
        scatter[positions] = rows * width + slot
        return cls(utterances, gather, scatter)


def doc_to_batch(hidden: Tensor, assignment: UtteranceAssignment) -> tuple[Tensor, np.ndarray]:
    """``[L_doc, d]`` -> ``[N, L_max, d]`` plus a validity mask ``[N, L_max]``.

    Empty utterances yield all-padding rows; padding slots hold zeros.
    """
    if hidden.ndim != 2 or hidden.shape[0] != len(assignment):
        raise ContractError(f"hidden {hidden.shape} does not match assignment of length {len(assignment)}")
    layout = _Layout.build(assignment.assignment, np.arange(assignment.num_utterances))
    return T.take_rows(hidden, layout.gather), layout.valid


def batch_to_doc(batched: Tensor, assignment: UtteranceAssignment) -> Tensor:
    """Inverse of :func:`doc_to_batch` on valid slots."""
    layout = _Layout.build(assignment.assignment, np.arange(assignment.num_utterances))
    n, width = layout.gather.shape
    if batched.ndim != 3 or batched.shape[0] != n or batched.shape[1] < width:
        raise ContractError(f"batched tensor {batched.shape} inconsistent with assignment")
    if batched.shape[1] != width:
        batched = batched[:, :width]
    flat = T.reshape(batched, (n * width, batched.shape[-1]))
    return T.take_rows(flat, layout.scatter)


# -- cross-attention ------------------------------------------------------

def _project_heads(params: L.Params, name: str, x: Tensor, heads: int) -> Tensor:
    return L.split_heads(L.dense(params, name, x), heads)


def utterance_cross_attention(params: L.Params, prefix: str, num_heads: int,
                              batched_queries: Tensor, encoded: EncodedBatch) -> Tensor:
    """Row i of ``batched_queries`` attends only to ``encoded.outputs[i][:lengths[i]]``."""
    if batched_queries.shape[0] != len(encoded):
        raise ContractError("query rows must align one-to-one with encoded utterances")
    if (encoded.lengths <= 0).any():
        raise ContractError("utterance with zero valid encoder frames")
    q = _project_heads(params, f"{prefix}.q", batched_queries, num_heads)
    k = _project_heads(params, f"{prefix}.k", encoded.outputs, num_heads)
    v = _project_heads(params, f"{prefix}.v", encoded.outputs, num_heads)
    mask = L.padding_mask(encoded.lengths, encoded.outputs.shape[1], batched_queries.dtype)
    att = L.scaled_dot_attention(q, k, v, mask, kind="cross")
    return L.dense(params, f"{prefix}.o", L.merge_heads(att))


def concat_frames(encoded: EncodedBatch) -> tuple[Tensor, np.ndarray]:
    """Valid frames of every utterance stacked into ``[sum T'_i, d]`` plus owner ids."""
    rows = np.concatenate([
        np.arange(n) + u * encoded.outputs.shape[1] for u, n in enumerate(encoded.lengths)
    ])
    flat = T.reshape(encoded.outputs, (-1, encoded.outputs.shape[-1]))
    owners = np.repeat(np.arange(len(encoded)), encoded.lengths)
    return T.take_rows(flat, rows), owners


def cross_attention_blockmask_reference(params: L.Params, prefix: str, num_heads: int,
                                        doc_queries: Tensor, encoded: EncodedBatch,
                                        assignment: np.ndarray) -> Tensor:
    """Full document cross-attention with off-block scores masked.

    ``doc_queries`` is ``[B, L, d]`` (or ``[L, d]``) and ``assignment`` holds the
    utterance index of each position (-1 for padding). The whole
    ``L x sum(T'_i)`` score matrix is materialised.
    """
    squeeze = doc_queries.ndim == 2
    if squeeze:
        doc_queries = T.reshape(doc_queries, (1,) + doc_queries.shape)
        assignment = np.asarray(assignment)[None]
    assignment = np.asarray(assignment)
    frames, owners = concat_frames(encoded)
    frames = T.reshape(frames, (1,) + frames.shape)
    q = _project_heads(params, f"{prefix}.q", doc_queries, num_heads)
    k = _project_heads(params, f"{prefix}.k", frames, num_heads)
    v = _project_heads(params, f"{prefix}.v", frames, num_heads)
    allowed = assignment[:, :, None] == owners[None, None, :]
    pad = assignment < 0
    allowed[pad, 0] = True  # padding queries get a dummy key and are zeroed below
    dtype = doc_queries.dtype
    mask = np.where(allowed, 0.0, L.mask_value(dtype)).astype(dtype)[:, None]
    att = L.scaled_dot_attention(q, k, v, mask, kind="cross")
    out = L.dense(params, f"{prefix}.o", L.merge_heads(att))
    if pad.any():
        out = out * (~pad).astype(dtype)[:, :, None]
    if squeeze:
        out = T.reshape(out, out.shape[1:])
    return out


# -- KV cache ----------------------------------------------------------------

@dataclass
class DecoderKVCache:
    """Self-attention keys/values of every document position consumed so far."""

    keys: list[np.ndarray] = field(default_factory=list)  # per layer [B, H, L, dh]
    values: list[np.ndarray] = field(default_factory=list)
    assignment: np.ndarray = field(default_factory=lambda: np.zeros((1, 0), dtype=np.int64))

    @property
    def length(self) -> int:
        return self.assignment.shape[1]

    @property
    def batch(self) -> int:
        return self.assignment.shape[0]

    def select(self, rows) -> DecoderKVCache:
        rows = np.asarray(rows, dtype=np.int64)
        if self.batch == 1:
            rows = np.zeros_like(rows)
        return DecoderKVCache([k[rows] for k in self.keys], [v[rows] for v in self.values],
                              self.assignment[rows])

    def appended(self, keys: list[np.ndarray], values: list[np.ndarray],
                 assignment: np.ndarray) -> DecoderKVCache:
        b = max(self.batch, assignment.shape[0])
        if not self.keys:
            return DecoderKVCache(list(keys), list(values), assignment)

        def grow(old, new):
            if old.shape[0] != b:
                old = np.broadcast_to(old, (b,) + old.shape[1:])
            if new.shape[0] != b:
                new = np.broadcast_to(new, (b,) + new.shape[1:])
            return np.concatenate([old, new], axis=2)

        old_assign = np.broadcast_to(self.assignment, (b, self.length))
        return DecoderKVCache(
            [grow(o, n) for o, n in zip(self.keys, keys)],
            [grow(o, n) for o, n in zip(self.values, values)],
            np.concatenate([old_assign, np.broadcast_to(assignment, (b, assignment.shape[1]))], axis=1),
        )


# -- decoder ----------------------------------------------------------------

def init_decoder(params: L.Params, rng: np.random.Generator, cfg: DecoderConfig, dtype) -> None:
    d = cfg.model_dim
    params["dec.embed"] = Tensor(rng.normal(0.0, 1.0, (cfg.vocab_size, d)).astype(dtype),
                                 requires_grad=True)
    for i in range(cfg.num_layers):
        p = f"dec.{i}"
        L.init_layer_norm(params, f"{p}.self.ln", d, dtype)
        L.init_attention(params, rng, f"{p}.self", d, dtype)
        L.init_layer_norm(params, f"{p}.cross.ln", d, dtype)
        L.init_attention(params, rng, f"{p}.cross", d, dtype)
        L.init_layer_norm(params, f"{p}.ff.ln", d, dtype)
        L.init_glu_ff(params, rng, f"{p}.ff", d, cfg.ff_dim, dtype)
    L.init_layer_norm(params, "dec.out_ln", d, dtype)
    L.init_linear(params, rng, "dec.out", d, cfg.vocab_size, dtype)


def _self_mask(assignment: np.ndarray, cache: DecoderKVCache | None, scope: str,
               dtype) -> np.ndarray:
    b, lq = assignment.shape
    offset = cache.length if cache is not None else 0
    mask = L.causal_mask(lq, offset + lq, dtype, offset)
    if scope == "document":
        return mask
    if scope != "utterance":
        raise ContractError(f"unknown self-attention scope {scope!r}")
    keys = assignment
    if cache is not None and cache.length:
        keys = np.concatenate([np.broadcast_to(cache.assignment, (b, cache.length)), assignment], axis=1)
    same = assignment[:, :, None] == keys[:, None, :]
    return mask + np.where(same, 0.0, L.mask_value(dtype)).astype(dtype)[:, None]


def document_self_attention(params: L.Params, prefix: str, num_heads: int, hidden: Tensor,
                            mask: np.ndarray, cache_kv: tuple[np.ndarray, np.ndarray] | None = None
                            ) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Causal multi-head self-attention over document positions ``[B, L, d]``.

    Returns the attention output and this call's new keys/values (head-split).
    """
    q = _project_heads(params, f"{prefix}.q", hidden, num_heads)
    k = _project_heads(params, f"{prefix}.k", hidden, num_heads)
    v = _project_heads(params, f"{prefix}.v", hidden, num_heads)
    new_k, new_v = k.data, v.data
    if cache_kv is not None and cache_kv[0].shape[2]:
        ck, cv = cache_kv
        b = hidden.shape[0]
        if ck.shape[0] != b:
            ck = np.broadcast_to(ck, (b,) + ck.shape[1:])
            cv = np.broadcast_to(cv, (b,) + cv.shape[1:])
        k = T.concat([Tensor(ck), k], axis=2)
        v = T.concat([Tensor(cv), v], axis=2)
    att = L.scaled_dot_attention(q, k, v, mask, kind="decoder_self")
    return L.dense(params, f"{prefix}.o", L.merge_heads(att)), new_k, new_v


def decoder_forward(params: L.Params, cfg: DecoderConfig, tokens, assignment,
                    encoded: EncodedBatch, cache: DecoderKVCache | None = None, *,
                    cross_attention: str = "utterance", self_scope: str = "document",
                    ) -> tuple[Tensor, DecoderKVCache]:
    """Next-token logits ``[B, L, vocab]`` for a (possibly cached) document chunk.

    ``tokens`` and ``assignment`` are ``[B, L]`` (or 1-D for one document);
    ``assignment`` holds indices into ``encoded`` and -1 marks padding.
    Returns the logits and the cache extended by this chunk.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    assignment = np.asarray(assignment, dtype=np.int64)
    if tokens.ndim == 1:
        tokens, assignment = tokens[None], assignment[None]
    if tokens.shape != assignment.shape:
        raise DimensionError("tokens and assignment must have the same shape")
    if assignment.size and assignment.max() >= len(encoded):
        raise ContractError("assignment index beyond the encoded batch")
    b, length = tokens.shape
    offset = cache.length if cache is not None else 0
    if offset + length > cfg.max_document_tokens:
        raise CapacityError(
            f"document of {offset + length} tokens exceeds max_document_tokens={cfg.max_document_tokens}")
    dtype = params["dec.embed"].dtype

    h = T.embedding_lookup(params["dec.embed"], np.where(tokens >= 0, tokens, 0))
    h = h + L.sinusoidal_positions(length, cfg.model_dim, offset, dtype)
    self_mask = _self_mask(assignment, cache, self_scope, dtype)

    layout = None
    if cross_attention == "utterance":
        layout = _Layout.build(assignment)
        sub_encoded = encoded if np.array_equal(layout.utterances, np.arange(len(encoded))) \
            else _select_encoded(encoded, layout.utterances)
    elif cross_attention != "blockmask":
        raise ContractError(f"unknown cross_attention variant {cross_attention!r}")

    new_keys, new_values = [], []
    for i in range(cfg.num_layers):
        p = f"dec.{i}"
        cache_kv = (cache.keys[i], cache.values[i]) if cache is not None and cache.keys else None
        att, k, v = document_self_attention(params, f"{p}.self", cfg.num_heads,
                                            L.norm(params, f"{p}.self.ln", h), self_mask, cache_kv)
        new_keys.append(k)
        new_values.append(v)
        h = h + att

        z = L.norm(params, f"{p}.cross.ln", h)
        if layout is not None:
            flat = T.reshape(z, (b * length, cfg.model_dim))
            batched = T.take_rows(flat, layout.gather)
            out = utterance_cross_attention(params, f"{p}.cross", cfg.num_heads, batched, sub_encoded)
            u, width = layout.gather.shape
            c = T.take_rows(T.reshape(out, (u * width, cfg.model_dim)), layout.scatter)
            c = T.reshape(c, (b, length, cfg.model_dim))
        else:
            c = cross_attention_blockmask_reference(params, f"{p}.cross", cfg.num_heads, z,
                                                    encoded, assignment)
        h = h + c
        h = h + L.glu_ff(params, f"{p}.ff", L.norm(params, f"{p}.ff.ln", h))

    logits = L.dense(params, "dec.out", L.norm(params, "dec.out_ln", h))
    base = cache if cache is not None else DecoderKVCache()
    return logits, base.appended(new_keys, new_values, assignment)


def _select_encoded(encoded: EncodedBatch, utterances: np.ndarray) -> EncodedBatch:
    lengths = encoded.lengths[utterances]
    width = int(lengths.max())
    outputs = T.getitem(encoded.outputs, (utterances, slice(0, width)))
    return EncodedBatch(outputs, lengths)
