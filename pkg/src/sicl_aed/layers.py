"""Building blocks shared by the encoder and decoder."""
from __future__ import annotations

import math
import threading
from contextlib import contextmanager

import numpy as np

from . import tensor as T
from .errors import ContractError
from .tensor import Tensor

Params = dict[str, Tensor]


def mask_value(dtype) -> float:
    """Additive mask entry: -inf in double, a large finite sentinel in single."""
    return -np.inf if np.dtype(dtype) == np.float64 else -1e30


def sinusoidal_positions(length: int, dim: int, offset: int = 0, dtype=np.float64) -> np.ndarray:
    pos = np.arange(offset, offset + length, dtype=np.float64)[:, None]
    i = np.arange(0, dim, 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, i / dim)
    pe = np.zeros((length, dim))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : dim // 2])
    return pe.astype(dtype)


# -- parameter initialisation ---------------------------------------------

def init_linear(params: Params, rng: np.random.Generator, name: str, d_in: int, d_out: int,
                dtype, bias: bool = True, scale: float = 1.0) -> None:
    limit = scale * math.sqrt(6.0 / (d_in + d_out))
    params[f"{name}.w"] = Tensor(rng.uniform(-limit, limit, (d_in, d_out)).astype(dtype),
                                 requires_grad=True)
    if bias:
        params[f"{name}.b"] = Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True)


def init_layer_norm(params: Params, name: str, dim: int, dtype) -> None:
    params[f"{name}.g"] = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
    params[f"{name}.b"] = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)


def init_attention(params: Params, rng, name: str, dim: int, dtype) -> None:
    for proj in ("q", "k", "v", "o"):
        init_linear(params, rng, f"{name}.{proj}", dim, dim, dtype)


def init_glu_ff(params: Params, rng, name: str, dim: int, ff_dim: int, dtype) -> None:
    init_linear(params, rng, f"{name}.in", dim, ff_dim, dtype)
    init_linear(params, rng, f"{name}.gate", dim, ff_dim, dtype)
    init_linear(params, rng, f"{name}.out", ff_dim, dim, dtype)


def dense(params: Params, name: str, x: Tensor) -> Tensor:
    return T.linear(x, params[f"{name}.w"], params.get(f"{name}.b"))


def norm(params: Params, name: str, x: Tensor) -> Tensor:
    return T.layer_norm(x, params[f"{name}.g"], params[f"{name}.b"])


def glu_ff(params: Params, name: str, x: Tensor) -> Tensor:
    return T.glu_feedforward(x, {
        "w_in": params[f"{name}.in.w"], "b_in": params[f"{name}.in.b"],
        "w_gate": params[f"{name}.gate.w"], "b_gate": params[f"{name}.gate.b"],
        "w_out": params[f"{name}.out.w"], "b_out": params[f"{name}.out.b"],
    })


# -- score-matrix accounting ----------------------------------------------

class ScoreTracker:
    """Records the size of every materialised attention score tensor."""

    def __init__(self) -> None:
        self.peak: dict[str, int] = {}
        self.total: dict[str, int] = {}

    def note(self, kind: str, elements: int) -> None:
        self.peak[kind] = max(self.peak.get(kind, 0), elements)
        self.total[kind] = self.total.get(kind, 0) + elements


_tracking = threading.local()


@contextmanager
def track_scores():
    prev = getattr(_tracking, "tracker", None)
    tracker = ScoreTracker()
    _tracking.tracker = tracker
    try:
        yield tracker
    finally:
        _tracking.tracker = prev


def _note_scores(kind: str, elements: int) -> None:
    tracker = getattr(_tracking, "tracker", None)
    if tracker is not None:
        tracker.note(kind, elements)


# -- attention --------------------------------------------------------------

def split_heads(x: Tensor, num_heads: int) -> Tensor:
    """[B, L, d] -> [B, H, L, d/H]"""
    b, length, d = x.shape
    return T.transpose(T.reshape(x, (b, length, num_heads, d // num_heads)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    """[B, H, L, dh] -> [B, L, H*dh]"""
    b, h, length, dh = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, length, h * dh))


def scaled_dot_attention(qh: Tensor, kh: Tensor, vh: Tensor, mask: np.ndarray | None,
                         kind: str = "attention") -> Tensor:
    """Attention over head-split tensors ``[B, H, L, dh]``.

    ``mask`` is additive and broadcastable to ``[B, H, Lq, Lk]``. A query row
    whose keys are all masked is a contract violation.
    """
    b, h, lq, dh = qh.shape
    lk = kh.shape[2]
    if mask is not None:
        blocked = np.broadcast_to(mask, (mask.shape[0], 1, lq, lk)) < -1e29
        if blocked.all(axis=-1).any():
            raise ContractError("attention row with every key masked")
    scores = T.matmul(qh, T.swapaxes(kh, 2, 3)) * (1.0 / math.sqrt(dh))
    if mask is not None:
        scores = scores + mask
    _note_scores(kind, scores.size)
    weights = T.softmax(scores, axis=-1)
    return T.matmul(weights, vh)


def padding_mask(lengths, max_len: int, dtype) -> np.ndarray:
    """Additive key-padding mask ``[U, 1, 1, max_len]``."""
    lengths = np.asarray(lengths)
    valid = np.arange(max_len)[None, :] < lengths[:, None]
    mask = np.where(valid, 0.0, mask_value(dtype)).astype(dtype)
    return mask[:, None, None, :]


def causal_mask(lq: int, lk: int, dtype, offset: int | None = None) -> np.ndarray:
    """Additive mask ``[1, 1, lq, lk]``; query i sits at absolute position offset+i."""
    if offset is None:
        offset = lk - lq
    allowed = np.arange(lk)[None, :] <= (np.arange(lq)[:, None] + offset)
    return np.where(allowed, 0.0, mask_value(dtype)).astype(dtype)[None, None]
