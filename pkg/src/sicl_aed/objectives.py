"""CTC and attention objectives, their hybrid, and CTC prefix scoring."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .tensor import Tensor
from .vocab import BLANK_ID, EOU_ID

NEG_INF = -np.inf


def _lse(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    with np.errstate(invalid="ignore"):
        return np.logaddexp(a, b)


def _extend(target, blank: int) -> np.ndarray:
    ext = np.full(2 * len(target) + 1, blank, dtype=np.int64)
    ext[1::2] = target
    return ext


def _ctc_tables(lp: np.ndarray, lengths: np.ndarray, targets: list, blank: int):
    """Log-space forward (alpha) and backward (beta) tables for a batch.

    ``beta[t, u, s]`` excludes the emission at ``t`` so that
    ``alpha + beta`` is the log mass of paths through ``(t, s)``.
    """
    n, t_max, _ = lp.shape
    s_max = 2 * max((len(y) for y in targets), default=0) + 1
    ext = np.full((n, s_max), blank, dtype=np.int64)
    s_len = np.zeros(n, dtype=np.int64)
    for u, y in enumerate(targets):
        e = _extend(y, blank)
        ext[u, :len(e)] = e
        s_len[u] = len(e)
    skip = np.zeros((n, s_max), dtype=bool)
    skip[:, 2:] = (ext[:, 2:] != blank) & (ext[:, 2:] != ext[:, :-2])
    rows = np.arange(n)[:, None]
    emit = lp[rows, :, ext].transpose(2, 0, 1)  # [T, U, S]

    alpha = np.full((t_max, n, s_max), NEG_INF)
    alpha[0, :, 0] = emit[0, :, 0]
    has_label = s_len > 1
    if s_max > 1:
        alpha[0, has_label, 1] = emit[0, has_label, 1]
    for t in range(1, t_max):
        prev = alpha[t - 1]
        acc = prev.copy()
        acc[:, 1:] = _lse(acc[:, 1:], prev[:, :-1])
        acc[:, 2:] = np.where(skip[:, 2:], _lse(acc[:, 2:], prev[:, :-2]), acc[:, 2:])
        alpha[t] = acc + emit[t]

    beta = np.full((t_max, n, s_max), NEG_INF)
    last = lengths - 1
    ar = np.arange(n)
    beta[last, ar, s_len - 1] = 0.0
    beta[last[has_label], ar[has_label], s_len[has_label] - 2] = 0.0
    for t in range(t_max - 2, -1, -1):
        nxt = beta[t + 1] + emit[t + 1]
        acc = nxt.copy()
        acc[:, :-1] = _lse(acc[:, :-1], nxt[:, 1:])
        acc[:, :-2] = np.where(skip[:, 2:], _lse(acc[:, :-2], nxt[:, 2:]), acc[:, :-2])
        live = t < last
        beta[t, live] = acc[live]

    end = alpha[last, ar]  # [U, S]
    log_z = end[ar, s_len - 1]
    log_z = np.where(has_label, _lse(log_z, end[ar, np.maximum(s_len - 2, 0)]), log_z)
    return ext, alpha, beta, log_z


def ctc_loss_batch(log_probs: Tensor, lengths, targets: list, blank: int = BLANK_ID) -> Tensor:
    """Per-utterance CTC negative log likelihood, ``[N]``.

    ``log_probs`` is ``[N, T, C]`` (log-softmax rows); frames past
    ``lengths[i]`` are ignored. Unrealisable targets give ``+inf`` and a zero
    gradient.
    """
    if log_probs.ndim != 3:
        raise DimensionError(f"expected [N, T, C] log-probs, got {log_probs.shape}")
    lengths = np.asarray(lengths, dtype=np.int64)
    if len(lengths) != log_probs.shape[0] or len(targets) != log_probs.shape[0]:
        raise DimensionError("lengths/targets do not match the batch")
    if (lengths < 1).any() or (lengths > log_probs.shape[1]).any():
        raise ContractError("frame lengths must lie in [1, T]")
    targets = [np.asarray(y, dtype=np.int64) for y in targets]
    lp = log_probs.data.astype(np.float64)
    ext, alpha, beta, log_z = _ctc_tables(lp, lengths, targets, blank)
    loss = -log_z

    def fn(g):
        n, t_max, c = lp.shape
        grad = np.zeros((n, t_max, c))
        ok = np.isfinite(log_z)
        with np.errstate(invalid="ignore"):
            occ = np.exp(alpha + beta - log_z[None, :, None])  # [T, U, S]
        occ[:, ~ok] = 0.0
        occ = np.nan_to_num(occ, nan=0.0)
        for u in np.nonzero(ok)[0]:
            np.add.at(grad[u].T, ext[u], occ[:, u, :].T)
            grad[u, lengths[u]:] = 0.0
        grad *= -np.where(ok, g, 0.0)[:, None, None]
        return (grad.astype(log_probs.dtype),)

    return T._result(loss.astype(log_probs.dtype), (log_probs,), fn)


def ctc_loss(log_probs: Tensor, target, blank: int = BLANK_ID) -> Tensor:
    """CTC negative log likelihood of ``target`` under ``[T, C]`` log-probs."""
    if log_probs.ndim != 2:
        raise DimensionError(f"expected [T, C] log-probs, got {log_probs.shape}")
    batched = T.reshape(log_probs, (1,) + log_probs.shape)
    return T.reshape(ctc_loss_batch(batched, [log_probs.shape[0]], [target], blank), ())


def _collapse(path, blank: int) -> tuple[int, ...]:
    out = []
    prev = None
    for p in path:
        if p != prev and p != blank:
            out.append(p)
        prev = p
    return tuple(out)


def ctc_brute_force(log_probs, target, blank: int | None = None) -> float:
    """Enumerate every frame labelling and sum those collapsing to ``target``."""
    lp = np.asarray(log_probs.data if isinstance(log_probs, Tensor) else log_probs, dtype=np.float64)
    t_len, classes = lp.shape
    if t_len > 8 or classes > 5:
        raise ContractError("brute force limited to T <= 8 and at most 4 labels plus blank")
    if blank is None:
        blank = classes - 1
    target = tuple(int(x) for x in target)
    scores = [
        sum(lp[t, p] for t, p in enumerate(path))
        for path in itertools.product(range(classes), repeat=t_len)
        if _collapse(path, blank) == target
    ]
    if not scores:
        return float("inf")
    return float(-np.logaddexp.reduce(np.array(scores)))


# -- attention cross-entropy -----------------------------------------------

def attention_ce_loss(logits: Tensor, targets, loss_mask=None, label_smoothing: float = 0.0) -> Tensor:
    """Mean NLL over positions where ``loss_mask`` is true."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise DimensionError(f"logits {logits.shape} do not match targets {targets.shape}")
    mask = np.ones(targets.shape, dtype=bool) if loss_mask is None else np.asarray(loss_mask, dtype=bool)
    if not mask.any():
        raise ContractError("loss mask selects no positions")
    logp = T.log_softmax(logits, axis=-1)
    weights = np.zeros(logits.shape, dtype=logits.dtype)
    idx = np.nonzero(mask)
    v = logits.shape[-1]
    weights[idx + (targets[idx],)] = 1.0 - label_smoothing
    if label_smoothing:
        weights[idx] += label_smoothing / v
    return -T.tsum(logp * weights) * (1.0 / mask.sum())


# -- hybrid -----------------------------------------------------------------

@dataclass
class HybridLossConfig:
    ctc_weight: float = 0.2
    blank_id: int = BLANK_ID
    label_smoothing: float = 0.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.ctc_weight <= 1.0:
            raise ContractError("ctc_weight must lie in [0, 1]")


@dataclass
class LossStats:
    total: float = 0.0
    ctc: float = 0.0
    attention: float = 0.0
    skipped_ctc: int = 0
    extra: dict = field(default_factory=dict)


def ctc_log_probs(params, encoded) -> Tensor:
    from . import layers as L

    return T.log_softmax(L.dense(params, "ctc", encoded.outputs), axis=-1)


def hybrid_loss(ctc_logp: Tensor, encoded_lengths, ctc_targets: list, logits: Tensor, doc_targets,
                loss_mask, config: HybridLossConfig, ctc_utterance_mask=None
                ) -> tuple[Tensor, LossStats]:
    """``ctc_weight * mean_utterance_ctc + (1 - ctc_weight) * attention_ce``.

    Unrealisable CTC targets are skipped and counted in ``LossStats``.
    ``ctc_utterance_mask`` restricts the CTC average to selected utterances.
    """
    lam = config.ctc_weight
    stats = LossStats()
    total = None
    if lam < 1.0:
        att = attention_ce_loss(logits, doc_targets, loss_mask, config.label_smoothing)
        stats.attention = float(att.data)
        total = att * (1.0 - lam)
    if lam > 0.0:
        per_utt = ctc_loss_batch(ctc_logp, encoded_lengths, ctc_targets, config.blank_id)
        finite = np.isfinite(per_utt.data)
        keep = finite.copy()
        if ctc_utterance_mask is not None:
            keep &= np.asarray(ctc_utterance_mask, dtype=bool)
        stats.skipped_ctc = int((~finite).sum())
        if keep.any():
            w = np.where(keep, 1.0 / keep.sum(), 0.0).astype(per_utt.dtype)
            ctc = T.tsum(_mask_inf(per_utt, keep) * w)
            stats.ctc = float(ctc.data)
            total = ctc * lam if total is None else total + ctc * lam
    if total is None:
        raise ContractError("no loss term could be computed")
    stats.total = float(total.data)
    return total, stats


def _mask_inf(x: Tensor, keep: np.ndarray) -> Tensor:
    out = np.where(keep, x.data, 0.0).astype(x.dtype)
    return T._result(out, (x,), lambda g: (np.where(keep, g, 0.0),))


# -- prefix scoring ---------------------------------------------------------

@dataclass
class CtcPrefixState:
    """Prefix log-probabilities over the frames of one utterance.

    ``r_nonblank[t]`` / ``r_blank[t]`` are the log probabilities that the first
    ``t+1`` frames produce the prefix ending in a label / a blank; ``score`` is
    the log prefix probability accumulated so far.
    """

    r_nonblank: np.ndarray
    r_blank: np.ndarray
    score: float = 0.0
    last: int = -1

    @classmethod
    def initial(cls, log_probs: np.ndarray, blank: int = BLANK_ID) -> CtcPrefixState:
        lp = np.asarray(log_probs, dtype=np.float64)
        return cls(np.full(lp.shape[0], NEG_INF), np.cumsum(lp[:, blank]), 0.0, -1)


def ctc_prefix_extend(log_probs: np.ndarray, r_n: np.ndarray, r_b: np.ndarray, last: np.ndarray,
                      candidates: np.ndarray, blank: int = BLANK_ID, eou: int = EOU_ID):
    """Vectorised prefix recursion.

    ``r_n``/``r_b`` are ``[H, T]`` for ``H`` hypotheses, ``last`` is ``[H]`` and
    ``candidates`` is ``[C]``. Returns prefix log-probs ``[H, C]`` and the new
    ``r_n``, ``r_b`` tables ``[H, C, T]``. For ``eou`` the prefix score is the
    probability of the hypothesis as a complete sequence.
    """
    lp = np.asarray(log_probs, dtype=np.float64)
    t_len = lp.shape[0]
    h = r_n.shape[0]
    cand = np.asarray(candidates, dtype=np.int64)
    x = lp[:, np.where(cand == eou, blank, cand)].T[None]  # [1, C, T]
    same = last[:, None] == cand[None, :]  # [H, C]
    total_g = _lse(r_n, r_b)  # [H, T]
    phi = np.where(same[:, :, None], r_b[:, None, :], total_g[:, None, :])  # [H, C, T]
    new_n = np.full((h, len(cand), t_len), NEG_INF)
    new_b = np.full((h, len(cand), t_len), NEG_INF)
    start = (last < 0)[:, None]  # empty prefix may start emitting at frame 0
    new_n[:, :, 0] = np.where(start, x[:, :, 0], NEG_INF)
    for t in range(1, t_len):
        new_n[:, :, t] = _lse(new_n[:, :, t - 1], phi[:, :, t - 1]) + x[:, :, t]
        new_b[:, :, t] = _lse(new_b[:, :, t - 1], new_n[:, :, t - 1]) + lp[t, blank]
    terms = np.concatenate([new_n[:, :, :1], phi[:, :, :-1] + x[:, :, 1:]], axis=2)
    with np.errstate(invalid="ignore"):
        psi = np.logaddexp.reduce(terms, axis=2)
    psi = np.where(np.isnan(psi), NEG_INF, psi)
    is_eou = cand == eou
    if is_eou.any():
        psi[:, is_eou] = total_g[:, -1][:, None]
    return psi, new_n, new_b


def ctc_prefix_score(state: CtcPrefixState, next_token: int, log_probs: np.ndarray,
                     blank: int = BLANK_ID, eou: int = EOU_ID) -> tuple[float, CtcPrefixState]:
    """Score one extension; returns (log-prob delta, extended state)."""
    psi, rn, rb = ctc_prefix_extend(log_probs, state.r_nonblank[None], state.r_blank[None],
                                    np.array([state.last]), np.array([next_token]), blank, eou)
    score = float(psi[0, 0])
    delta = score - state.score if np.isfinite(score) else NEG_INF
    return delta, CtcPrefixState(rn[0, 0], rb[0, 0], score, int(next_token))
