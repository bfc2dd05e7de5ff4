import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sicl_aed import layers as L
from sicl_aed.decoder import (DecoderConfig, DecoderKVCache, UtteranceAssignment, batch_to_doc,
                              cross_attention_blockmask_reference, decoder_forward, doc_to_batch,
                              init_decoder, utterance_cross_attention)
from sicl_aed.encoder import EncodedBatch
from sicl_aed.errors import CapacityError, ContractError
from sicl_aed.tensor import Tensor

CFG = DecoderConfig(num_layers=2, model_dim=8, num_heads=2, ff_dim=12, max_document_tokens=64)


@pytest.fixture(scope="module")
def params():
    p = {}
    init_decoder(p, np.random.default_rng(0), CFG, np.float64)
    return p


def _encoded(rng, lengths, d=8):
    lengths = np.asarray(lengths)
    return EncodedBatch(Tensor(rng.normal(size=(len(lengths), int(lengths.max()), d))), lengths)


def _doc(rng, counts):
    tokens = rng.integers(1, CFG.vocab_size, int(sum(counts)))
    return tokens, np.repeat(np.arange(len(counts)), counts)


# -- assignment and reshaping ---------------------------------------------------

def test_assignment_from_targets():
    a = UtteranceAssignment.from_targets([5, 6, 2, 7, 2, 8, 9, 2])
    assert a.assignment.tolist() == [0, 0, 0, 1, 1, 2, 2, 2]
    assert a.utterance_token_counts.tolist() == [3, 2, 3]


def test_assignment_rejects_out_of_range():
    with pytest.raises(ContractError):
        UtteranceAssignment(np.array([0, 3]), num_utterances=2)
    with pytest.raises(ContractError):
        UtteranceAssignment(np.array([0, -1]))


@settings(max_examples=60, deadline=None)
@given(counts=st.lists(st.integers(0, 6), min_size=1, max_size=6), seed=st.integers(0, 999),
       shuffle=st.booleans())
def test_doc_batch_round_trip_is_exact(counts, seed, shuffle):
    if sum(counts) == 0:
        counts[0] = 1
    rng = np.random.default_rng(seed)
    raw = np.repeat(np.arange(len(counts)), counts)
    if shuffle:  # interleaved assignments are also supported
        raw = rng.permutation(raw)
    a = UtteranceAssignment(raw, num_utterances=len(counts))
    hidden = Tensor(rng.normal(size=(len(a), 4)))
    batched, valid = doc_to_batch(hidden, a)
    assert batched.shape == (len(counts), max(counts), 4)
    assert valid.sum(1).tolist() == list(counts)
    assert np.all(batched.data[~valid] == 0.0)
    assert np.array_equal(batch_to_doc(batched, a).data, hidden.data)


def test_doc_to_batch_keeps_order_within_utterance():
    a = UtteranceAssignment(np.array([0, 1, 0, 1, 1]))
    hidden = Tensor(np.arange(5.0)[:, None])
    batched, _ = doc_to_batch(hidden, a)
    assert batched.data[0, :2, 0].tolist() == [0.0, 2.0]
    assert batched.data[1, :3, 0].tolist() == [1.0, 3.0, 4.0]


# -- cross-attention ------------------------------------------------------------

@pytest.mark.parametrize("n", [1, 2, 4, 8])
def test_utterance_cross_attention_matches_block_mask(params, rng, n):
    lengths = rng.integers(1, 10, n)
    enc = _encoded(rng, lengths)
    counts = rng.integers(1, 6, n)
    a = UtteranceAssignment(np.repeat(np.arange(n), counts))
    hidden = Tensor(rng.normal(size=(len(a), 8)))
    batched, _ = doc_to_batch(hidden, a)
    block = batch_to_doc(utterance_cross_attention(params, "dec.0.cross", 2, batched, enc), a)
    ref = cross_attention_blockmask_reference(params, "dec.0.cross", 2, hidden, enc, a.assignment)
    np.testing.assert_allclose(block.data, ref.data, atol=1e-10, rtol=0)


def test_cross_attention_ignores_other_utterances(params, rng):
    enc = _encoded(rng, [5, 7])
    queries = Tensor(rng.normal(size=(2, 3, 8)))
    out = utterance_cross_attention(params, "dec.0.cross", 2, queries, enc).data
    enc.outputs.data[1] += 10.0
    again = utterance_cross_attention(params, "dec.0.cross", 2, queries, enc).data
    assert np.array_equal(out[0], again[0])
    assert not np.allclose(out[1], again[1])


def test_zero_length_utterance_is_rejected(params, rng):
    enc = EncodedBatch(Tensor(rng.normal(size=(2, 4, 8))), np.array([4, 0]))
    with pytest.raises(ContractError):
        utterance_cross_attention(params, "dec.0.cross", 2, Tensor(rng.normal(size=(2, 1, 8))), enc)


def test_score_counts_block_vs_full(params, rng):
    n, ly, lx = 4, 8, 8
    enc = _encoded(rng, [lx] * n)
    tokens, assign = _doc(rng, [ly] * n)
    counts = {}
    for variant in ("utterance", "blockmask"):
        with L.track_scores() as tr:
            decoder_forward(params, CFG, tokens, assign, enc, cross_attention=variant)
        counts[variant] = tr.peak["cross"] // CFG.num_heads
    assert counts == {"utterance": n * ly * lx, "blockmask": (n * ly) * (n * lx)}


# -- full decoder --------------------------------------------------------------

def test_forward_variants_agree(params, rng):
    enc = _encoded(rng, [3, 9, 5])
    tokens, assign = _doc(rng, [4, 1, 6])
    a, _ = decoder_forward(params, CFG, tokens, assign, enc)
    b, _ = decoder_forward(params, CFG, tokens, assign, enc, cross_attention="blockmask")
    np.testing.assert_allclose(a.data, b.data, atol=1e-10, rtol=0)


def test_causality(params, rng):
    enc = _encoded(rng, [6, 6])
    tokens, assign = _doc(rng, [5, 5])
    base, _ = decoder_forward(params, CFG, tokens, assign, enc)
    changed = tokens.copy()
    changed[7] = (changed[7] % 20) + 5
    other, _ = decoder_forward(params, CFG, changed, assign, enc)
    assert np.array_equal(base.data[0, :7], other.data[0, :7])
    assert not np.allclose(base.data[0, 7:], other.data[0, 7:])


def test_earlier_utterance_sees_no_later_audio(params, rng):
    enc = _encoded(rng, [6, 6])
    tokens, assign = _doc(rng, [5, 5])
    base, _ = decoder_forward(params, CFG, tokens, assign, enc)
    enc.outputs.data[1] *= -1.0
    other, _ = decoder_forward(params, CFG, tokens, assign, enc)
    assert np.array_equal(base.data[0, :5], other.data[0, :5])


def test_utterance_scope_reduces_to_independent_utterances(params, rng):
    enc = _encoded(rng, [4, 8, 6])
    counts = [3, 5, 2]
    tokens, assign = _doc(rng, counts)
    doc, _ = decoder_forward(params, CFG, tokens, assign, enc, self_scope="utterance")
    start = 0
    for i, c in enumerate(counts):
        # same absolute positions: run the earlier part first, then this utterance from the cache
        cache = None
        if start:
            _, cache = decoder_forward(params, CFG, tokens[:start], assign[:start], enc, self_scope="utterance")
        alone, _ = decoder_forward(params, CFG, tokens[start:start + c], np.full(c, i), enc, cache,
                                   self_scope="utterance")
        np.testing.assert_allclose(alone.data[0], doc.data[0, start:start + c], atol=1e-10, rtol=0)
        start += c


@settings(max_examples=15, deadline=None)
@given(split=st.integers(1, 10), seed=st.integers(0, 999))
def test_kv_cache_matches_full_forward(params, split, seed):
    rng = np.random.default_rng(seed)
    enc = _encoded(rng, [5, 7, 4])
    tokens, assign = _doc(rng, [4, 4, 3])
    full, cache_full = decoder_forward(params, CFG, tokens, assign, enc)
    first, cache = decoder_forward(params, CFG, tokens[:split], assign[:split], enc)
    second, cache = decoder_forward(params, CFG, tokens[split:], assign[split:], enc, cache)
    np.testing.assert_allclose(np.concatenate([first.data, second.data], 1), full.data, atol=1e-10, rtol=0)
    assert cache.length == cache_full.length == len(tokens)
    for a, b in zip(cache.keys, cache_full.keys):
        np.testing.assert_allclose(a, b, atol=1e-10, rtol=0)


def test_cache_select_broadcasts_single_row(params, rng):
    enc = _encoded(rng, [5])
    _, cache = decoder_forward(params, CFG, [1, 5, 6], [0, 0, 0], enc)
    wide = cache.select([0, 0, 0])
    assert wide.batch == 3 and wide.length == 3
    assert isinstance(DecoderKVCache().appended(cache.keys, cache.values, cache.assignment), DecoderKVCache)


def test_padded_document_batch_matches_single_documents(params, rng):
    enc = _encoded(rng, [5, 7, 4])
    t1, a1 = _doc(rng, [3, 4])
    t2, a2 = _doc(rng, [5])
    tokens = np.zeros((2, 7), dtype=np.int64)
    assign = np.full((2, 7), -1)
    tokens[0], assign[0] = t1, a1
    tokens[1, :5], assign[1, :5] = t2, a2 + 2
    batched, _ = decoder_forward(params, CFG, tokens, assign, enc)
    one, _ = decoder_forward(params, CFG, t1, a1, enc)
    two, _ = decoder_forward(params, CFG, t2, a2 + 2, enc)
    np.testing.assert_allclose(batched.data[0], one.data[0], atol=1e-10, rtol=0)
    np.testing.assert_allclose(batched.data[1, :5], two.data[0], atol=1e-10, rtol=0)


def test_capacity_error(params, rng):
    enc = _encoded(rng, [5])
    n = CFG.max_document_tokens + 1
    with pytest.raises(CapacityError):
        decoder_forward(params, CFG, np.ones(n, dtype=np.int64), np.zeros(n, dtype=np.int64), enc)


def test_fully_masked_row_is_a_contract_error():
    q = Tensor(np.ones((1, 1, 2, 2)))
    mask = np.full((1, 1, 2, 2), L.mask_value(np.float64))
    mask[..., 0, 0] = 0.0
    with pytest.raises(ContractError):
        L.scaled_dot_attention(q, q, q, mask)
