import string
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chisquare

from sicl_aed import vocab as V
from sicl_aed.data import Utterance
from sicl_aed.errors import ContractError
from sicl_aed.icft import (IcftConfig, apply_edit, build_icft_example, edit_distance, perturb_word,
                           replace_word, select_shared_word)

words = st.text(alphabet=string.ascii_lowercase, min_size=3, max_size=10)


def _utt(uid, text, spk="spk00"):
    return Utterance(uid, spk, np.zeros((40, 4), np.float32), text)


@settings(max_examples=200, deadline=None)
@given(word=words, seed=st.integers(0, 10**6))
def test_perturbation_is_one_or_two_edits(word, seed):
    out = perturb_word(word, np.random.default_rng(seed))
    assert out != word
    assert 1 <= edit_distance(word, out) <= 2


def test_short_word_is_rejected(rng):
    with pytest.raises(ContractError):
        perturb_word("ab", rng)


def test_apply_edit_examples():
    assert apply_edit("cat", "delete", 1) == "ct"
    assert apply_edit("cat", "substitute", 0, "b") == "bat"
    assert apply_edit("cat", "insert", 3, "s") == "cats"


@settings(max_examples=100, deadline=None)
@given(a=st.text(alphabet="abc", max_size=6), b=st.text(alphabet="abc", max_size=6))
def test_edit_distance_is_a_metric(a, b):
    assert edit_distance(a, b) == edit_distance(b, a)
    assert (edit_distance(a, b) == 0) == (a == b)
    assert edit_distance(a, b) <= max(len(a), len(b))


def test_shared_word_choice_is_uniform():
    target = "alpha bravo charlie delta ox"
    context = ["bravo ox", "alpha delta", "charlie"]
    rng = np.random.default_rng(0)
    counts = Counter(select_shared_word(target, context, rng) for _ in range(4000))
    assert set(counts) == {"alpha", "bravo", "charlie", "delta"}  # "ox" is too short
    assert chisquare(list(counts.values())).pvalue > 0.001


def test_no_shared_word():
    assert select_shared_word("alpha", ["bravo"], np.random.default_rng(0)) is None


def test_replace_word_whole_words_only():
    assert replace_word("cat concat cat", "cat", "dog") == "dog concat dog"


def _pool():
    return [_utt("u0", "one hello two"), _utt("u1", "hello three"), _utt("u2", "four"),
            _utt("u3", "hello five")]


@pytest.mark.parametrize("rewrite", [True, False])
def test_example_structure(rewrite):
    cfg = IcftConfig(context_size=3, rewrite_context=rewrite)
    ex = build_icft_example(_pool(), np.random.default_rng(3), cfg)
    assert len(ex.context) == 3
    # only the target (the last utterance) carries loss
    assign = ex.document.assignment[0]
    assert np.array_equal(ex.loss_mask, assign == 3)
    assert ex.document.ctc_mask.tolist() == [False, False, False, True]
    # context utterances keep their original transcriptions
    originals = {u.id: u.transcription for u in _pool()}
    assert all(u.transcription == originals[u.id] for u in ex.context)
    if ex.modified_word is not None:
        old, new = ex.modified_word
        assert new in ex.target.transcription.split()
        assert old not in ex.target.transcription.split()
        context_texts = _document_texts(ex)[:-1]
        assert any(new in t.split() for t in context_texts) == rewrite


def _document_texts(ex):
    targets = ex.document.targets[0].tolist()
    texts, cur = [], []
    for t in targets:
        if t == V.EOU_ID:
            texts.append(V.decode_ids(cur))
            cur = []
        else:
            cur.append(t)
    return texts


def test_rewrite_context_changes_document_targets():
    pool = [_utt("a", "hello"), _utt("b", "hello")]
    ex = build_icft_example(pool, np.random.default_rng(0), IcftConfig(context_size=1, rewrite_context=True))
    old, new = ex.modified_word
    assert _document_texts(ex) == [new, new]
    kept = build_icft_example(pool, np.random.default_rng(0), IcftConfig(context_size=1, rewrite_context=False))
    assert _document_texts(kept) == [old, new]


def test_mixed_speaker_pool_is_rejected():
    pool = [_utt("a", "hello"), _utt("b", "hello", spk="spk01")]
    with pytest.raises(ContractError):
        build_icft_example(pool, np.random.default_rng(0), IcftConfig(context_size=1))


def test_context_positions_get_zero_gradient(tiny_model):
    from sicl_aed.objectives import attention_ce_loss
    from sicl_aed.tensor import Tape, Tensor

    pool = [Utterance(f"u{i}", "spk00", np.random.default_rng(i).normal(size=(30, 16)), t)
            for i, t in enumerate(["hello one", "two hello", "hello three", "four hello"])]
    ex = build_icft_example(pool, np.random.default_rng(1))
    doc = ex.document
    enc = tiny_model.encode_padded(doc.features, doc.frame_lengths)
    logits, _ = tiny_model.decode_step(doc.tokens, doc.assignment, enc)
    leaf = Tensor(logits.data, requires_grad=True)
    with Tape() as tape:
        tape.backward(attention_ce_loss(leaf, doc.targets, doc.loss_mask))
    context = doc.assignment[0] < len(ex.context)
    assert np.all(leaf.grad[0, context] == 0.0)
    assert np.any(leaf.grad[0, ~context] != 0.0)


def test_examples_are_deterministic():
    a = build_icft_example(_pool(), np.random.default_rng(9))
    b = build_icft_example(_pool(), np.random.default_rng(9))
    assert a.modified_word == b.modified_word
    assert np.array_equal(a.document.targets, b.document.targets)


def test_ctc_target_keeps_original_spelling():
    pool = [_utt("a", "hello there"), _utt("b", "hello")]
    ex = build_icft_example(pool, np.random.default_rng(0), IcftConfig(context_size=1))
    old, new = ex.modified_word
    assert ex.document.ctc_mask.tolist() == [False, True]
    assert V.decode_ids(ex.document.ctc_targets[-1].tolist()) == ex.target.transcription.replace(new, old)
    assert new in ex.target.transcription.split()


def test_context_includes_a_sharing_utterance():
    pool = [_utt(f"u{i}", f"filler{i}") for i in range(8)] + [_utt("s", "zebra one"), _utt("t", "zebra two")]
    cfg = IcftConfig(context_size=2)
    for seed in range(20):
        ex = build_icft_example(pool, np.random.default_rng(seed), cfg)
        if ex.target.id in ("s", "t"):
            assert ex.modified_word is not None and ex.modified_word[0] == "zebra"
    off = IcftConfig(context_size=2, ensure_shared=False)
    misses = sum(build_icft_example(pool, np.random.default_rng(s), off).modified_word is None for s in range(40))
    assert misses > 0
