"""Vocabulary, token sequences, softmax, and the forward-pass contract."""

import mpmath
import numpy as np
import pytest

from specjudge.lm import DataError, TokenSequence, Vocab, argmax_token, softmax
from specjudge.toymodels import train_ngram


def small_vocab():
    return Vocab(("a", "b", "c", "</s>"), eos_id=3)


def tiny_model():
    v = small_vocab()
    corpus = [[0, 1, 2, 3], [0, 1, 1, 3], [0, 2, 2, 3]]
    return train_ngram(v, corpus, order=3, smoothing=0.5)


def test_vocab_rejects_bad_shapes():
    with pytest.raises(DataError):
        Vocab(("only",), eos_id=0)
    with pytest.raises(DataError):
        Vocab(("a", "b"), eos_id=2)
    with pytest.raises(DataError):
        Vocab(("a", "a", "b"), eos_id=0)


def test_vocab_encode_decode_round_trip():
    v = small_vocab()
    ids = v.encode("b a c </s>")
    assert ids == [1, 0, 2, 3]
    assert v.decode(ids) == "b a c </s>"
    with pytest.raises(DataError):
        v.encode("a z")


def test_token_sequence_boundary():
    seq = TokenSequence((1, 2, 3, 0), prompt_len=2)
    assert len(seq) == 4
    assert seq.prompt == (1, 2)
    assert seq.response == (3, 0)
    ext = seq.with_response((0, 3))
    assert ext.tokens == (1, 2, 0, 3) and ext.prompt_len == 2
    with pytest.raises(DataError):
        TokenSequence((1, 2), prompt_len=3)


def test_softmax_matches_high_precision_oracle():
    rng = np.random.default_rng(0)
    for _ in range(20):
        logits = rng.normal(size=5) * rng.uniform(0.5, 4.0)
        temp = rng.uniform(0.3, 3.0)
        got = softmax(logits, temp)
        exact = [mpmath.exp(mpmath.mpf(z) / mpmath.mpf(temp)) for z in logits]
        total = mpmath.fsum(exact)
        want = np.array([float(e / total) for e in exact])
        np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-15)
        assert abs(got.sum() - 1.0) < 1e-12


def test_softmax_shift_invariance():
    logits = np.random.default_rng(1).normal(size=8)
    np.testing.assert_allclose(softmax(logits + 123.0), softmax(logits),
                               rtol=0, atol=1e-12)


def test_softmax_rejects_bad_inputs():
    with pytest.raises(ValueError):
        softmax([0.0, np.inf])
    with pytest.raises(ValueError):
        softmax([0.0, 1.0], temperature=0.0)
    with pytest.raises(ValueError):
        softmax([0.0, 1.0], temperature=-1.0)


def test_argmax_breaks_ties_toward_lowest_id():
    assert argmax_token([1.0, 3.0, 3.0, 0.0]) == 1
    assert argmax_token([2.0, 2.0]) == 0


def test_forward_parallel_matches_sequential():
    model = tiny_model()
    tokens = (0, 1, 2, 1, 3)
    out = model.forward_parallel(tokens)
    for i in range(len(tokens)):
        logits, hidden = model.next_logits_hidden(tokens[: i + 1])
        np.testing.assert_array_equal(out.logits[i], logits)
        np.testing.assert_array_equal(out.hidden[i], hidden)


def test_forward_rows_ignore_later_tokens():
    model = tiny_model()
    a = model.forward_parallel((0, 1, 2, 1))
    b = model.forward_parallel((0, 1, 2, 2))  # same prefix, different tail
    np.testing.assert_array_equal(a.logits[:3], b.logits[:3])
    np.testing.assert_array_equal(a.hidden[:3], b.hidden[:3])


def test_greedy_next_is_argmax_of_logits():
    model = tiny_model()
    logits, _ = model.next_logits_hidden((0, 1))
    assert model.greedy_next((0, 1)) == argmax_token(logits)


def test_token_range_checked():
    model = tiny_model()
    with pytest.raises(DataError):
        model.forward_parallel((0, 9))
    with pytest.raises(DataError):
        model.greedy_next(())
