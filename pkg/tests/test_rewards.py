"""BLEU, edit distance, and continuous similarity reward properties."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from s2sdm.errors import UsageError
from s2sdm.rewards import bleu4, cont_sim, delta_bleu_steps, edit_distance
from s2sdm.seqmodel import TokenSeq, VecSeq

# content ids for a 5-symbol alphabet: a..e -> 3..7
A, B, C, D, E = 3, 4, 5, 6, 7

seqs = st.lists(st.integers(3, 6), max_size=6).map(lambda ids: TokenSeq(tuple(ids)))


# ---------------------------------------------------------------------------
# bleu4


def test_bleu_hand_computed_value():
    """[a b c d] vs [a b c e], precisions worked out by hand.

    1-grams: a, b, c match            -> 3/4 (unsmoothed)
    2-grams: ab, bc match, cd misses  -> (2+1)/(3+1)
    3-grams: abc matches, bcd misses  -> (1+1)/(2+1)
    4-grams: abcd misses              -> (0+1)/(1+1)
    equal lengths, no brevity penalty.
    """
    got = bleu4(TokenSeq((A, B, C, D)), TokenSeq((A, B, C, E)))
    want = (3 / 4 * 3 / 4 * 2 / 3 * 1 / 2) ** 0.25
    assert got == pytest.approx(want, rel=1e-12)


def test_bleu_identity_is_one():
    for ids in ((A, B, C, D), (A, B, C, D, E, A), (A,)):
        assert bleu4(TokenSeq(ids), TokenSeq(ids)) == 1.0


def test_bleu_disjoint_vocab_scores_zero():
    got = bleu4(TokenSeq((A, B, C, D)), TokenSeq((E, E, E, E)))
    assert got == 0.0
    assert got < 0.05


def test_bleu_brevity_penalty_exact():
    # all clipped precisions are 1, so only the penalty remains
    got = bleu4(TokenSeq((A, B)), TokenSeq((A, B, C, D)))
    assert got == pytest.approx(np.exp(1.0 - 4.0 / 2.0), rel=1e-12)


def test_bleu_long_candidate_not_penalized():
    short = bleu4(TokenSeq((A, B)), TokenSeq((A, B, C, D)))
    longer = bleu4(TokenSeq((A, B, C, D, E)), TokenSeq((A, B, C, D)))
    assert longer > short


def test_bleu_empty_cases():
    assert bleu4(TokenSeq(()), TokenSeq((A,))) == 0.0
    with pytest.raises(UsageError):
        bleu4(TokenSeq((A,)), TokenSeq(()))


@given(seqs, seqs)
def test_bleu_bounded_and_identity(cand, ref):
    if not ref.ids:
        return
    score = bleu4(cand, ref)
    assert 0.0 <= score <= 1.0
    if cand.ids:
        assert bleu4(cand, cand) == 1.0


# ---------------------------------------------------------------------------
# edit distance


def test_edit_distance_hand_cases():
    assert edit_distance(TokenSeq((A, B, C)), TokenSeq((A, E, C, D))) == 2
    assert edit_distance(TokenSeq(()), TokenSeq((A, B))) == 2
    assert edit_distance(TokenSeq((A, B)), TokenSeq((A, B))) == 0
    assert edit_distance(TokenSeq((A, B, C)), TokenSeq((C, B, A))) == 2


@settings(max_examples=60)
@given(seqs, seqs, seqs)
def test_edit_distance_metric_axioms(a, b, c):
    dab = edit_distance(a, b)
    assert dab >= 0
    assert dab == edit_distance(b, a)
    assert (dab == 0) == (a.ids == b.ids)
    assert dab <= max(len(a.ids), len(b.ids))
    assert edit_distance(a, c) <= dab + edit_distance(b, c)


# ---------------------------------------------------------------------------
# stepwise decomposition


def test_delta_steps_telescope_to_sentence_score():
    cand, ref = TokenSeq((A, B, C, D)), TokenSeq((A, B, C, E))
    steps = delta_bleu_steps(cand, ref)
    assert steps.shape == (4,)
    assert steps.sum() == pytest.approx(bleu4(cand, ref), abs=1e-12)


def test_delta_steps_first_entry_is_single_token_score():
    cand, ref = TokenSeq((A, B)), TokenSeq((A, B, C, D))
    steps = delta_bleu_steps(cand, ref)
    assert steps[0] == bleu4(TokenSeq((A,)), ref)


def test_delta_steps_require_terminated_candidate():
    with pytest.raises(UsageError):
        delta_bleu_steps(TokenSeq((A, B), False), TokenSeq((A,)))


@settings(max_examples=40)
@given(seqs, seqs)
def test_delta_steps_telescope_property(cand, ref):
    if not ref.ids:
        return
    steps = delta_bleu_steps(cand, ref)
    assert len(steps) == len(cand.ids)
    assert steps.sum() == pytest.approx(bleu4(cand, ref), abs=1e-12)


# ---------------------------------------------------------------------------
# continuous similarity


def test_cont_sim_zero_at_identity():
    v = VecSeq(np.arange(6.0).reshape(3, 2))
    assert cont_sim(v, v) == 0.0


def test_cont_sim_hand_value():
    proto = VecSeq(np.zeros((2, 2)))
    sample = VecSeq(np.array([[1.0, 2.0], [3.0, 4.0]]))
    assert cont_sim(sample, proto) == -7.5  # -(1+4+9+16)/4


def test_cont_sim_shape_mismatch_raises():
    with pytest.raises(UsageError):
        cont_sim(VecSeq(np.zeros((2, 2))), VecSeq(np.zeros((3, 2))))
    with pytest.raises(UsageError):
        cont_sim(VecSeq(np.zeros((2, 2))), TokenSeq((A,)))
