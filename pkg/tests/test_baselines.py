"""Likelihood, policy-gradient, and payoff-augmented trainers."""

import warnings
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from s2sdm.baselines import (
    RamlConfig,
    RlConfig,
    TrainerConfig,
    raml_sample,
    reinforce_grads,
    token_accuracy,
    train_mle,
    train_raml,
    train_reinforce,
)
from s2sdm.errors import UsageError
from s2sdm.numcore import RngStream
from s2sdm.oracle import EnumSpace, exact_raml_distribution
from s2sdm.rewards import bleu4
from s2sdm.seqmodel import SeqModel, SeqModelConfig, TokenSeq, Vocab

V8 = Vocab.make(8)


def toy_dataset(n_pairs=10, seed=100, max_len=5):
    """Random (source, target) pairs over V8, lengths 1..max_len."""
    rng = RngStream(seed, (0,))
    pairs = []
    for k in range(n_pairs):
        r = rng.split(k)
        ls = r.split(0).integers(1, max_len + 1)
        lt = r.split(1).integers(1, max_len + 1)
        src = TokenSeq(tuple(int(t) for t in r.split(2).integers(3, 11, ls)))
        tgt = TokenSeq(tuple(int(t) for t in r.split(3).integers(3, 11, lt)))
        pairs.append((src, tgt))
    return pairs


def fresh_model(seed=7, vocab=V8, hidden=20, embed=10, max_len=6):
    cfg = SeqModelConfig(vocab=vocab, hidden=hidden, embed=embed, max_len=max_len)
    return SeqModel.init(cfg, RngStream(seed, (0,)))


def params_equal(a, b) -> bool:
    return all(np.array_equal(a[name], b[name]) for name in a.names())


MEMORIZE = TrainerConfig(epochs=120, eta=0.8, batch_size=5,
                         anneal=0.9, anneal_every=20)


# ---------------------------------------------------------------------------
# config validation


@pytest.mark.parametrize("kwargs", [
    dict(epochs=-1, eta=0.1),
    dict(epochs=1, eta=-0.1),
    dict(epochs=1, eta=float("nan")),
    dict(epochs=1, eta=0.1, batch_size=0),
    dict(epochs=1, eta=0.1, anneal=0.0),
    dict(epochs=1, eta=0.1, anneal=1.5),
    dict(epochs=1, eta=0.1, anneal_every=0),
    dict(epochs=1, eta=0.1, patience=0),
])
def test_trainer_config_rejects_bad_values(kwargs):
    with pytest.raises(UsageError):
        TrainerConfig(**kwargs)


@pytest.mark.parametrize("kwargs", [
    dict(epochs=-1, eta=0.1),
    dict(epochs=1, eta=-1.0),
    dict(epochs=1, eta=0.1, rollout_slack=-1),
    dict(epochs=1, eta=0.1, baseline_decay=1.0),
])
def test_rl_config_rejects_bad_values(kwargs):
    with pytest.raises(UsageError):
        RlConfig(**kwargs)


@pytest.mark.parametrize("kwargs", [
    dict(tau=0.0),
    dict(tau=float("inf")),
    dict(candidates_per_pair=0),
    dict(max_edit=-1),
])
def test_raml_config_rejects_bad_values(kwargs):
    with pytest.raises(UsageError):
        RamlConfig(**kwargs)


def test_eta_schedule_anneals_in_plateaus():
    cfg = TrainerConfig(epochs=10, eta=1.0, anneal=0.5, anneal_every=3)
    assert [cfg.eta_at(e) for e in range(7)] == [1.0] * 3 + [0.5] * 3 + [0.25]


# ---------------------------------------------------------------------------
# payoff sampler


def test_raml_sample_matches_exact_distribution():
    reference = TokenSeq((3, 4, 3))
    vocab = Vocab.make(2)
    cfg = RamlConfig(tau=0.8)
    rng = RngStream(40, (0,))
    n = 30_000
    counts = Counter()
    for k in range(n):
        counts[raml_sample(reference, vocab, cfg, rng.split(k)).key()] += 1
    table = exact_raml_distribution(reference, cfg, EnumSpace(vocab, 3))
    tv = 0.5 * sum(abs(counts.get(key, 0) / n - p)
                   for key, p in table.probs.items())
    assert sum(counts.values()) == n  # no draw escaped the ball
    assert tv <= 0.02


def test_raml_sample_concentrates_at_low_temperature():
    reference = TokenSeq((3, 5, 4, 3))
    cfg = RamlConfig(tau=1e-6)
    rng = RngStream(41, (0,))
    hits = sum(raml_sample(reference, V8, cfg, rng.split(k)) == reference
               for k in range(2000))
    assert hits / 2000 > 0.999


@settings(max_examples=60, deadline=None)
@given(
    ids=st.lists(st.integers(3, 10), min_size=1, max_size=6),
    max_edit=st.none() | st.integers(0, 6),
    seed=st.integers(0, 2**31),
)
def test_raml_sample_stays_inside_the_substitution_ball(ids, max_edit, seed):
    reference = TokenSeq(tuple(ids))
    if max_edit is not None and max_edit > len(ids):
        max_edit = len(ids)
    cfg = RamlConfig(tau=0.5, max_edit=max_edit)
    sample = raml_sample(reference, V8, cfg, RngStream(seed, (0,)))
    assert sample.terminated
    assert len(sample.ids) == len(reference.ids)
    assert all(t in V8.content_ids for t in sample.ids)
    edits = sum(a != b for a, b in zip(sample.ids, reference.ids))
    assert edits <= cfg.resolved_max_edit(len(reference.ids))


def test_raml_sample_rejects_max_edit_beyond_length():
    cfg = RamlConfig(max_edit=4)
    with pytest.raises(UsageError):
        raml_sample(TokenSeq((3, 4)), V8, cfg, RngStream(1, (0,)))


def test_raml_sample_with_zero_edits_returns_the_reference():
    reference = TokenSeq((4, 6, 3))
    out = raml_sample(reference, V8, RamlConfig(max_edit=0), RngStream(2, (0,)))
    assert out == reference
    single = Vocab.make(1)  # no alternative tokens to substitute
    ref1 = TokenSeq((3, 3))
    assert raml_sample(ref1, single, RamlConfig(), RngStream(2, (0,))) == ref1


def test_raml_sample_rejects_empty_reference():
    with pytest.raises(UsageError):
        raml_sample(TokenSeq(()), V8, RamlConfig(), RngStream(1, (0,)))


# ---------------------------------------------------------------------------
# maximum likelihood


def test_train_mle_memorizes_a_small_dataset():
    pairs = toy_dataset()
    model = fresh_model()
    curve = train_mle(model, pairs, MEMORIZE, RngStream(8, (0,)))
    assert curve.shape == (120,)
    assert curve[-1] < 0.1
    assert token_accuracy(model, pairs) >= 0.99


def test_train_mle_zero_learning_rate_keeps_params():
    pairs = toy_dataset(4)
    model = fresh_model()
    before = model.params.copy()
    curve = train_mle(model, pairs,
                      TrainerConfig(epochs=3, eta=0.0), RngStream(8, (0,)))
    assert params_equal(model.params, before)
    # shuffling regroups the minibatch means, so allow summation rounding
    assert np.all(np.isfinite(curve)) and np.ptp(curve) < 1e-12


def test_train_mle_is_deterministic():
    pairs = toy_dataset(6)
    runs = []
    for _ in range(2):
        model = fresh_model(seed=9)
        curve = train_mle(model, pairs,
                          TrainerConfig(epochs=5, eta=0.3, batch_size=2),
                          RngStream(8, (0,)))
        runs.append((curve, model.params))
    assert np.array_equal(runs[0][0], runs[1][0])
    assert params_equal(runs[0][1], runs[1][1])


def test_train_mle_patience_stops_early():
    pairs = toy_dataset(4)
    model = fresh_model()
    curve = train_mle(model, pairs,
                      TrainerConfig(epochs=50, eta=0.0, patience=2),
                      RngStream(8, (0,)))
    # constant loss at eta 0 trips the stopper after patience epochs
    assert curve.shape == (3,)


def test_train_mle_rejects_bad_datasets():
    model = fresh_model()
    cfg = TrainerConfig(epochs=1, eta=0.1)
    with pytest.raises(UsageError):
        train_mle(model, [], cfg, RngStream(8, (0,)))
    capped = [(TokenSeq((3,)), TokenSeq((4,), False))]
    with pytest.raises(UsageError):
        train_mle(model, capped, cfg, RngStream(8, (0,)))


def test_token_accuracy_counts_end_marker_steps():
    pairs = toy_dataset(3)
    model = fresh_model()
    acc = token_accuracy(model, pairs)
    assert 0.0 <= acc <= 1.0


# ---------------------------------------------------------------------------
# policy gradient


def test_reinforce_grads_match_enumeration_oracle():
    """Estimator mean lands on the exact gradient of -E[BLEU].

    Per coordinate the 200-draw mean must sit within standard error of
    the finite-difference oracle; a few of the 1146 coordinates are
    allowed out to 6 SE as ordinary multiple-comparison noise.
    """
    vocab = Vocab.make(3)
    space = EnumSpace(vocab, 2)
    src, ref = TokenSeq((3,)), TokenSeq((4,))
    beta = SeqModel.init(
        SeqModelConfig(vocab=vocab, hidden=6, embed=4, max_len=2),
        RngStream(5, (0,)),
    )

    def neg_expected_bleu():
        total = 0.0
        for atom in space.atoms():
            p = float(np.exp(beta.seq_log_prob(src, atom)))
            total += p * bleu4(TokenSeq(atom.ids), ref)
        return -total

    h = 1e-5
    exact = beta.params.zeros_like()
    for name, arr in beta.params.items():
        flat, gflat = arr.ravel(), exact[name].ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = neg_expected_bleu()
            flat[i] = orig - h
            lo = neg_expected_bleu()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * h)

    rng = RngStream(31, (0,))
    draws, rewards = [], []
    for d in range(200):
        result = reinforce_grads(beta, (src, ref), rng.split(d), rollout_slack=1)
        draws.append(result.grads.flat())
        rewards.append(result.total_reward)
    draws = np.array(draws)
    se = np.maximum(draws.std(axis=0, ddof=1) / np.sqrt(len(draws)), 1e-12)
    z = np.abs(draws.mean(axis=0) - exact.flat()) / se
    assert z.max() <= 6.0
    assert (z <= 3.0).mean() >= 0.97

    reward_se = np.std(rewards, ddof=1) / np.sqrt(len(rewards))
    assert abs(np.mean(rewards) - -neg_expected_bleu()) <= 3.0 * reward_se


def test_reinforce_grads_reward_shape_is_checked():
    beta = fresh_model(max_len=4)
    pair = (TokenSeq((3,)), TokenSeq((4, 5)))
    bad = lambda sample, ref: np.zeros(len(sample.ids) + 1)
    with pytest.raises(UsageError):
        reinforce_grads(beta, pair, RngStream(77, (0,)), reward_steps_fn=bad)
    with pytest.raises(UsageError):
        reinforce_grads(beta, (TokenSeq((3,)), TokenSeq(())), RngStream(1, (0,)))


def test_reinforce_grads_baseline_cancellation_is_structural():
    """A baseline equal to every return yields exactly zero updates."""
    vocab = Vocab.make(3)
    beta = SeqModel.init(
        SeqModelConfig(vocab=vocab, hidden=6, embed=4, max_len=4),
        RngStream(5, (0,)),
    )
    pair = (TokenSeq((3,)), TokenSeq((4, 5)))
    first_step_only = lambda sample, ref: np.eye(1, len(sample.ids)).ravel()
    baselines = np.eye(1, 8).ravel()
    result = reinforce_grads(beta, pair, RngStream(77, (0,)), rollout_slack=2,
                             baselines=baselines,
                             reward_steps_fn=first_step_only)
    assert result.returns[0] == 1.0
    assert result.total_reward == 1.0
    assert all(np.all(arr == 0.0) for arr in result.grads.values())


def test_reinforce_returns_are_reward_to_go():
    beta = fresh_model(max_len=4)
    pair = (TokenSeq((3, 4)), TokenSeq((5, 6)))
    steps_fn = lambda sample, ref: np.arange(1.0, len(sample.ids) + 1)
    result = reinforce_grads(beta, pair, RngStream(3, (0,)),
                             rollout_slack=2, reward_steps_fn=steps_fn)
    n = len(result.returns)
    sample_len = n - 1 if result.returns[-1] == 0.0 else n
    if sample_len:
        expected = np.cumsum(np.arange(1.0, sample_len + 1)[::-1])[::-1]
        assert np.array_equal(result.returns[:sample_len], expected)
    assert result.total_reward == pytest.approx(sample_len * (sample_len + 1) / 2)


def test_train_reinforce_improves_a_warm_started_model():
    pairs = toy_dataset()
    model = fresh_model()
    train_mle(model, pairs,
              TrainerConfig(epochs=40, eta=0.8, batch_size=5,
                            anneal=0.9, anneal_every=20),
              RngStream(8, (0,)))
    with warnings.catch_warnings():
        warnings.simplefilter("error")  # warm start: no cold-model warning
        curve = train_reinforce(model, pairs, RlConfig(epochs=40, eta=0.05),
                                RngStream(9, (0,)))
    assert curve.shape == (40,)
    ma = np.convolve(curve, np.ones(10) / 10, mode="valid")
    assert ma[-1] > ma[0] + 0.05


def test_train_reinforce_warns_on_a_cold_model():
    pairs = [(TokenSeq((3, 4)), TokenSeq((5, 6, 7)))]
    model = fresh_model(seed=3, hidden=8, embed=5)
    with pytest.warns(RuntimeWarning, match="warm-started"):
        train_reinforce(model, pairs, RlConfig(epochs=1, eta=0.01),
                        RngStream(6, (0,)))


def test_train_reinforce_is_deterministic():
    pairs = toy_dataset(4)
    runs = []
    for _ in range(2):
        model = fresh_model(seed=9)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            curve = train_reinforce(model, pairs, RlConfig(epochs=3, eta=0.02),
                                    RngStream(9, (0,)))
        runs.append((curve, model.params))
    assert np.array_equal(runs[0][0], runs[1][0])
    assert params_equal(runs[0][1], runs[1][1])


def test_train_reinforce_zero_learning_rate_keeps_params():
    pairs = toy_dataset(3)
    model = fresh_model(seed=9)
    before = model.params.copy()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        train_reinforce(model, pairs, RlConfig(epochs=2, eta=0.0),
                        RngStream(9, (0,)))
    assert params_equal(model.params, before)


# ---------------------------------------------------------------------------
# reward-augmented likelihood


def test_train_raml_with_one_sharp_candidate_reproduces_mle():
    pairs = toy_dataset(6)
    cfg = TrainerConfig(epochs=6, eta=0.4, batch_size=2)
    mle_model = fresh_model(seed=9)
    mle_curve = train_mle(mle_model, pairs, cfg, RngStream(8, (0,)))
    raml_model = fresh_model(seed=9)
    raml_curve = train_raml(raml_model, pairs,
                            RamlConfig(tau=1e-6, candidates_per_pair=1),
                            cfg, RngStream(8, (0,)))
    assert np.array_equal(mle_curve, raml_curve)
    assert params_equal(mle_model.params, raml_model.params)


def test_train_raml_loss_decreases():
    pairs = toy_dataset()
    model = fresh_model()
    curve = train_raml(model, pairs,
                       RamlConfig(tau=0.8, candidates_per_pair=2),
                       TrainerConfig(epochs=20, eta=0.3, batch_size=5),
                       RngStream(12, (0,)))
    assert curve.shape == (20,)
    assert curve[-5:].mean() < curve[:5].mean() - 0.1


def test_train_raml_zero_learning_rate_keeps_params():
    pairs = toy_dataset(3)
    model = fresh_model(seed=9)
    before = model.params.copy()
    train_raml(model, pairs, RamlConfig(candidates_per_pair=1),
               TrainerConfig(epochs=2, eta=0.0), RngStream(12, (0,)))
    assert params_equal(model.params, before)
