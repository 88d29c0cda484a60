"""Prototype-conditioned augmenters: densities, sampling, score gradients."""

import numpy as np
import pytest

from s2sdm.errors import UsageError
from s2sdm.numcore import (
    ParamStore,
    RngStream,
    add_stores,
    eval_with_grad,
    fd_check,
    log,
    mul,
    scale_store,
    sum_all,
    sum_nodes,
)
from s2sdm.augmenter import (
    LAMBDA_FLOOR,
    ContAugConfig,
    ContinuousAugmenter,
    DiscreteAugmenter,
    pretrain_self_reconstruction,
)
from s2sdm.oracle import EnumSpace, distribution_table, gauss_hermite_log_norm
from s2sdm.seqmodel import EOS, SeqModelConfig, TokenSeq, VecSeq, Vocab


def disc_aug(seed=0, n_content=3, hidden=8, embed=5, slack=4):
    cfg = SeqModelConfig(Vocab.make(n_content), hidden=hidden, embed=embed)
    return DiscreteAugmenter.init(cfg, RngStream(seed), rollout_slack=slack)


def cont_aug(seed=0, dim=2, hidden=6, mlp=5):
    return ContinuousAugmenter.init(ContAugConfig(dim, hidden, mlp), RngStream(seed))


def conditioned(aug, seed):
    """Replace weights with uniform(-1, 1) so no gradient coordinate is
    stuck at the finite-difference noise floor."""
    rng = RngStream(seed, (99,))
    store = ParamStore()
    for name, arr in aug.params.items():
        store.add(name, rng.uniform(arr.shape) * 2.0 - 1.0)
    aug.params = store
    return aug


# ---------------------------------------------------------------------------
# discrete augmenter


def test_discrete_mass_sums_to_one():
    aug = disc_aug(seed=1, n_content=3)
    space = EnumSpace(aug.config.vocab, 3)
    table = distribution_table(aug, TokenSeq((3, 5)), space)
    assert abs(table.total_mass - 1.0) < 1e-9


def test_discrete_prototype_validation():
    aug = disc_aug()
    sample = TokenSeq((3,))
    for bad in (TokenSeq(()), TokenSeq((3, 4), False), "w0 w1"):
        with pytest.raises(UsageError):
            aug.log_prob(bad, sample)
        with pytest.raises(UsageError):
            aug.sample(bad, RngStream(0))
    with pytest.raises(UsageError):
        aug.grad_log_prob(TokenSeq((3,)), TokenSeq((4,), False))
    with pytest.raises(UsageError):
        DiscreteAugmenter(aug.model, rollout_slack=0)


def test_discrete_rollout_cap_tracks_prototype():
    aug = disc_aug(seed=2)
    proto = TokenSeq((3, 4, 3))
    assert aug.cap_for(proto) == 7
    aug.params["head_b"][EOS] = -60.0  # suppress termination
    seq, _ = aug.sample(proto, RngStream(1, (1,)))
    assert not seq.terminated
    assert len(seq) == 7


def test_discrete_sample_replay_and_scorer_consistency():
    aug = disc_aug(seed=3)
    proto = TokenSeq((4, 3))
    a = aug.sample(proto, RngStream(5, (2,)))
    b = aug.sample(proto, RngStream(5, (2,)))
    assert a == b
    seq, logp = a
    assert logp == aug.seq_log_prob(proto, seq)


def test_discrete_forced_eos_gives_empty_certain_sample():
    aug = disc_aug(seed=4)
    aug.params["head_w"][:] = 0.0
    aug.params["head_b"][:] = 0.0
    aug.params["head_b"][EOS] = 800.0
    seq, logp = aug.sample(TokenSeq((3,)), RngStream(0, (3,)))
    assert seq == TokenSeq((), True)
    assert logp == 0.0
    assert aug.log_prob(TokenSeq((3,)), seq) == 0.0


def test_discrete_first_token_frequencies_match_head():
    aug = disc_aug(seed=5)
    proto = TokenSeq((3, 4))
    head = aug.model.step_distribution(proto, ())
    n = 100_000
    counts = np.zeros(aug.config.vocab.size)
    for seq, _ in aug.sample_n(proto, RngStream(6, (4,)), n, max_len=1):
        counts[seq.ids[0] if seq.ids else EOS] += 1
    tv = 0.5 * np.abs(counts / n - head).sum()
    assert tv <= 0.01


def test_discrete_one_hot_head_has_exactly_zero_score():
    aug = disc_aug(seed=6, n_content=2)
    aug.params["head_w"][:] = 0.0
    aug.params["head_b"][:] = 0.0
    aug.params["head_b"][3] = 800.0  # softmax underflows to a strict one-hot
    proto = TokenSeq((4,))
    capped = TokenSeq((3,) * aug.cap_for(proto), False)
    value, grads = eval_with_grad(
        lambda p: aug.log_prob_node(p, proto, capped), aug.params
    )
    assert value == 0.0
    for name in grads.names():
        assert np.count_nonzero(grads[name]) == 0, name


def test_discrete_grad_matches_finite_differences():
    aug = conditioned(disc_aug(seed=7, n_content=2, hidden=6, embed=4), seed=7)
    proto = TokenSeq((3, 4))
    sample = TokenSeq((4, 3))
    report = fd_check(
        lambda p: aug.log_prob_node(p, proto, sample), aug.params, 1e-5
    )
    assert report.max_rel_err <= 1e-6, report.worst_coord()
    grads = aug.grad_log_prob(proto, sample)
    _, taped = eval_with_grad(
        lambda p: aug.log_prob_node(p, proto, sample), aug.params
    )
    for name in grads.names():
        assert np.array_equal(grads[name], taped[name])


def test_discrete_score_has_zero_mean_over_enumeration():
    aug = disc_aug(seed=8, n_content=2, hidden=6, embed=4, slack=3)
    proto = TokenSeq((3,))
    space = EnumSpace(aug.config.vocab, aug.cap_for(proto))
    table = distribution_table(aug, proto, space)
    mean = None
    for seq in space.atoms():
        _, g = eval_with_grad(
            lambda p: aug.log_prob_node(p, proto, seq), aug.params
        )
        weighted = scale_store(g, float(np.exp(table.log_prob_of(seq))))
        mean = weighted if mean is None else add_stores(mean, weighted)
    worst = max(float(np.max(np.abs(mean[n]))) for n in mean.names())
    assert worst <= 1e-8


def test_discrete_pretraining_reconstructs_prototype():
    aug = disc_aug(seed=9, n_content=4, hidden=8, embed=5)
    proto = TokenSeq((3, 5, 4))

    before = aug.params.copy()
    pretrain_self_reconstruction(aug, [proto], 0, 0.5)
    assert all(np.array_equal(before[n], aug.params[n]) for n in before.names())

    losses = []
    for _ in range(240):
        losses.append(-aug.log_prob(proto, proto))
        pretrain_self_reconstruction(aug, [proto], 1, 1.0)
    losses.append(-aug.log_prob(proto, proto))

    assert np.exp(aug.log_prob(proto, proto)) > 0.9
    smooth = np.convolve(losses, np.ones(5) / 5.0, mode="valid")
    assert np.all(np.diff(smooth) <= 1e-9)

    with pytest.raises(UsageError):
        pretrain_self_reconstruction(aug, [], 1, 0.5)
    with pytest.raises(UsageError):
        pretrain_self_reconstruction(aug, [proto], -1, 0.5)


# ---------------------------------------------------------------------------
# continuous augmenter


def test_continuous_zero_noise_is_identity_with_log_det_density():
    ca = cont_aug(seed=10)
    proto = VecSeq(np.array([[0.5, -1.0], [2.0, 0.25], [-0.3, 0.8]]))
    sample, logp = ca.from_noise(proto, VecSeq(np.zeros((3, 2))))
    assert np.array_equal(sample.vectors, proto.vectors)
    lam = ca.scales(proto, proto)
    want = -np.sum(np.log(lam)) - 0.5 * lam.size * np.log(2.0 * np.pi)
    assert abs(logp - want) < 1e-12


def test_continuous_zero_noise_score_is_log_det_gradient():
    ca = cont_aug(seed=11, dim=1)
    proto = VecSeq(np.array([[0.4], [-0.2]]))
    g_full = ca.grad_log_prob(proto, proto)

    def neg_log_det(p):
        lams = ca._scale_nodes(p, proto.vectors, np.zeros_like(proto.vectors))
        return mul(sum_nodes([sum_all(log(lam)) for lam in lams]), -1.0)

    _, g_ld = eval_with_grad(neg_log_det, ca.params)
    for name in g_full.names():
        np.testing.assert_allclose(g_full[name], g_ld[name], atol=1e-12)


def test_continuous_unit_scale_standard_normal_value():
    ca = cont_aug(seed=12, dim=1)
    ca.params["mlp_w2"][:] = 0.0
    ca.params["mlp_b2"][:] = np.log(np.expm1(1.0 - LAMBDA_FLOOR))
    proto = VecSeq(np.array([[0.0]]))
    sample = VecSeq(np.array([[1.0]]))
    assert abs(ca.scales(proto, sample)[0, 0] - 1.0) < 1e-12
    want = -0.5 * np.log(2.0 * np.pi) - 0.5
    assert abs(ca.log_prob(proto, sample) - want) < 1e-12


def test_continuous_density_integrates_to_one():
    ca = cont_aug(seed=13, dim=1, hidden=5, mlp=4)
    proto = VecSeq(np.array([[0.7]]))
    lam = float(ca.scales(proto, proto)[0, 0])
    mass = gauss_hermite_log_norm(
        lambda x: ca.log_prob(proto, VecSeq(np.array([[x]]))), 0.7, lam, 64
    )
    assert abs(mass - 1.0) < 1e-8


def test_continuous_sampling_consistency():
    ca = cont_aug(seed=14)
    proto = VecSeq(np.array([[0.5, -1.0], [2.0, 0.25], [-0.3, 0.8]]))
    sample, noise, logp = ca.sample(proto, RngStream(3, (5,)))
    assert logp == ca.log_prob(proto, sample)
    again, _, _ = ca.sample(proto, RngStream(3, (5,)))
    assert np.array_equal(sample.vectors, again.vectors)

    xs, ns, lps = ca.sample_many(proto, RngStream(4, (6,)), 8)
    for i in range(8):
        si, lpi = ca.from_noise(proto, VecSeq(ns[i]))
        np.testing.assert_allclose(xs[i], si.vectors, rtol=1e-12, atol=1e-14)
        assert abs(lps[i] - lpi) < 1e-9


def test_continuous_sample_std_tracks_scales():
    ca = cont_aug(seed=15, dim=2)
    proto = VecSeq(np.array([[0.3, -0.7]]))
    lam = ca.scales(proto, proto)[0]
    xs, _, _ = ca.sample_many(proto, RngStream(5, (7,)), 200_000)
    devs = xs[:, 0, :] - proto.vectors[0]
    std = devs.std(axis=0, ddof=1)
    np.testing.assert_allclose(std, lam, rtol=0.01)
    np.testing.assert_allclose(devs.mean(axis=0), 0.0, atol=4.0 * lam.max() / np.sqrt(200_000))


def test_continuous_grad_matches_finite_differences():
    for seed in (16, 17):
        ca = conditioned(cont_aug(seed=seed), seed=seed)
        proto = VecSeq(np.array([[0.5, -1.0], [2.0, 0.25]]))
        sample, _, _ = ca.sample(proto, RngStream(seed, (8,)))
        report = fd_check(
            lambda p: ca.log_prob_node(p, proto, sample), ca.params, 1e-5
        )
        assert report.max_rel_err <= 1e-6, report.worst_coord()


def test_continuous_score_zero_mean_by_quadrature():
    ca = cont_aug(seed=18, dim=1, hidden=4, mlp=3)
    proto = VecSeq(np.array([[0.2]]))
    lam = float(ca.scales(proto, proto)[0, 0])
    nodes, weights = np.polynomial.hermite.hermgauss(64)
    xs = 0.2 + np.sqrt(2.0) * lam * nodes
    mean = None
    for x, w in zip(xs, weights):
        sample = VecSeq(np.array([[x]]))
        g = ca.grad_log_prob(proto, sample)
        density = np.exp(ca.log_prob(proto, sample))
        correction = np.exp((x - 0.2) ** 2 / (2.0 * lam**2))
        factor = float(np.sqrt(2.0) * lam * w * density * correction)
        term = scale_store(g, factor)
        mean = term if mean is None else add_stores(mean, term)
    worst = max(float(np.max(np.abs(mean[n]))) for n in mean.names())
    assert worst <= 1e-8


def test_continuous_score_zero_mean_by_monte_carlo():
    ca = cont_aug(seed=19, dim=1, hidden=4, mlp=3)
    proto = VecSeq(np.array([[0.1], [-0.4]]))  # T=2 exercises the feedback
    rng = RngStream(20, (9,))
    n = 1200
    flat_names = list(ca.params.names())
    draws = np.empty((n, ca.params.n_coords()))
    for i in range(n):
        sample, _, _ = ca.sample(proto, rng)
        g = ca.grad_log_prob(proto, sample)
        draws[i] = np.concatenate([g[nm].ravel() for nm in flat_names])
    se = draws.std(axis=0, ddof=1) / np.sqrt(n)
    z = np.abs(draws.mean(axis=0)) / np.maximum(se, 1e-12)
    assert np.max(z) <= 4.0


def test_continuous_pretraining_shrinks_scales():
    ca = cont_aug(seed=21, dim=2, hidden=5, mlp=4)
    protos = [
        VecSeq(np.array([[0.5, -1.0], [2.0, 0.25]])),
        VecSeq(np.array([[1.5, 0.0], [-0.5, 0.75]])),
    ]
    lam_before = ca.scales(protos[0], protos[0]).mean()
    losses = []
    for _ in range(40):
        losses.append(
            np.mean([-ca.log_prob(x, x) for x in protos])
        )
        pretrain_self_reconstruction(ca, protos, 1, 0.2)
    losses.append(np.mean([-ca.log_prob(x, x) for x in protos]))
    smooth = np.convolve(losses, np.ones(5) / 5.0, mode="valid")
    assert np.all(np.diff(smooth) <= 1e-9)
    assert ca.scales(protos[0], protos[0]).mean() < lam_before


def test_continuous_validation():
    with pytest.raises(UsageError):
        ContAugConfig(0)
    ca = cont_aug(seed=22, dim=2)
    proto = VecSeq(np.zeros((2, 2)))
    with pytest.raises(UsageError):
        ca.log_prob(proto, VecSeq(np.zeros((3, 2))))
    with pytest.raises(UsageError):
        ca.log_prob(VecSeq(np.zeros((2, 3))), VecSeq(np.zeros((2, 3))))
    with pytest.raises(UsageError):
        ca.grad_log_prob(proto, proto, noise=VecSeq(np.zeros((1, 2))))
    with pytest.raises(UsageError):
        ca.sample_many(proto, RngStream(0), 0)
    with pytest.raises(UsageError):
        ca.log_prob(TokenSeq((3,)), TokenSeq((3,)))
