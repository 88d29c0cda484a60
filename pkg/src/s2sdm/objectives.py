"""Monte Carlo training signals for distribution matching with augmenters.

Three parameter groups cooperate: a target-side augmenter q_gamma(y|y*), a
source-side augmenter q_theta(x|x*), and a seq2seq model p_beta(y|x).  The
objective being maximized on a pair (x*, y*) is

    J = -KL(q_gamma(.|y*) || m(.|x*)) + kappa * H(q_theta(.|x*))

where m(y|x*) = E_{x~q_theta}[p_beta(y|x)] is the transformed-source
marginal and kappa is the entropy weight.  Every estimator here returns
gradients of -J (descent directions), so ``sgd_step`` moves each group the
right way without sign juggling at call sites.

With N samples x_j ~ q_theta and y_i ~ q_gamma, the score-function
estimators (terms with zero expectation dropped) are

    d(-J)/dgamma ~= (1/N) sum_i [log q_gamma(y_i) - log m^(y_i)] dlog q_gamma(y_i)
    d(-J)/dtheta ~= (1/N) sum_j [kappa log q_theta(x_j) - (1/N) sum_i w_ij] dlog q_theta(x_j)
    d(-J)/dbeta  ~= -(1/N^2) sum_ij w_ij dlog p_beta(y_i|x_j)

with w_ij = p_beta(y_i|x_j) / m^(y_i) and the plug-in marginal
m^(y) = (1/N) sum_j p_beta(y|x_j), clamped below at MARGINAL_FLOOR (the
clamp count is reported, never hidden).  Duplicate samples are grouped
before any tape work, so sharp augmenters cost far fewer sequence scorings
and point-mass degenerations stay exact to the bit.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import NumericalError, UsageError
from .numcore import (
    ParamStore,
    RngStream,
    Tape,
    add_stores,
    mul,
    sgd_step,
    sum_nodes,
)

MARGINAL_FLOOR = 1e-30
LOG_MARGINAL_FLOOR = float(np.log(1e-30))


# ---------------------------------------------------------------------------
# results


@dataclass(frozen=True)
class MatchBatchResult:
    """One distribution-matching gradient batch.

    All three gradient stores are descent directions on -J.  Groups
    without parameters (e.g. a point-mass augmenter) get empty stores.
    """

    grads_gamma: ParamStore
    grads_theta: ParamStore
    grads_beta: ParamStore
    j_match_estimate: float
    entropy_estimate: float
    n_samples: int
    floor_hits: int


@dataclass(frozen=True)
class FidelityBatchResult:
    """One fidelity-reward gradient batch (descent directions on -J_fid)."""

    grads_gamma: ParamStore
    grads_theta: ParamStore
    mean_reward_src: float
    mean_reward_tgt: float


@dataclass(frozen=True)
class CombinedConfig:
    """Knobs for one alternation step.

    ``update`` picks the parameter group that moves: "augmenters" steps
    gamma and theta while beta stays bit-identical, "model" steps beta
    while the augmenters stay bit-identical.  Reward callables are
    optional; when either is None the fidelity term is skipped entirely.
    """

    update: str
    n_samples: int = 50
    eta: float = 0.05
    entropy_weight: float = 1.0
    reward_src: Callable | None = None
    reward_tgt: Callable | None = None
    baseline: bool = True

    def __post_init__(self) -> None:
        if self.update not in ("augmenters", "model"):
            raise UsageError(f"unknown update group {self.update!r}")
        if self.n_samples < 2:
            raise UsageError("combined steps need n_samples >= 2")
        if not (self.eta > 0.0) or not np.isfinite(self.eta):
            raise UsageError("eta must be positive and finite")
        if self.entropy_weight < 0.0:
            raise UsageError("entropy_weight must be >= 0")


@dataclass(frozen=True)
class StepReport:
    """Scalar diagnostics from one combined step."""

    j_match_estimate: float
    entropy_estimate: float
    mean_reward_src: float
    mean_reward_tgt: float
    floor_hits: int


# ---------------------------------------------------------------------------
# degenerate augmenter


class PointMassAugmenter:
    """Augmenter that emits its prototype with probability one.

    Useful as a limiting case: with both augmenters replaced by point
    masses the matching beta-gradient collapses to the plain MLE
    gradient on (x*, y*).  Carries no parameters, so its gradient store
    is always empty.
    """

    def __init__(self) -> None:
        self.params = ParamStore()

    def sample(self, prototype, rng: RngStream):
        return prototype, 0.0

    def sample_n(self, prototype, rng: RngStream, n: int) -> list:
        return [(prototype, 0.0)] * n

    def seq_log_prob(self, prototype, seq) -> float:
        if seq.key() != prototype.key():
            raise UsageError("a point mass only covers its own prototype")
        return 0.0

    def log_prob(self, prototype, seq) -> float:
        return self.seq_log_prob(prototype, seq)


# ---------------------------------------------------------------------------
# sampling and grouping helpers


def _draw(augmenter, prototype, rng: RngStream, n: int) -> list:
    """n (sample, log_prob) pairs; tolerates reparameterized 3-tuples."""
    if hasattr(augmenter, "sample_n"):
        raw = augmenter.sample_n(prototype, rng, n)
    else:
        raw = [augmenter.sample(prototype, rng.split(k)) for k in range(n)]
    out = []
    for entry in raw:
        if len(entry) == 3:  # (sample, noise, log_prob)
            sample, _, logp = entry
        else:
            sample, logp = entry
        out.append((sample, float(logp)))
    return out


def _group(entries):
    """Collapse duplicate samples, keeping first-seen order.

    Returns (samples, log_probs, counts).  Duplicates of one sequence
    carry bitwise-identical sampler log-probs, so keeping the first is
    exact, and grouping keeps point-mass batches down to a single
    scoring (which the exactness guarantees below rely on).
    """
    samples, logps, counts, where = [], [], [], {}
    for sample, logp in entries:
        key = sample.key()
        slot = where.get(key)
        if slot is None:
            where[key] = len(samples)
            samples.append(sample)
            logps.append(logp)
            counts.append(1)
        else:
            counts[slot] += 1
    return samples, np.array(logps), np.array(counts, dtype=np.float64)


def _log_mean_prob(logps: np.ndarray, counts: np.ndarray, n: int):
    """log[(1/n) sum_j c_j exp(logps_j)] with the documented floor.

    Written as max + (log s - log n) so that when every term equals lp
    the result is lp bit-for-bit: s accumulates to exactly float(n) and
    the two logs cancel.  Returns (value, floored flag).
    """
    m = float(np.max(logps))
    s = float(np.sum(counts * np.exp(logps - m)))
    value = m + (float(np.log(s)) - float(np.log(n)))
    if value < LOG_MARGINAL_FLOOR:
        return LOG_MARGINAL_FLOOR, True
    return value, False


def _encode_cache(augmenter, leaves, prototype):
    """Taped encoder cache when the augmenter wraps a seq2seq model."""
    model = getattr(augmenter, "model", None)
    if model is not None and hasattr(model, "encode_node"):
        return model.encode_node(leaves, prototype)
    return None


def _taped_logprob(augmenter, leaves, prototype, seq, enc=None):
    if enc is not None:
        return augmenter.log_prob_node(leaves, prototype, seq, enc=enc)
    return augmenter.log_prob_node(leaves, prototype, seq)


def _weighted_score_grads(augmenter, prototype, samples, coefs) -> ParamStore:
    """Backward of sum_u coefs[u] * log q(samples[u] | prototype).

    One tape per call; the prototype encoding is built once and shared
    across every scored sample.  Empty parameter stores short-circuit to
    an empty gradient store.
    """
    params = augmenter.params
    if len(params) == 0:
        return ParamStore()
    tape = Tape()
    leaves = {name: tape.leaf(name, val) for name, val in params.items()}
    enc = _encode_cache(augmenter, leaves, prototype)
    terms = [
        mul(_taped_logprob(augmenter, leaves, prototype, s, enc=enc), float(c))
        for s, c in zip(samples, coefs)
    ]
    tape.backward(sum_nodes(terms))
    return tape.leaf_grads(params)


# ---------------------------------------------------------------------------
# public estimators


def estimate_marginal(y, xs, beta) -> float:
    """Plug-in marginal (1/N) sum_j p_beta(y | x_j), floored at MARGINAL_FLOOR.

    Exact collapses: with a single source the result is exactly
    p_beta(y|x_1), and identical sources reduce to the same single-term
    value regardless of N.
    """
    xs = list(xs)
    if not xs:
        raise UsageError("estimate_marginal needs at least one source sample")
    grouped = _group((x, 0.0) for x in xs)
    uniq, _, counts = grouped
    logps = np.array([beta.seq_log_prob(x, y) for x in uniq])
    if not np.all(np.isfinite(logps)):
        raise NumericalError("non-finite conditional log-probability in marginal")
    value, _ = _log_mean_prob(logps, counts, len(xs))
    return float(np.exp(value))


def match_grads(pair, theta, gamma, beta, n_samples: int, rng: RngStream,
                entropy_weight: float = 1.0) -> MatchBatchResult:
    """One N-sample gradient batch for the matching objective.

    ``pair`` is (x*, y*); theta and gamma are augmenters conditioned on
    x* and y*; beta is the seq2seq model.  Draws N sources and N targets
    (rng children 0 and 1), groups duplicates, scores every unique
    (y, x) pair under beta with one shared encoding per source, and
    returns descent gradients on -J for all three groups plus plug-in
    diagnostics.  Marginal clamps are counted per drawn target in
    ``floor_hits``.
    """
    if n_samples < 2:
        raise UsageError("match_grads needs n_samples >= 2")
    x_star, y_star = pair
    n = int(n_samples)

    xs, x_logps, x_counts = _group(_draw(theta, x_star, rng.split(0), n))
    ys, y_logps, y_counts = _group(_draw(gamma, y_star, rng.split(1), n))
    if not np.all(np.isfinite(x_logps)) or not np.all(np.isfinite(y_logps)):
        raise NumericalError("non-finite sampler log-probability in match batch")

    # One tape scores all unique (y, x) conditionals; the node values feed
    # the weights and the same nodes then receive the beta backward pass.
    beta_tape = Tape()
    beta_leaves = {nm: beta_tape.leaf(nm, v) for nm, v in beta.params.items()}
    cond_nodes, cond = [], np.empty((len(ys), len(xs)))
    for v, x in enumerate(xs):
        enc = beta.encode_node(beta_leaves, x)
        col = [beta.log_prob_node(beta_leaves, x, y, enc=enc) for y in ys]
        cond_nodes.append(col)
        cond[:, v] = [node.val for node in col]
    if not np.all(np.isfinite(cond)):
        raise NumericalError("non-finite conditional log-probability in match batch")

    log_marg = np.empty(len(ys))
    floor_hits = 0
    for u in range(len(ys)):
        log_marg[u], floored = _log_mean_prob(cond[u], x_counts, n)
        if floored:
            floor_hits += int(y_counts[u])

    w = np.exp(cond - log_marg[:, None])  # w[u, v] = p_beta(y_u|x_v) / m^(y_u)

    # beta: -(1/N^2) sum c_u c_v w_uv dlog p_beta(y_u|x_v)
    coef = -(y_counts[:, None] * x_counts[None, :] * w) / float(n * n)
    terms = [
        mul(cond_nodes[v][u], float(coef[u, v]))
        for v in range(len(xs))
        for u in range(len(ys))
    ]
    if terms and len(beta.params) > 0:
        beta_tape.backward(sum_nodes(terms))
        grads_beta = beta_tape.leaf_grads(beta.params)
    else:
        grads_beta = ParamStore()

    # gamma: (1/N) sum c_u [log q_gamma(y_u) - log m^(y_u)] dlog q_gamma(y_u)
    gamma_coef = y_counts * (y_logps - log_marg) / float(n)
    grads_gamma = _weighted_score_grads(gamma, y_star, ys, gamma_coef)

    # theta: (1/N) sum c_v [kappa log q_theta(x_v) - (1/N) sum_u c_u w_uv] dlog q_theta(x_v)
    mean_w = (y_counts[None, :] @ w).ravel() / float(n)
    theta_coef = x_counts * (entropy_weight * x_logps - mean_w) / float(n)
    grads_theta = _weighted_score_grads(theta, x_star, xs, theta_coef)

    kl_est = float(np.sum(y_counts * (y_logps - log_marg)) / n)
    entropy_est = float(-np.sum(x_counts * x_logps) / n)
    return MatchBatchResult(
        grads_gamma=grads_gamma,
        grads_theta=grads_theta,
        grads_beta=grads_beta,
        j_match_estimate=float(-kl_est + entropy_weight * entropy_est),
        entropy_estimate=entropy_est,
        n_samples=n,
        floor_hits=floor_hits,
    )


def fidelity_grads(pair, theta, gamma, n_samples: int, rng: RngStream,
                   reward_src: Callable, reward_tgt: Callable,
                   baseline: bool = True) -> FidelityBatchResult:
    """Score-function gradients that pull augmenter samples toward their
    prototypes.

    Maximizes E_{x~q_theta}[reward_src(x, x*)] + E_{y~q_gamma}[reward_tgt(y, y*)]
    and returns descent directions on the negation.  With ``baseline``
    on (the default) each group subtracts its mean batch reward; a
    constant-reward batch then yields exactly zero gradients.
    """
    if n_samples < 1:
        raise UsageError("fidelity_grads needs n_samples >= 1")
    x_star, y_star = pair
    n = int(n_samples)

    def group_grads(augmenter, prototype, reward_fn, slot):
        samples, _, counts = _group(_draw(augmenter, prototype, rng.split(slot), n))
        rewards = np.array([float(reward_fn(s, prototype)) for s in samples])
        if not np.all(np.isfinite(rewards)):
            raise NumericalError("non-finite reward in fidelity batch")
        mean = float(np.sum(counts * rewards) / n)
        if baseline and rewards.size and np.ptp(rewards) == 0.0:
            return augmenter.params.zeros_like(), mean  # exactly constant batch
        shifted = rewards - mean if baseline else rewards
        coefs = -counts * shifted / float(n)
        return _weighted_score_grads(augmenter, prototype, samples, coefs), mean

    grads_theta, mean_src = group_grads(theta, x_star, reward_src, 0)
    grads_gamma, mean_tgt = group_grads(gamma, y_star, reward_tgt, 1)
    return FidelityBatchResult(
        grads_gamma=grads_gamma,
        grads_theta=grads_theta,
        mean_reward_src=mean_src,
        mean_reward_tgt=mean_tgt,
    )


def combined_step(pair, theta, gamma, beta, config: CombinedConfig,
                  rng: RngStream) -> StepReport:
    """One alternation step on the full objective J_match + J_fidelity.

    Estimates both gradient batches (independent rng children), sums
    them per group, and applies ``sgd_step`` only to the group named by
    ``config.update``; the other group's parameters are left untouched,
    bit for bit.  Returns scalar diagnostics.
    """
    match = match_grads(pair, theta, gamma, beta, config.n_samples,
                        rng.split(0), entropy_weight=config.entropy_weight)
    g_theta, g_gamma = match.grads_theta, match.grads_gamma
    mean_src = mean_tgt = float("nan")
    if config.reward_src is not None and config.reward_tgt is not None:
        fid = fidelity_grads(pair, theta, gamma, config.n_samples, rng.split(1),
                             config.reward_src, config.reward_tgt,
                             baseline=config.baseline)
        g_theta = add_stores(g_theta, fid.grads_theta)
        g_gamma = add_stores(g_gamma, fid.grads_gamma)
        mean_src, mean_tgt = fid.mean_reward_src, fid.mean_reward_tgt

    if config.update == "augmenters":
        if len(theta.params) > 0:
            theta.params = sgd_step(theta.params, g_theta, config.eta)
        if len(gamma.params) > 0:
            gamma.params = sgd_step(gamma.params, g_gamma, config.eta)
    else:
        beta.params = sgd_step(beta.params, match.grads_beta, config.eta)

    return StepReport(
        j_match_estimate=match.j_match_estimate,
        entropy_estimate=match.entropy_estimate,
        mean_reward_src=mean_src,
        mean_reward_tgt=mean_tgt,
        floor_hits=match.floor_hits,
    )
