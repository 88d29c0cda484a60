"""Comparison trainers: likelihood, policy gradient, payoff-augmented.

Three ways to fit the same seq2seq model without the matching objective:
plain MLE with annealed SGD, REINFORCE on per-step BLEU increments with a
running per-position baseline, and reward-augmented likelihood where each
reference is replaced by samples from an exp(-edits/tau) payoff
distribution over its substitution ball.

Trainer determinism contract: epoch e shuffles with rng.split(e).split(0)
and draws any per-pair randomness from rng.split(e).split(1).split(i) for
dataset index i. train_mle and train_raml share the schedule, so RAML
with one candidate and tau -> 0 reproduces the MLE trajectory bitwise.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import UsageError
from .numcore import ParamStore, RngStream, Tape, mul, sgd_step, sum_nodes
from .rewards import delta_bleu_steps
from .seqmodel import BOS, EOS, SeqModel, TokenSeq, Vocab


@dataclass(frozen=True)
class TrainerConfig:
    """Epoch/step knobs shared by the supervised-style trainers."""

    epochs: int
    eta: float
    batch_size: int = 32
    anneal: float = 0.8  # eta multiplier applied every anneal_every epochs
    anneal_every: int = 3
    patience: int | None = None  # stop after this many non-improving epochs

    def __post_init__(self) -> None:
        if self.epochs < 0:
            raise UsageError("epochs must be >= 0")
        if self.eta < 0.0 or not np.isfinite(self.eta):
            raise UsageError("eta must be finite and >= 0")
        if self.batch_size < 1:
            raise UsageError("batch_size must be >= 1")
        if not (0.0 < self.anneal <= 1.0):
            raise UsageError("anneal must be in (0, 1]")
        if self.anneal_every < 1:
            raise UsageError("anneal_every must be >= 1")
        if self.patience is not None and self.patience < 1:
            raise UsageError("patience must be >= 1 when set")

    def eta_at(self, epoch: int) -> float:
        return self.eta * self.anneal ** (epoch // self.anneal_every)


@dataclass(frozen=True)
class RlConfig:
    """Policy-gradient knobs."""

    epochs: int
    eta: float
    rollout_slack: int = 4
    baseline_decay: float = 0.9

    def __post_init__(self) -> None:
        if self.epochs < 0:
            raise UsageError("epochs must be >= 0")
        if self.eta < 0.0 or not np.isfinite(self.eta):
            raise UsageError("eta must be finite and >= 0")
        if self.rollout_slack < 0:
            raise UsageError("rollout_slack must be >= 0")
        if not (0.0 <= self.baseline_decay < 1.0):
            raise UsageError("baseline_decay must be in [0, 1)")


@dataclass(frozen=True)
class RamlConfig:
    """Payoff-sampling knobs.

    ``max_edit`` bounds the number of substituted positions; None means
    ceil(L/2) for a length-L reference, keeping samples recognizably
    close to the original.
    """

    tau: float = 0.8
    candidates_per_pair: int = 4
    max_edit: int | None = None

    def __post_init__(self) -> None:
        if not (self.tau > 0.0) or not np.isfinite(self.tau):
            raise UsageError("tau must be positive and finite")
        if self.candidates_per_pair < 1:
            raise UsageError("candidates_per_pair must be >= 1")
        if self.max_edit is not None and self.max_edit < 0:
            raise UsageError("max_edit must be >= 0 when set")

    def resolved_max_edit(self, length: int) -> int:
        if self.max_edit is None:
            return (length + 1) // 2
        if self.max_edit > length:
            raise UsageError(
                f"max_edit {self.max_edit} exceeds reference length {length}"
            )
        return self.max_edit


# ---------------------------------------------------------------------------
# shared helpers


def _check_dataset(dataset) -> list:
    data = list(dataset)
    if not data:
        raise UsageError("training needs a non-empty dataset")
    for _, target in data:
        if not isinstance(target, TokenSeq) or not target.terminated:
            raise UsageError("training targets must be terminated TokenSeqs")
    return data


def token_accuracy(model: SeqModel, dataset) -> float:
    """Teacher-forced argmax accuracy, end-marker steps included."""
    data = _check_dataset(dataset)
    hits = total = 0
    for source, target in data:
        state = model.decode_start(source)
        prev = BOS
        for tok in target.ids + (EOS,):
            logp_vec, state = model.decode_step(state, prev)
            hits += int(np.argmax(logp_vec) == tok)
            total += 1
            prev = tok
    return hits / total


# ---------------------------------------------------------------------------
# maximum likelihood


def train_mle(beta: SeqModel, dataset, config: TrainerConfig, rng: RngStream,
              on_epoch=None, start_epoch: int = 0) -> np.ndarray:
    """Annealed minibatch SGD on mean negative log-likelihood.

    Returns the per-epoch mean training loss. ``on_epoch(epoch, loss)``
    runs after each epoch's updates and may return True to stop early;
    with ``config.patience`` set, training also stops once that many
    epochs pass without improving the best loss. ``start_epoch`` resumes
    mid-run: epoch e uses the same shuffle and step size regardless of
    where the loop began.
    """
    data = _check_dataset(dataset)
    curve: list[float] = []
    best = math.inf
    stale = 0
    for epoch in range(start_epoch, config.epochs):
        order = rng.split(epoch).split(0).permutation(len(data))
        eta = config.eta_at(epoch)
        losses = []
        for lo in range(0, len(data), config.batch_size):
            batch = [data[i] for i in order[lo:lo + config.batch_size]]
            loss, grads = beta.mle_loss_grad(batch)
            if eta > 0.0:
                beta.params = sgd_step(beta.params, grads, eta)
            losses.append(loss)
        mean_loss = float(np.mean(losses))
        curve.append(mean_loss)
        if on_epoch is not None and on_epoch(epoch, mean_loss):
            break
        if config.patience is not None:
            if mean_loss < best - 1e-12:
                best, stale = mean_loss, 0
            else:
                stale += 1
                if stale >= config.patience:
                    break
    return np.array(curve)


# ---------------------------------------------------------------------------
# policy gradient


@dataclass(frozen=True)
class RolloutResult:
    grads: ParamStore  # descent directions on -E[reward]
    total_reward: float
    returns: np.ndarray  # reward-to-go per trajectory step


def reinforce_grads(beta: SeqModel, pair, rng: RngStream,
                    rollout_slack: int = 4, baselines: np.ndarray | None = None,
                    reward_steps_fn=None) -> RolloutResult:
    """One-rollout policy gradient with reward-to-go weighting.

    Samples y ~ p_beta(.|x) capped at |reference| + slack and scores its
    content tokens with per-step reward increments (BLEU deltas against
    the reference by default). Step t's taped log-prob is weighted by
    the reward still to come after it, minus ``baselines[t]`` when
    given; the end-marker step earns nothing, so its weight is pure
    baseline correction. Gradients are descent directions on the
    negated expected reward and stay unbiased for any
    trajectory-independent baseline.
    """
    source, reference = pair
    if not reference.ids:
        raise UsageError("reference must be non-empty")
    sample, _ = beta.sample(source, rng, max_len=len(reference.ids) + rollout_slack)
    if reward_steps_fn is None:
        steps = delta_bleu_steps(TokenSeq(sample.ids), reference)
    else:
        steps = np.asarray(reward_steps_fn(sample, reference), dtype=np.float64)
    if steps.shape != (len(sample.ids),):
        raise UsageError("reward steps must match the sampled content length")
    n_steps = len(sample.ids) + (1 if sample.terminated else 0)
    returns = np.zeros(n_steps)
    if len(steps):
        returns[: len(steps)] = np.cumsum(steps[::-1])[::-1]
    coefs = returns.copy()
    if baselines is not None:
        coefs -= np.asarray(baselines)[:n_steps]

    total = float(steps.sum())
    if n_steps == 0 or np.all(coefs == 0.0):
        return RolloutResult(beta.params.zeros_like(), total, returns)
    tape = Tape()
    leaves = {nm: tape.leaf(nm, v) for nm, v in beta.params.items()}
    nodes = beta.step_log_prob_nodes(leaves, source, sample)
    terms = [mul(node, -float(c)) for node, c in zip(nodes, coefs)]
    tape.backward(sum_nodes(terms))
    return RolloutResult(tape.leaf_grads(beta.params), total, returns)


def train_reinforce(beta: SeqModel, dataset, config: RlConfig, rng: RngStream,
                    on_epoch=None, start_epoch: int = 0,
                    baselines: np.ndarray | None = None) -> np.ndarray:
    """Per-pair policy-gradient updates; returns per-epoch mean reward.

    Expects a warm-started model: running this on an apparently
    untrained one (per-token likelihood near uniform) emits a
    RuntimeWarning but proceeds. A per-position running average of the
    observed returns (decay ``config.baseline_decay``) is subtracted as
    the baseline; pass the ``baselines`` array saved from an earlier
    run (updated in place) together with ``start_epoch`` to resume
    exactly. ``on_epoch(epoch, mean_reward)`` may return True to stop.
    """
    data = _check_dataset(dataset)
    _warn_if_cold(beta, data)
    max_steps = 1 + max(
        len(t.ids) for _, t in data
    ) + config.rollout_slack
    if baselines is None:
        baselines = np.zeros(max_steps)
    elif baselines.shape != (max_steps,):
        raise UsageError(
            f"baselines must have shape ({max_steps},) for this dataset"
        )
    curve: list[float] = []
    for epoch in range(start_epoch, config.epochs):
        order = rng.split(epoch).split(0).permutation(len(data))
        rewards = []
        for i in order:
            roll_rng = rng.split(epoch).split(1).split(int(i))
            result = reinforce_grads(
                beta, data[i], roll_rng, config.rollout_slack, baselines
            )
            if config.eta > 0.0:
                beta.params = sgd_step(beta.params, result.grads, config.eta)
            n = len(result.returns)
            if n:
                baselines[:n] *= config.baseline_decay
                baselines[:n] += (1.0 - config.baseline_decay) * result.returns
            rewards.append(result.total_reward)
        mean_reward = float(np.mean(rewards))
        curve.append(mean_reward)
        if on_epoch is not None and on_epoch(epoch, mean_reward):
            break
    return np.array(curve)


def _warn_if_cold(beta: SeqModel, data: list) -> None:
    probe = data[: min(len(data), 10)]
    nats = tokens = 0.0
    for source, target in probe:
        nats -= beta.seq_log_prob(source, target)
        tokens += len(target.ids) + 1
    # head covers content tokens plus the end marker
    uniform = math.log(beta.config.vocab.size - 2)
    if nats / tokens > 0.9 * uniform:
        warnings.warn(
            "per-token likelihood is near uniform; policy gradient expects "
            "a warm-started model",
            RuntimeWarning,
            stacklevel=3,
        )


# ---------------------------------------------------------------------------
# reward-augmented likelihood


def raml_sample(reference: TokenSeq, vocab: Vocab, cfg: RamlConfig,
                rng: RngStream) -> TokenSeq:
    """One draw from the exp(-edits/tau) payoff distribution.

    Stratified: first pick the substitution count m with probability
    proportional to C(L, m) (V_c - 1)^m exp(-m/tau), then substitute at
    m uniformly chosen positions with uniformly chosen different
    content tokens. The induced sequence marginal is proportional to
    exp(-m/tau) over the whole substitution ball.
    """
    if not isinstance(reference, TokenSeq) or not reference.ids:
        raise UsageError("reference must be a non-empty TokenSeq")
    ids = reference.ids
    length = len(ids)
    m_max = cfg.resolved_max_edit(length)
    content = list(vocab.content_ids)
    n_alt = len(content) - 1
    if n_alt == 0 or m_max == 0:
        return TokenSeq(ids, True)
    log_w = np.array([
        math.log(math.comb(length, m)) + m * math.log(n_alt) - m / cfg.tau
        for m in range(m_max + 1)
    ])
    weights = np.exp(log_w - log_w.max())
    m = rng.categorical(weights / weights.sum())
    if m == 0:
        return TokenSeq(ids, True)
    positions = rng.permutation(length)[:m]
    variant = list(ids)
    for pos in positions:
        alts = [t for t in content if t != ids[pos]]
        variant[pos] = alts[rng.integers(0, len(alts))]
    return TokenSeq(tuple(variant), True)


def train_raml(beta: SeqModel, dataset, cfg: RamlConfig, train: TrainerConfig,
               rng: RngStream, on_epoch=None, start_epoch: int = 0) -> np.ndarray:
    """Likelihood training on payoff-sampled targets.

    Each pair contributes ``cfg.candidates_per_pair`` augmented targets
    per epoch; the expanded batch then takes the exact train_mle step.
    Returns the per-epoch mean loss over augmented batches.
    ``on_epoch`` and ``start_epoch`` behave as in train_mle.
    """
    data = _check_dataset(dataset)
    vocab = beta.config.vocab
    curve: list[float] = []
    for epoch in range(start_epoch, train.epochs):
        order = rng.split(epoch).split(0).permutation(len(data))
        eta = train.eta_at(epoch)
        losses = []
        for lo in range(0, len(data), train.batch_size):
            expanded = []
            for i in order[lo:lo + train.batch_size]:
                source, reference = data[i]
                cand_rng = rng.split(epoch).split(1).split(int(i))
                for c in range(cfg.candidates_per_pair):
                    target = raml_sample(reference, vocab, cfg, cand_rng.split(c))
                    expanded.append((source, target))
            loss, grads = beta.mle_loss_grad(expanded)
            if eta > 0.0:
                beta.params = sgd_step(beta.params, grads, eta)
            losses.append(loss)
        mean_loss = float(np.mean(losses))
        curve.append(mean_loss)
        if on_epoch is not None and on_epoch(epoch, mean_loss):
            break
    return np.array(curve)
