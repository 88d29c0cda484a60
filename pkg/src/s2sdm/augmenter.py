"""Prototype-conditioned noise distributions over sequences.

Two realizations. The discrete augmenter wraps the encoder-decoder
sequence model: conditioned on a prototype token sequence it defines a
multinomial rollout distribution over nearby sequences. The continuous
augmenter perturbs a prototype vector sequence with reparameterized
diagonal-Gaussian noise whose per-step scales come from a recurrent
network fed the previous prototype vector and the previous deviation.

Both expose exact log-densities, sampling, and reverse-mode score
gradients, which is everything the matching estimators consume. The
closed-form derivative expressions live in the tests as oracles; there
is a single gradient code path here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import UsageError
from .numcore import (
    ParamStore,
    RngStream,
    div,
    eval_value,
    eval_with_grad,
    log,
    matmul,
    mul,
    sgd_step,
    softplus,
    square,
    sum_all,
    sum_nodes,
    tanh,
    value_of,
)
from .seqmodel import SeqModel, SeqModelConfig, TokenSeq, VecSeq, _gru

DEFAULT_ROLLOUT_SLACK = 4

LAMBDA_FLOOR = 1e-3

LOG_TWO_PI = float(np.log(2.0 * np.pi))


# ---------------------------------------------------------------------------
# discrete: multinomial rollouts near a token prototype


class DiscreteAugmenter:
    """Noisy-copy distribution over token sequences near a prototype.

    Rollouts are capped at the prototype length plus a fixed slack, so
    samples live in the truncated family whose boundary sits at that
    cap; align enumeration depths with `cap_for` when exactness
    matters.
    """

    def __init__(self, model: SeqModel,
                 rollout_slack: int = DEFAULT_ROLLOUT_SLACK) -> None:
        if rollout_slack < 1:
            raise UsageError("rollout slack must be >= 1")
        self.model = model
        self.rollout_slack = rollout_slack

    @classmethod
    def init(cls, config: SeqModelConfig, rng: RngStream,
             rollout_slack: int = DEFAULT_ROLLOUT_SLACK) -> "DiscreteAugmenter":
        return cls(SeqModel.init(config, rng), rollout_slack)

    @property
    def config(self) -> SeqModelConfig:
        return self.model.config

    @property
    def params(self) -> ParamStore:
        return self.model.params

    @params.setter
    def params(self, store: ParamStore) -> None:
        self.model.params = store

    def cap_for(self, prototype: TokenSeq) -> int:
        return len(prototype) + self.rollout_slack

    def _check_prototype(self, prototype) -> None:
        if not isinstance(prototype, TokenSeq):
            raise UsageError("discrete prototypes must be token sequences")
        if not prototype.terminated or len(prototype) == 0:
            raise UsageError("prototype must be non-empty and terminated")

    def log_prob(self, prototype: TokenSeq, sample: TokenSeq) -> float:
        self._check_prototype(prototype)
        return self.model.log_prob(prototype, sample)

    def seq_log_prob(self, prototype: TokenSeq, seq: TokenSeq) -> float:
        """Truncated-family scorer; accepts capped rollouts."""
        self._check_prototype(prototype)
        return self.model.seq_log_prob(prototype, seq)

    def log_prob_node(self, p, prototype: TokenSeq, seq: TokenSeq, enc=None):
        self._check_prototype(prototype)
        return self.model.log_prob_node(p, prototype, seq, enc=enc)

    def grad_log_prob(self, prototype: TokenSeq, sample: TokenSeq) -> ParamStore:
        """Exact gradient of log_prob with respect to every parameter."""
        self._check_prototype(prototype)
        if not sample.terminated:
            raise UsageError("grad_log_prob expects a terminated sample")
        _, grads = eval_with_grad(
            lambda p: self.model.log_prob_node(p, prototype, sample), self.params
        )
        return grads

    def sample(self, prototype: TokenSeq, rng: RngStream,
               max_len: int | None = None):
        self._check_prototype(prototype)
        cap = self.cap_for(prototype) if max_len is None else max_len
        return self.model.sample(prototype, rng, max_len=cap)

    def sample_n(self, prototype: TokenSeq, rng: RngStream, n: int,
                 max_len: int | None = None) -> list:
        """n rollouts sharing one prototype encoding; list of (seq, logp)."""
        if n < 1:
            raise UsageError("need at least one draw")
        self._check_prototype(prototype)
        cap = self.cap_for(prototype) if max_len is None else max_len
        start = self.model.decode_start(prototype)
        return [
            self.model.sample(prototype, rng, max_len=cap, start=start)
            for _ in range(n)
        ]

    # stepwise interface, so enumeration oracles can walk the tree
    def decode_start(self, prototype: TokenSeq):
        self._check_prototype(prototype)
        return self.model.decode_start(prototype)

    def decode_step(self, state, prev_id: int):
        return self.model.decode_step(state, prev_id)


# ---------------------------------------------------------------------------
# continuous: reparameterized Gaussian deviations from a vector prototype


@dataclass(frozen=True)
class ContAugConfig:
    dim: int
    hidden: int = 16
    mlp: int = 16

    def __post_init__(self) -> None:
        if self.dim < 1 or self.hidden < 1 or self.mlp < 1:
            raise UsageError("dim, hidden, and mlp must be positive")


class ContinuousAugmenter:
    """Diagonal-Gaussian noise around a prototype vector sequence.

    Per position t the sample is x_t = x*_t + lambda_t * n_t with
    n_t ~ N(0, I). The scales lambda_t come from a recurrent state fed
    the previous prototype vector and the previous realized deviation,
    so the density is autoregressive in the deviations; a softplus plus
    a 1e-3 floor keeps every scale strictly positive.
    """

    def __init__(self, config: ContAugConfig, params: ParamStore) -> None:
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: ContAugConfig, rng: RngStream) -> "ContinuousAugmenter":
        K, H, M = config.dim, config.hidden, config.mlp
        shapes: list[tuple[str, tuple[int, ...]]] = []
        for gate in ("wz", "wr", "wh"):
            shapes.append((f"tr_{gate}", (H, 2 * K + H)))
        for gate in ("bz", "br", "bh"):
            shapes.append((f"tr_{gate}", (H,)))
        shapes += [("mlp_w1", (M, H)), ("mlp_b1", (M,)),
                   ("mlp_w2", (K, M)), ("mlp_b2", (K,))]
        params = ParamStore()
        for name, shape in shapes:
            params.add(name, rng.uniform(shape) * 0.16 - 0.08)
        return cls(config, params)

    # -- core unroll (mode-agnostic over the params) -------------------------

    def _check_pair(self, prototype, sample) -> None:
        if not isinstance(prototype, VecSeq) or not isinstance(sample, VecSeq):
            raise UsageError("continuous augmenter works on vector sequences")
        if prototype.vectors.shape != sample.vectors.shape:
            raise UsageError(
                f"prototype shape {prototype.vectors.shape} != "
                f"sample shape {sample.vectors.shape}"
            )
        if prototype.dim != self.config.dim:
            raise UsageError(
                f"expected {self.config.dim}-dim vectors, got {prototype.dim}"
            )

    def _scale_nodes(self, p, proto_arr: np.ndarray, devs: np.ndarray) -> list:
        """Per-step scale vectors along a fixed deviation path."""
        T, K = proto_arr.shape
        h = np.zeros(self.config.hidden)
        prev_proto = np.zeros(K)
        prev_dev = np.zeros(K)
        lams = []
        for t in range(T):
            x = np.concatenate([prev_proto, prev_dev])
            h = _gru(p, "tr", x, h)
            a = tanh(matmul(p["mlp_w1"], h) + p["mlp_b1"])
            raw = matmul(p["mlp_w2"], a) + p["mlp_b2"]
            lams.append(softplus(raw) + LAMBDA_FLOOR)
            prev_proto = proto_arr[t]
            prev_dev = devs[t]
        return lams

    def scales(self, prototype: VecSeq, sample: VecSeq) -> np.ndarray:
        """The (T, K) scale matrix the density assigns along `sample`."""
        self._check_pair(prototype, sample)
        devs = sample.vectors - prototype.vectors
        lams = self._scale_nodes(self.params, prototype.vectors, devs)
        return np.stack([np.asarray(value_of(lam)) for lam in lams])

    def log_prob_node(self, p, prototype: VecSeq, sample: VecSeq):
        """Taped log-density; p maps parameter names to tape Nodes."""
        self._check_pair(prototype, sample)
        devs = sample.vectors - prototype.vectors
        lams = self._scale_nodes(p, prototype.vectors, devs)
        terms = []
        for t, lam in enumerate(lams):
            z = div(devs[t], lam)
            terms.append(sum_all(log(lam)) + mul(sum_all(square(z)), 0.5))
        nats = sum_nodes(terms) + 0.5 * LOG_TWO_PI * devs.size
        return mul(nats, -1.0)

    def log_prob(self, prototype: VecSeq, sample: VecSeq) -> float:
        return float(value_of(self.log_prob_node(self.params, prototype, sample)))

    def grad_log_prob(self, prototype: VecSeq, sample: VecSeq,
                      noise: VecSeq | None = None) -> ParamStore:
        """Exact gradient of log_prob at a fixed realized sample.

        The realized sample alone determines the density value, so
        `noise` is accepted only for call-shape symmetry with `sample`
        and checked for consistency when provided.
        """
        self._check_pair(prototype, sample)
        if noise is not None:
            if not isinstance(noise, VecSeq) or (
                noise.vectors.shape != sample.vectors.shape
            ):
                raise UsageError("noise must be a VecSeq shaped like the sample")
        _, grads = eval_with_grad(
            lambda p: self.log_prob_node(p, prototype, sample), self.params
        )
        return grads

    def deviations(self, prototype: VecSeq, sample: VecSeq) -> np.ndarray:
        self._check_pair(prototype, sample)
        return sample.vectors - prototype.vectors

    # -- sampling -------------------------------------------------------------

    def from_noise(self, prototype: VecSeq, noise: VecSeq):
        """Deterministic reparameterization map; returns (sample, log_prob)."""
        self._check_pair(prototype, noise)
        p = self.params
        proto = prototype.vectors
        T, K = proto.shape
        h = np.zeros(self.config.hidden)
        prev_proto = np.zeros(K)
        prev_dev = np.zeros(K)
        xs = np.empty_like(proto)
        for t in range(T):
            x = np.concatenate([prev_proto, prev_dev])
            h = _gru(p, "tr", x, h)
            a = tanh(matmul(p["mlp_w1"], h) + p["mlp_b1"])
            lam = softplus(matmul(p["mlp_w2"], a) + p["mlp_b2"]) + LAMBDA_FLOOR
            dev = lam * noise.vectors[t]
            xs[t] = proto[t] + dev
            prev_proto = proto[t]
            prev_dev = xs[t] - proto[t]  # what the scorer will see, bitwise
        sample = VecSeq(xs)
        return sample, self.log_prob(prototype, sample)

    def sample(self, prototype: VecSeq, rng: RngStream):
        """Reparameterized draw; returns (sample, noise, log_prob)."""
        if not isinstance(prototype, VecSeq):
            raise UsageError("continuous augmenter works on vector sequences")
        noise = VecSeq(rng.normal(prototype.vectors.shape))
        sample, logp = self.from_noise(prototype, noise)
        return sample, noise, logp

    def sample_many(self, prototype: VecSeq, rng: RngStream, n: int):
        """Vectorized draws: (samples, noises, log_probs) with leading dim n.

        Row i reproduces from_noise(prototype, noises[i]) up to BLAS
        rounding; use this for statistics over many draws.
        """
        if n < 1:
            raise UsageError("need at least one draw")
        if not isinstance(prototype, VecSeq):
            raise UsageError("continuous augmenter works on vector sequences")
        p = self.params
        proto = prototype.vectors
        T, K = proto.shape
        noises = rng.normal((n, T, K))
        h = np.zeros((n, self.config.hidden))
        prev = np.zeros((n, 2 * K))
        xs = np.empty((n, T, K))
        nats = np.full(n, 0.5 * LOG_TWO_PI * T * K)
        for t in range(T):
            xh = np.concatenate([prev, h], axis=1)
            z = 1.0 / (1.0 + np.exp(-(xh @ p["tr_wz"].T + p["tr_bz"])))
            r = 1.0 / (1.0 + np.exp(-(xh @ p["tr_wr"].T + p["tr_br"])))
            xrh = np.concatenate([prev, r * h], axis=1)
            cand = np.tanh(xrh @ p["tr_wh"].T + p["tr_bh"])
            h = (1.0 - z) * h + z * cand
            a = np.tanh(h @ p["mlp_w1"].T + p["mlp_b1"])
            lam = softplus(a @ p["mlp_w2"].T + p["mlp_b2"]) + LAMBDA_FLOOR
            dev = lam * noises[:, t, :]
            xs[:, t, :] = proto[t] + dev
            recovered = xs[:, t, :] - proto[t]  # the scorer sees this, not dev
            nats += np.sum(np.log(lam) + 0.5 * (recovered / lam) ** 2, axis=1)
            prev = np.concatenate(
                [np.broadcast_to(proto[t], (n, K)), recovered], axis=1
            )
        return xs, noises, -nats


# ---------------------------------------------------------------------------
# shared pretraining


def pretrain_self_reconstruction(augmenter, prototypes, epochs: int,
                                 eta: float) -> ParamStore:
    """Full-batch gradient descent on mean -log p(prototype | prototype).

    Drives the augmenter toward reproducing its input, the starting
    point for noisy-copy training. Each epoch backtracks the step size
    (halving, up to 12 times) until the loss does not increase: the
    objective has softmax saturation cliffs early on that a fixed step
    overshoots, and the loss trace is contractually non-increasing.
    Works for either realization; the updated parameters are installed
    on the augmenter and returned.
    """
    prototypes = list(prototypes)
    if not prototypes:
        raise UsageError("pretraining needs at least one prototype")
    if epochs < 0:
        raise UsageError("epochs must be >= 0")

    def program(p):
        terms = [
            mul(augmenter.log_prob_node(p, x, x), -1.0) for x in prototypes
        ]
        return mul(sum_nodes(terms), 1.0 / len(terms))

    for _ in range(epochs):
        loss, grads = eval_with_grad(program, augmenter.params)
        step = eta
        for _ in range(12):
            trial = sgd_step(augmenter.params, grads, step)
            if eval_value(program, trial) <= loss:
                augmenter.params = trial
                break
            step *= 0.5
        else:
            return augmenter.params  # stationary to step-size resolution
    return augmenter.params
