"""Exhaustive-enumeration and quadrature ground truth for tiny instances.

Everything here is deliberately brute force: enumerate every sequence up
to a depth, visit the model's conditional tree once per source, and
compute marginals, KL divergences, entropies, and objective gradients
exactly (gradients by central differences of the exact objective). The
Monte Carlo estimators in `objectives` are tested against these numbers.

Atom convention: the enumeration space holds every terminated sequence
of content length < max_len plus every unterminated boundary sequence
of content length exactly max_len. That mirrors a sampler whose rollout
cap is max_len: the cap cuts a rollout after the max_len-th content
token with no further end-of-sequence draw, so terminated atoms at the
cap are unreachable and the listed atoms carry the entire probability
mass (they sum to one up to float rounding). Oracle sums over them are
therefore exact expectations, not truncations. When caps exceed the
enumeration depth the sums are partial; callers then renormalize and
report the lost mass.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import UsageError
from .numcore import ParamStore, RngStream, logsumexp
from .numcore.autodiff import element, log_softmax
from .objectives import MARGINAL_FLOOR
from .seqmodel import BOS, EOS, TokenSeq, Vocab

MAX_SPACE_ATOMS = 100_000


@dataclass
class EnumSpace:
    """All sequences over a vocabulary's content tokens up to a depth.

    `sequences` lists terminated atoms of content length < max_len in
    length-lexicographic order (count = sum over l < max_len of
    V_content^l); `boundary` lists the unterminated depth-max_len atoms
    in lexicographic order.
    """

    vocab: Vocab
    max_len: int
    sequences: list[TokenSeq] = field(init=False)
    boundary: list[TokenSeq] = field(init=False)
    index: dict = field(init=False)

    def __post_init__(self) -> None:
        if self.max_len < 0:
            raise UsageError("max_len must be >= 0")
        v = self.vocab.n_content
        count = sum(v**l for l in range(self.max_len)) + v**self.max_len
        if count > MAX_SPACE_ATOMS:
            raise UsageError(
                f"enumeration space would hold {count} atoms "
                f"(cap {MAX_SPACE_ATOMS})"
            )
        content = list(self.vocab.content_ids)
        self.sequences = [
            TokenSeq(ids, True)
            for length in range(self.max_len)
            for ids in itertools.product(content, repeat=length)
        ]
        self.boundary = [
            TokenSeq(ids, False)
            for ids in itertools.product(content, repeat=self.max_len)
        ]
        self.index = {s.key(): i for i, s in enumerate(self.sequences)}
        for j, s in enumerate(self.boundary):
            self.index[s.key()] = len(self.sequences) + j

    @property
    def n_terminated(self) -> int:
        return len(self.sequences)

    def atoms(self) -> list[TokenSeq]:
        return self.sequences + self.boundary

    def find(self, seq: TokenSeq) -> int:
        try:
            return self.index[seq.key()]
        except KeyError:
            raise UsageError(f"sequence {seq.ids} not in enumeration space") from None


@dataclass
class DistTable:
    """Log-probabilities of a conditional over an EnumSpace's atoms."""

    space: EnumSpace
    log_terminated: np.ndarray
    log_boundary: np.ndarray

    @property
    def terminated_mass(self) -> float:
        return float(np.exp(self.log_terminated).sum())

    @property
    def boundary_mass(self) -> float:
        return float(np.exp(self.log_boundary).sum())

    @property
    def total_mass(self) -> float:
        return self.terminated_mass + self.boundary_mass

    def log_atoms(self) -> np.ndarray:
        return np.concatenate([self.log_terminated, self.log_boundary])

    def log_prob_of(self, seq: TokenSeq) -> float:
        return float(self.log_atoms()[self.space.find(seq)])


def distribution_table(dist, conditioning, space: EnumSpace) -> DistTable:
    """Visit the conditional tree once and read off every atom's log-prob.

    `dist` either exposes the stepwise decoding interface
    (decode_start/decode_step) or is a TableDistribution.
    """
    if isinstance(dist, TableDistribution):
        if dist.space is not space:
            raise UsageError("table distribution built over a different space")
        logs = dist.log_atom_probs()
        n = space.n_terminated
        return DistTable(space, logs[:n].copy(), logs[n:].copy())

    content = list(space.vocab.content_ids)
    log_term = np.zeros(space.n_terminated)
    log_bound = np.zeros(len(space.boundary))

    def visit(state, prev, prefix, acc, depth):
        if depth == space.max_len:
            log_bound[space.index[(prefix, False)] - space.n_terminated] = acc
            return
        logp_vec, nxt = dist.decode_step(state, prev)
        log_term[space.index[(prefix, True)]] = acc + logp_vec[EOS]
        for tok in content:
            visit(nxt, tok, prefix + (tok,), acc + logp_vec[tok], depth + 1)

    visit(dist.decode_start(conditioning), BOS, (), 0.0, 0)
    return DistTable(space, log_term, log_bound)


class TableDistribution:
    """Explicit distribution over a space's atoms, softmax of one logit vector.

    Serves as a minimal augmenter stand-in for oracle constructions: it
    samples atoms, scores them, and exposes taped log-probabilities, so
    score-function estimators can be tied exactly to a known table.
    """

    def __init__(self, space: EnumSpace, logits) -> None:
        logits = np.asarray(logits, dtype=np.float64)
        n_atoms = space.n_terminated + len(space.boundary)
        if logits.shape != (n_atoms,):
            raise UsageError(f"need {n_atoms} logits, got {logits.shape}")
        self.space = space
        self.params = ParamStore([("logits", logits)])

    @classmethod
    def uniform_over(cls, space: EnumSpace, seqs) -> "TableDistribution":
        logits = np.full(space.n_terminated + len(space.boundary), -1e30)
        for s in seqs:
            logits[space.find(s)] = 0.0
        return cls(space, logits)

    @classmethod
    def from_table(cls, table: DistTable) -> "TableDistribution":
        return cls(table.space, table.log_atoms())

    def log_atom_probs(self) -> np.ndarray:
        logits = self.params["logits"]
        return logits - logsumexp(logits)

    def sample(self, prototype, rng: RngStream):
        logs = self.log_atom_probs()
        idx = rng.categorical(np.exp(logs))
        atoms = self.space.atoms()
        return atoms[idx], float(logs[idx])

    def seq_log_prob(self, prototype, seq: TokenSeq) -> float:
        return float(self.log_atom_probs()[self.space.find(seq)])

    def log_prob(self, prototype, seq: TokenSeq) -> float:
        return self.seq_log_prob(prototype, seq)

    def log_prob_node(self, p, prototype, seq: TokenSeq, enc=None):
        return element(log_softmax(p["logits"]), self.space.find(seq))


def _stepper_table(dist, conditioning, space) -> DistTable:
    if hasattr(dist, "decode_start") or isinstance(dist, TableDistribution):
        return distribution_table(dist, conditioning, space)
    raise UsageError(f"cannot enumerate {type(dist).__name__}")


# ---------------------------------------------------------------------------
# exact quantities


@dataclass
class MarginalReport:
    value: float
    source_coverage: float  # mass of the x-support actually summed
    n_sources: int


def exact_marginal(
    theta,
    beta,
    x_star,
    y: TokenSeq,
    space: EnumSpace,
    x_top_k: int | None = None,
) -> MarginalReport:
    """Sum_x p_theta(x | x*) p_beta(y | x) over the enumerated sources."""
    src_table = _stepper_table(theta, x_star, space)
    probs = np.exp(src_table.log_atoms())
    atoms = space.atoms()
    order = np.argsort(-probs, kind="stable")
    if x_top_k is not None:
        order = order[: max(1, int(x_top_k))]
    coverage = float(probs[order].sum())
    total = 0.0
    for idx in order:
        x = atoms[idx]
        if probs[idx] == 0.0:
            continue
        total += probs[idx] * np.exp(beta.seq_log_prob(x, y))
    return MarginalReport(value=total, source_coverage=coverage,
                          n_sources=len(order))


def _conditional_matrix(beta, sources, space: EnumSpace) -> np.ndarray:
    """Rows: sources; columns: space atoms; entries p_beta(y | x)."""
    rows = []
    for x in sources:
        table = _stepper_table(beta, x, space)
        rows.append(np.exp(table.log_atoms()))
    return np.asarray(rows)


@dataclass
class KlReport:
    kl: float
    gamma_coverage: float
    theta_coverage: float
    marginal_floor_hits: int
    renormalized: bool


def exact_kl(
    gamma,
    theta,
    beta,
    pair,
    space: EnumSpace,
    x_top_k: int | None = None,
    renormalize: bool = False,
) -> KlReport:
    """KL(p_gamma(.|y*) || sum_x p_theta(x|x*) p_beta(.|x)) over the space.

    With aligned rollout caps and renormalize=False the sums run over
    the full probability space and the value is exact. Otherwise pass
    renormalize=True: both distributions are renormalized over the
    enumerated atoms (and the truncated x-support), which keeps the
    result a valid KL of conditioned distributions; the reports carry
    the coverages so callers can judge the truncation.
    """
    x_star, y_star = pair
    g_table = _stepper_table(gamma, y_star, space)
    g = np.exp(g_table.log_atoms())
    t_table = _stepper_table(theta, x_star, space)
    t_probs = np.exp(t_table.log_atoms())
    atoms = space.atoms()

    order = np.argsort(-t_probs, kind="stable")
    if x_top_k is not None:
        order = order[: max(1, int(x_top_k))]
    theta_coverage = float(t_probs[order].sum())
    gamma_coverage = float(g.sum())

    weights = t_probs[order]
    if renormalize:
        if theta_coverage <= 0.0:
            raise UsageError("theta puts no mass on the enumerated space")
        weights = weights / theta_coverage
        if gamma_coverage <= 0.0:
            raise UsageError("gamma puts no mass on the enumerated space")
        g = g / gamma_coverage

    cond = _conditional_matrix(beta, [atoms[i] for i in order], space)
    marginal = weights @ cond
    if renormalize:
        total = marginal.sum()
        if total <= 0.0:
            raise UsageError("marginal puts no mass on the enumerated space")
        marginal = marginal / total

    floor_hits = int(np.sum((marginal < MARGINAL_FLOOR) & (g > 0.0)))
    m_floored = np.maximum(marginal, MARGINAL_FLOOR)
    mask = g > 0.0
    kl = float(np.sum(g[mask] * (np.log(g[mask]) - np.log(m_floored[mask]))))
    return KlReport(
        kl=kl,
        gamma_coverage=gamma_coverage,
        theta_coverage=theta_coverage,
        marginal_floor_hits=floor_hits,
        renormalized=renormalize,
    )


def exact_entropy(dist, conditioning, space: EnumSpace) -> float:
    """Shannon entropy -sum p log p over the enumerated atoms."""
    table = _stepper_table(dist, conditioning, space)
    logs = table.log_atoms()
    p = np.exp(logs)
    mask = p > 0.0
    return float(-np.sum(p[mask] * logs[mask]))


def exact_j_match(
    gamma, theta, beta, pair, space: EnumSpace, entropy_weight: float = 1.0
) -> float:
    """-KL + weight * H(theta), both summed exactly over the space."""
    x_star, _ = pair
    report = exact_kl(gamma, theta, beta, pair, space)
    h = exact_entropy(theta, x_star, space)
    return -report.kl + entropy_weight * h


def exact_objective_grads(
    theta,
    gamma,
    beta,
    pair,
    space: EnumSpace,
    fd_step: float = 1e-5,
    entropy_weight: float = 1.0,
) -> tuple[ParamStore, ParamStore, ParamStore]:
    """Central differences of the exact matching objective per group.

    Returns descent gradients (of -J_match = KL - weight*H), the same
    orientation the Monte Carlo estimators hand to sgd_step.
    """
    x_star, y_star = pair
    if not np.isfinite(fd_step) or fd_step <= 0.0:
        raise UsageError("fd_step must be positive")

    # The conditional matrix only depends on beta, so the theta and gamma
    # sweeps reuse one precomputed copy.
    atoms = space.atoms()
    cond = _conditional_matrix(beta, atoms, space)

    def minus_j(cond_mat: np.ndarray) -> float:
        g_logs = _stepper_table(gamma, y_star, space).log_atoms()
        t_logs = _stepper_table(theta, x_star, space).log_atoms()
        g = np.exp(g_logs)
        t = np.exp(t_logs)
        marginal = np.maximum(t @ cond_mat, MARGINAL_FLOOR)
        mask = g > 0.0
        kl = float(np.sum(g[mask] * (g_logs[mask] - np.log(marginal[mask]))))
        t_mask = t > 0.0
        h = float(-np.sum(t[t_mask] * t_logs[t_mask]))
        return kl - entropy_weight * h

    def fd_sweep(owner, recompute) -> ParamStore:
        grads = ParamStore()
        for name, arr in owner.params.items():
            g = np.zeros_like(arr)
            g_flat = g.ravel()
            arr_flat = arr.ravel()  # view into the live parameters
            for i in range(arr.size):
                orig = arr_flat[i]
                arr_flat[i] = orig + fd_step
                hi = recompute()
                arr_flat[i] = orig - fd_step
                lo = recompute()
                arr_flat[i] = orig
                g_flat[i] = (hi - lo) / (2.0 * fd_step)
            grads.add(name, g)
        return grads

    g_theta = fd_sweep(theta, lambda: minus_j(cond))
    g_gamma = fd_sweep(gamma, lambda: minus_j(cond))
    g_beta = fd_sweep(
        beta, lambda: minus_j(_conditional_matrix(beta, atoms, space))
    )
    return g_theta, g_gamma, g_beta


# ---------------------------------------------------------------------------
# continuous-case quadrature


def gauss_hermite_log_norm(log_density, center: float, scale: float,
                           n_nodes: int = 64) -> float:
    """Integrate exp(log_density(x)) over R by Gauss-Hermite quadrature.

    Nodes are placed for weight exp(-(x-center)^2 / (2 scale^2));
    returns the plain integral (should be ~1 for a proper density).
    """
    nodes, weights = np.polynomial.hermite.hermgauss(n_nodes)
    # x = center + sqrt(2) * scale * node
    xs = center + np.sqrt(2.0) * scale * nodes
    vals = np.array([np.exp(log_density(x)) for x in xs])
    corrections = np.exp((xs - center) ** 2 / (2.0 * scale**2))
    return float(np.sqrt(2.0) * scale * np.sum(weights * vals * corrections))


# ---------------------------------------------------------------------------
# exact payoff distribution for reward-augmented sampling


@dataclass
class RamlTable:
    """Exact payoff distribution over a reference's substitution ball."""

    reference: TokenSeq
    probs: dict  # sequence key -> probability
    stratum_mass: np.ndarray  # m -> total probability of the m-edit stratum

    def prob_of(self, seq: TokenSeq) -> float:
        return self.probs.get(seq.key(), 0.0)

    @property
    def total(self) -> float:
        return float(sum(self.probs.values()))


def exact_raml_distribution(reference: TokenSeq, cfg, space: EnumSpace) -> RamlTable:
    """Normalized exp(-m/tau) over every substitution variant of reference.

    m counts substituted positions (the reference length is preserved),
    so stratum m holds C(L, m) * (V_c - 1)^m equally likely sequences.
    ``cfg`` needs ``tau`` and ``resolved_max_edit`` (see RamlConfig).
    """
    if not isinstance(reference, TokenSeq) or not reference.ids:
        raise UsageError("reference must be a non-empty TokenSeq")
    content = list(space.vocab.content_ids)
    ids = reference.ids
    L = len(ids)
    m_max = cfg.resolved_max_edit(L)
    n_alt = len(content) - 1
    count = sum(math.comb(L, m) * n_alt**m for m in range(m_max + 1))
    if count > MAX_SPACE_ATOMS:
        raise UsageError(f"substitution ball holds {count} sequences "
                         f"(cap {MAX_SPACE_ATOMS})")

    probs: dict = {}
    stratum = np.zeros(m_max + 1)
    for m in range(m_max + 1):
        weight = float(np.exp(-m / cfg.tau))
        for positions in itertools.combinations(range(L), m):
            choices = [[t for t in content if t != ids[i]] for i in positions]
            for replacement in itertools.product(*choices):
                variant = list(ids)
                for i, tok in zip(positions, replacement):
                    variant[i] = tok
                probs[TokenSeq(tuple(variant)).key()] = weight
                stratum[m] += weight
    z = stratum.sum()
    for key in probs:
        probs[key] /= z
    return RamlTable(reference, probs, stratum / z)
