"""Attention-based encoder-decoder over token or vector sequences.

Vocabulary layout is fixed: id 0 is BOS, id 1 is EOS, id 2 is PAD, and
content tokens start at id 3. The output head scores content tokens plus
EOS; BOS and PAD are masked to -1e30 so no rollout can emit them.

The decoder is stepwise: given the previous token and its recurrent
state it produces a log-distribution over the next token. Sampling,
greedy/beam decoding, exhaustive enumeration, and taped log-probability
all drive the same step function, which is what makes a sampled
trajectory's reported log-probability equal (bit for bit) to what
log_prob later computes for it.

Length convention: a sequence that hit its rollout cap is flagged
unterminated and its log-probability deliberately excludes any EOS
factor. Terminated sequences below the cap plus unterminated sequences
at the cap form a proper distribution (mass sums to one), which keeps
Monte Carlo estimators unbiased and lets enumeration oracles be exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import UsageError
from .numcore import (
    ParamStore,
    RngStream,
    Tape,
    concat,
    element,
    log_softmax,
    matmul,
    mul,
    row,
    sigmoid,
    softmax,
    stack_rows,
    sum_nodes,
    tanh,
    value_of,
)

BOS = 0
EOS = 1
PAD = 2
N_RESERVED = 3

MASK_VALUE = -1e30


@dataclass(frozen=True)
class Vocab:
    """Token inventory; three reserved ids then content tokens."""

    tokens: tuple[str, ...]

    def __post_init__(self) -> None:
        if len(self.tokens) < N_RESERVED + 1:
            raise UsageError("vocab needs the 3 reserved tokens plus content")
        if len(set(self.tokens)) != len(self.tokens):
            raise UsageError("vocab tokens must be distinct")

    @classmethod
    def make(cls, n_content: int, prefix: str = "w") -> "Vocab":
        if n_content < 1:
            raise UsageError("need at least one content token")
        reserved = ("<bos>", "<eos>", "<pad>")
        return cls(reserved + tuple(f"{prefix}{i}" for i in range(n_content)))

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def n_content(self) -> int:
        return len(self.tokens) - N_RESERVED

    @property
    def head_size(self) -> int:
        """Distinct symbols the decoder head can emit: content plus EOS."""
        return self.n_content + 1

    @property
    def content_ids(self) -> range:
        return range(N_RESERVED, len(self.tokens))

    def id_of(self, token: str) -> int:
        try:
            return self.tokens.index(token)
        except ValueError:
            raise UsageError(f"unknown token {token!r}") from None

    def token_of(self, idx: int) -> str:
        if not 0 <= idx < len(self.tokens):
            raise UsageError(f"token id {idx} out of range")
        return self.tokens[idx]


@dataclass(frozen=True)
class TokenSeq:
    """Content-token sequence; terminated=False means it hit a rollout cap."""

    ids: tuple[int, ...]
    terminated: bool = True

    def __post_init__(self) -> None:
        ids = tuple(int(i) for i in self.ids)
        object.__setattr__(self, "ids", ids)
        if any(i < N_RESERVED for i in ids):
            raise UsageError("reserved ids cannot appear inside a sequence")

    @classmethod
    def from_padded(cls, ids) -> "TokenSeq":
        """Strip trailing PADs and one trailing EOS marker if present."""
        ids = [int(i) for i in ids]
        while ids and ids[-1] == PAD:
            ids.pop()
        terminated = bool(ids) and ids[-1] == EOS
        if terminated:
            ids.pop()
        return cls(tuple(ids), terminated or not ids)

    def __len__(self) -> int:
        return len(self.ids)

    def key(self):
        return (self.ids, self.terminated)

    def render(self, vocab: Vocab) -> str:
        text = " ".join(vocab.token_of(i) for i in self.ids)
        return text if self.terminated else text + " ..."


@dataclass(frozen=True, eq=False)
class VecSeq:
    """Real-vector sequence, stored as a (T, K) float64 array."""

    vectors: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.vectors, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise UsageError("VecSeq needs a (T, K) array with T,K >= 1")
        if not np.all(np.isfinite(arr)):
            raise UsageError("VecSeq entries must be finite")
        object.__setattr__(self, "vectors", arr)

    def __len__(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def key(self):
        return (self.vectors.shape, self.vectors.tobytes())


@dataclass(frozen=True)
class SeqModelConfig:
    vocab: Vocab
    hidden: int = 32
    embed: int = 16
    attn: int | None = None  # defaults to hidden
    source_dim: int | None = None  # None: token sources; K: vector sources
    max_len: int = 16

    def __post_init__(self) -> None:
        if self.hidden < 1 or self.embed < 1 or self.max_len < 1:
            raise UsageError("hidden, embed, and max_len must be positive")
        if self.attn is not None and self.attn < 1:
            raise UsageError("attention width must be positive")
        if self.source_dim is not None and self.source_dim < 1:
            raise UsageError("source_dim must be positive when set")

    @property
    def attn_dim(self) -> int:
        return self.attn if self.attn is not None else self.hidden


class EncCache(NamedTuple):
    """Per-source encoder products reused across decoder steps."""

    mat: object  # (T, 2H) encoder states
    proj: object  # (T, A) attention pre-projection
    r0: object  # (H,) initial decoder state


class DecState(NamedTuple):
    enc: EncCache
    r: object  # (H,) decoder recurrent state


def _gru(p, pre: str, x, h):
    """Two-gate recurrent cell: update gate z, reset gate r."""
    xh = concat([x, h])
    z = sigmoid(matmul(p[f"{pre}_wz"], xh) + p[f"{pre}_bz"])
    r = sigmoid(matmul(p[f"{pre}_wr"], xh) + p[f"{pre}_br"])
    xrh = concat([x, mul(r, h)])
    cand = tanh(matmul(p[f"{pre}_wh"], xrh) + p[f"{pre}_bh"])
    return mul(1.0 - z, h) + mul(z, cand)


class SeqModel:
    """Bidirectional recurrent encoder, additive attention, stepwise decoder."""

    def __init__(self, config: SeqModelConfig, params: ParamStore) -> None:
        self.config = config
        self.params = params
        vocab = config.vocab
        mask = np.zeros(vocab.size)
        mask[BOS] = MASK_VALUE
        mask[PAD] = MASK_VALUE
        self._head_mask = mask

    # -- construction -------------------------------------------------------

    @classmethod
    def init(cls, config: SeqModelConfig, rng: RngStream) -> "SeqModel":
        """Uniform(-0.08, 0.08) weights; output-head bias starts at zero."""
        H, E, A = config.hidden, config.embed, config.attn_dim
        V = config.vocab.size
        shapes: list[tuple[str, tuple[int, ...]]] = [("emb", (V, E))]
        if config.source_dim is not None:
            shapes += [("src_w", (E, config.source_dim)), ("src_b", (E,))]
        for pre in ("enc_fw", "enc_bw"):
            for gate in ("wz", "wr", "wh"):
                shapes.append((f"{pre}_{gate}", (H, E + H)))
            for gate in ("bz", "br", "bh"):
                shapes.append((f"{pre}_{gate}", (H,)))
        shapes += [("init_w", (H, 2 * H)), ("init_b", (H,))]
        shapes += [("att_u", (2 * H, A)), ("att_q", (A, H)),
                   ("att_b", (A,)), ("att_v", (A,))]
        for gate in ("wz", "wr", "wh"):
            shapes.append((f"dec_{gate}", (H, E + 2 * H + H)))
        for gate in ("bz", "br", "bh"):
            shapes.append((f"dec_{gate}", (H,)))
        shapes += [("head_w", (V, H + 2 * H)), ("head_b", (V,))]

        params = ParamStore()
        for name, shape in shapes:
            if name == "head_b":
                params.add(name, np.zeros(shape))
            else:
                params.add(name, rng.uniform(shape) * 0.16 - 0.08)
        return cls(config, params)

    # -- mode-agnostic network pieces ---------------------------------------

    def _source_inputs(self, p, source):
        """Embedded source positions: content tokens plus an EOS marker."""
        if isinstance(source, TokenSeq):
            return [row(p["emb"], i) for i in source.ids] + [row(p["emb"], EOS)]
        if isinstance(source, VecSeq):
            if self.config.source_dim != source.dim:
                raise UsageError(
                    f"model expects {self.config.source_dim}-dim vectors, "
                    f"got {source.dim}"
                )
            return [
                tanh(matmul(p["src_w"], source.vectors[t]) + p["src_b"])
                for t in range(len(source))
            ]
        raise UsageError(f"unsupported source type {type(source).__name__}")

    def _encode(self, p, source) -> EncCache:
        inputs = self._source_inputs(p, source)
        H = self.config.hidden
        zeros = np.zeros(H)
        fw = []
        h = zeros
        for x in inputs:
            h = _gru(p, "enc_fw", x, h)
            fw.append(h)
        bw_rev = []
        h = zeros
        for x in reversed(inputs):
            h = _gru(p, "enc_bw", x, h)
            bw_rev.append(h)
        bw = list(reversed(bw_rev))
        states = [concat([f, b]) for f, b in zip(fw, bw)]
        mat = stack_rows(states)
        proj = matmul(mat, p["att_u"]) + p["att_b"]
        ends = concat([fw[-1], bw[0]])
        r0 = tanh(matmul(p["init_w"], ends) + p["init_b"])
        return EncCache(mat, proj, r0)

    def _dec_step(self, p, enc: EncCache, r_prev, prev_id: int):
        """One decoder step; returns (log-distribution, next state)."""
        query = matmul(p["att_q"], r_prev)
        scores = matmul(tanh(enc.proj + query), p["att_v"])
        alpha = softmax(scores)
        ctx = matmul(alpha, enc.mat)
        x = concat([row(p["emb"], prev_id), ctx])
        r = _gru(p, "dec", x, r_prev)
        logits = matmul(p["head_w"], concat([r, ctx])) + p["head_b"]
        return log_softmax(logits + self._head_mask), r

    def _step_terms(self, p, source, target: TokenSeq, enc=None) -> list:
        if enc is None:
            enc = self._encode(p, source)
        r = enc.r0
        prev = BOS
        terms = []
        for tok in target.ids:
            logp_vec, r = self._dec_step(p, enc, r, prev)
            terms.append(element(logp_vec, tok))
            prev = tok
        if target.terminated:
            logp_vec, r = self._dec_step(p, enc, r, prev)
            terms.append(element(logp_vec, EOS))
        return terms

    def _sequence_log_prob(self, p, source, target: TokenSeq, enc=None):
        """Sum of stepwise log-probs; EOS factor only if terminated."""
        return sum_nodes(self._step_terms(p, source, target, enc=enc))

    # -- public: scoring ------------------------------------------------------

    def encode(self, source) -> np.ndarray:
        """Encoder state matrix (T, 2H) for a source sequence."""
        return np.asarray(value_of(self._encode(self.params, source).mat))

    def log_prob(self, source, target: TokenSeq) -> float:
        """log p(target | source); target must be terminated."""
        if not isinstance(target, TokenSeq) or not target.terminated:
            raise UsageError("log_prob expects a terminated target sequence")
        return float(self._sequence_log_prob(self.params, source, target))

    def seq_log_prob(self, source, target: TokenSeq) -> float:
        """Truncated-family scorer: accepts unterminated targets too."""
        return float(self._sequence_log_prob(self.params, source, target))

    def log_prob_node(self, p, source, target: TokenSeq, enc=None):
        """Taped log-probability; p maps parameter names to tape Nodes."""
        return self._sequence_log_prob(p, source, target, enc=enc)

    def encode_node(self, p, source) -> EncCache:
        """Taped encoder cache, reusable across several scored targets."""
        return self._encode(p, source)

    def step_log_prob_nodes(self, p, source, target: TokenSeq, enc=None) -> list:
        """Per-step taped log-probs: one node per content token, plus the
        end-marker step when the target is terminated. Their sum equals
        log_prob_node's value."""
        return self._step_terms(p, source, target, enc=enc)

    def step_distribution(self, source, prefix: tuple[int, ...]) -> np.ndarray:
        """Next-token probabilities after consuming `prefix`."""
        state = self.decode_start(source)
        prev = BOS
        for tok in prefix:
            _, state = self.decode_step(state, prev)
            prev = tok
        logp_vec, _ = self.decode_step(state, prev)
        return np.exp(logp_vec)

    # -- public: stepwise decoding interface ----------------------------------

    def decode_start(self, source) -> DecState:
        enc = self._encode(self.params, source)
        return DecState(enc, enc.r0)

    def decode_step(self, state: DecState, prev_id: int):
        logp_vec, r = self._dec_step(self.params, state.enc, state.r, prev_id)
        return np.asarray(logp_vec), DecState(state.enc, r)

    # -- public: generation ----------------------------------------------------

    def sample(self, source, rng: RngStream, max_len: int | None = None,
               start: DecState | None = None):
        """Ancestral sample; returns (TokenSeq, its log-probability).

        Pass `start` (a decode_start result for this same source) to
        reuse one encoding across many draws.
        """
        cap = self.config.max_len if max_len is None else int(max_len)
        if cap < 1:
            raise UsageError("sampling cap must be >= 1")
        state = self.decode_start(source) if start is None else start
        prev = BOS
        ids: list[int] = []
        total = 0.0
        while True:
            logp_vec, state = self.decode_step(state, prev)
            tok = rng.categorical(np.exp(logp_vec))
            total += float(logp_vec[tok])
            if tok == EOS:
                return TokenSeq(tuple(ids), True), total
            ids.append(tok)
            if len(ids) >= cap:
                return TokenSeq(tuple(ids), False), total
            prev = tok

    def beam_decode(self, source, beam_width: int,
                    max_len: int | None = None) -> TokenSeq:
        """Deterministic beam search, normalized-score final selection.

        Each round ranks all (hypothesis, token) extensions by prefix
        log-probability (ties by lexicographically smaller id sequence)
        and keeps the top beam_width; EOS extensions retire as finished.
        Final pick maximizes log p / token count, preferring terminated
        hypotheses. Width 1 therefore reproduces greedy decoding.
        """
        if beam_width < 1:
            raise UsageError("beam width must be >= 1")
        cap = self.config.max_len if max_len is None else int(max_len)
        start = self.decode_start(source)
        live = [((), 0.0, start, BOS)]
        finished: list[tuple[tuple[int, ...], float, bool]] = []
        for _ in range(cap):
            candidates = []
            for ids, score, state, prev in live:
                logp_vec, nxt = self.decode_step(state, prev)
                candidates.append((ids, score + float(logp_vec[EOS]), None, EOS))
                for tok in self.config.vocab.content_ids:
                    candidates.append(
                        (ids + (tok,), score + float(logp_vec[tok]), nxt, tok)
                    )
            candidates.sort(key=lambda c: (-c[1], c[0]))
            live = []
            for ids, score, state, tok in candidates[:beam_width]:
                if tok == EOS:
                    finished.append((ids, score, True))
                else:
                    live.append((ids, score, state, tok))
            if not live:
                break
        for ids, score, _state, _tok in live:  # ran into the cap
            finished.append((ids, score, False))

        def rank(entry):
            ids, score, terminated = entry
            n_tokens = len(ids) + (1 if terminated else 0)
            return (-(score / max(n_tokens, 1)), not terminated, ids)

        finished.sort(key=rank)
        ids, _score, terminated = finished[0]
        return TokenSeq(ids, terminated)

    # -- public: supervised training -------------------------------------------

    def mle_loss_grad(self, batch) -> tuple[float, ParamStore]:
        """Mean negative log-likelihood and its gradients over a batch."""
        batch = list(batch)
        if not batch:
            raise UsageError("mle_loss_grad needs a non-empty batch")
        tape = Tape()
        leaves = {n: tape.leaf(n, v) for n, v in self.params.items()}
        losses = []
        for source, target in batch:
            if not target.terminated:
                raise UsageError("training targets must be terminated")
            losses.append(-self.log_prob_node(leaves, source, target))
        loss = mul(sum_nodes(losses), 1.0 / len(batch))
        tape.backward(loss)
        return float(loss.val), tape.leaf_grads(self.params)
