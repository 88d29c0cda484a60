"""Synthetic transduction tasks and dataset/vocabulary file formats.

Four generators at desk scale: copy, reverse, a fixed token-permutation
cipher, and a continuous-source labeling task whose sources are class
prototype vectors plus Gaussian jitter. Targets are always derived from
the clean source first; noise then corrupts the source side, so the
clean structure an augmenter should recover genuinely exists in the
data. Clean sources are drawn without replacement, which keeps the
train/dev/test splits disjoint (the discrete target maps are
bijections, and jittered vectors are almost surely distinct).

File formats. Discrete datasets are UTF-8 text, one pair per line:
space-separated source tokens, one TAB, space-separated target tokens.
Vocabulary files hold one token per line, line number minus one = token
id, with the first three lines fixed to the reserved begin/end/padding
markers. Continuous datasets are binary: magic "VSEQ0001", then per
record a 32-bit row count T, a 32-bit width K, T*K little-endian
float64 values, a 32-bit target length, and that many 32-bit token ids.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ParseError, UsageError
from .numcore import RngStream
from .seqmodel import N_RESERVED, TokenSeq, VecSeq, Vocab

TASK_KINDS = ("copy", "reverse", "cipher", "cont_label")
MAX_TASK_LEN = 32  # generation guard far above desk scale
VSEQ_MAGIC = b"VSEQ0001"


@dataclass(frozen=True)
class TaskSpec:
    """Everything that determines a generated dataset, including the seed."""

    kind: str
    vocab_size: int = 12
    min_len: int = 3
    max_len: int = 8
    noise: float = 0.1  # per-position corruption probability on the source
    n_train: int = 2000
    n_dev: int = 200
    n_test: int = 200
    seed: int = 0
    source_dim: int = 8  # vector width for cont_label sources
    jitter: float = 0.25  # prototype jitter stddev for cont_label

    def __post_init__(self) -> None:
        if self.kind not in TASK_KINDS:
            raise UsageError(f"unknown task kind {self.kind!r}")
        if self.vocab_size < 1:
            raise UsageError("vocab_size must be >= 1")
        if not (1 <= self.min_len <= self.max_len <= MAX_TASK_LEN):
            raise UsageError(
                f"need 1 <= min_len <= max_len <= {MAX_TASK_LEN}"
            )
        if not (0.0 <= self.noise <= 0.5):
            raise UsageError("noise must lie in [0, 0.5]")
        if self.noise > 0.0 and self.vocab_size < 2:
            raise UsageError("corruption needs at least two content tokens")
        if min(self.n_train, self.n_dev, self.n_test) < 0:
            raise UsageError("split sizes must be >= 0")
        if self.n_train + self.n_dev + self.n_test < 1:
            raise UsageError("dataset must hold at least one pair")
        if self.source_dim < 1:
            raise UsageError("source_dim must be >= 1")
        if not (self.jitter >= 0.0 and np.isfinite(self.jitter)):
            raise UsageError("jitter must be finite and >= 0")

    @property
    def total(self) -> int:
        return self.n_train + self.n_dev + self.n_test


@dataclass(frozen=True)
class TaskData:
    """Generated splits plus the latent structure behind them."""

    spec: TaskSpec
    vocab: Vocab
    train: list
    dev: list
    test: list
    cipher_perm: np.ndarray | None = None  # content-index permutation
    prototypes: np.ndarray | None = None  # (n_content, source_dim) rows

    def splits(self) -> dict:
        return {"train": self.train, "dev": self.dev, "test": self.test}


def _sequence_space(spec: TaskSpec) -> int:
    return sum(spec.vocab_size**length
               for length in range(spec.min_len, spec.max_len + 1))


def _draw_clean_sources(spec: TaskSpec, rng: RngStream) -> list:
    if spec.total > _sequence_space(spec):
        raise UsageError(
            f"{spec.total} pairs exceed the {_sequence_space(spec)} distinct "
            "sources this spec allows"
        )
    lo, hi = N_RESERVED, N_RESERVED + spec.vocab_size
    seen: set = set()
    out: list = []
    attempts = 1000 + 200 * spec.total
    for _ in range(attempts):
        length = rng.integers(spec.min_len, spec.max_len + 1)
        ids = tuple(int(t) for t in rng.integers(lo, hi, length))
        if ids not in seen:
            seen.add(ids)
            out.append(TokenSeq(ids))
            if len(out) == spec.total:
                return out
    raise UsageError("could not draw enough distinct sources; "
                     "shrink the dataset or widen the length range")


def _corrupt_tokens(seq: TokenSeq, noise: float, vocab: Vocab,
                    rng: RngStream) -> TokenSeq:
    if noise == 0.0:
        return seq
    flips = rng.uniform(len(seq.ids)) < noise
    ids = list(seq.ids)
    for pos in np.flatnonzero(flips):
        alts = [t for t in vocab.content_ids if t != ids[pos]]
        ids[pos] = alts[rng.integers(0, len(alts))]
    return TokenSeq(tuple(ids))


def derive_target(kind: str, src: TokenSeq,
                  cipher_perm: np.ndarray | None = None) -> TokenSeq:
    """Clean target for a clean source; cont_label keeps the class ids."""
    if kind == "reverse":
        return TokenSeq(src.ids[::-1])
    if kind == "cipher":
        if cipher_perm is None:
            raise UsageError("cipher needs its content permutation")
        return TokenSeq(tuple(
            N_RESERVED + int(cipher_perm[t - N_RESERVED]) for t in src.ids
        ))
    if kind in ("copy", "cont_label"):
        return src
    raise UsageError(f"unknown task kind {kind!r}")


def generate(spec: TaskSpec) -> TaskData:
    """Materialize a TaskSpec; same spec (seed included) → same data."""
    rng = RngStream(spec.seed, (0,))
    vocab = Vocab.make(spec.vocab_size)
    clean = _draw_clean_sources(spec, rng.split(0))

    cipher_perm = None
    prototypes = None
    if spec.kind == "cipher":
        cipher_perm = rng.split(1).permutation(spec.vocab_size)
    if spec.kind == "cont_label":
        prototypes = rng.split(2).normal((spec.vocab_size, spec.source_dim))

    noise_rng = rng.split(3)
    pairs = []
    for i, src in enumerate(clean):
        target = derive_target(spec.kind, src, cipher_perm)
        r = noise_rng.split(i)
        if spec.kind == "cont_label":
            classes = _corrupt_tokens(src, spec.noise, vocab, r.split(0))
            rows = prototypes[[t - N_RESERVED for t in classes.ids]]
            rows = rows + spec.jitter * r.split(1).normal(rows.shape)
            pairs.append((VecSeq(rows), target))
        else:
            pairs.append((_corrupt_tokens(src, spec.noise, vocab, r), target))

    train = pairs[: spec.n_train]
    dev = pairs[spec.n_train: spec.n_train + spec.n_dev]
    test = pairs[spec.n_train + spec.n_dev:]
    return TaskData(spec, vocab, train, dev, test, cipher_perm, prototypes)


# ---------------------------------------------------------------------------
# vocabulary files


def write_vocab(vocab: Vocab, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(vocab.tokens) + "\n")


def read_vocab(path) -> Vocab:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    seen: dict = {}
    for lineno, token in enumerate(lines, 1):
        if not token or token != token.strip() or " " in token:
            raise ParseError(f"{path}:{lineno}: malformed token {token!r}")
        if token in seen:
            raise ParseError(
                f"{path}:{lineno}: duplicate token {token!r} "
                f"(first on line {seen[token]})"
            )
        seen[token] = lineno
    if len(lines) < N_RESERVED + 1:
        raise ParseError(f"{path}: need 3 reserved tokens plus content, "
                         f"got {len(lines)} lines")
    return Vocab(tuple(lines))


# ---------------------------------------------------------------------------
# discrete datasets: one TAB-separated pair per line


def _render_side(seq: TokenSeq, vocab: Vocab) -> str:
    if not isinstance(seq, TokenSeq) or not seq.terminated:
        raise UsageError("dataset files hold terminated token sequences only")
    return " ".join(vocab.token_of(i) for i in seq.ids)


def write_dataset(dataset, path, vocab: Vocab) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for src, tgt in dataset:
            fh.write(f"{_render_side(src, vocab)}\t{_render_side(tgt, vocab)}\n")


def _parse_side(text: str, vocab: Vocab, path, lineno: int) -> TokenSeq:
    ids = []
    for token in text.split():
        try:
            ids.append(vocab.id_of(token))
        except UsageError:
            raise ParseError(
                f"{path}:{lineno}: token {token!r} not in the vocabulary"
            ) from None
    try:
        return TokenSeq(tuple(ids))
    except UsageError as exc:
        raise ParseError(f"{path}:{lineno}: {exc}") from None


def read_dataset(path, vocab: Vocab) -> list:
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh.read().splitlines(), 1):
            if line.count("\t") != 1:
                raise ParseError(
                    f"{path}:{lineno}: expected one TAB between source "
                    "and target"
                )
            src_text, tgt_text = line.split("\t")
            pairs.append((_parse_side(src_text, vocab, path, lineno),
                          _parse_side(tgt_text, vocab, path, lineno)))
    return pairs


# ---------------------------------------------------------------------------
# continuous datasets: binary records behind a magic header


def write_cont_dataset(dataset, path) -> None:
    with open(path, "wb") as fh:
        fh.write(VSEQ_MAGIC)
        for src, tgt in dataset:
            if not isinstance(src, VecSeq):
                raise UsageError("continuous sources must be VecSeqs")
            if not isinstance(tgt, TokenSeq) or not tgt.terminated:
                raise UsageError(
                    "dataset files hold terminated token sequences only"
                )
            rows, width = src.vectors.shape
            fh.write(struct.pack("<ii", rows, width))
            fh.write(src.vectors.astype("<f8").tobytes())
            fh.write(struct.pack("<i", len(tgt.ids)))
            fh.write(struct.pack(f"<{len(tgt.ids)}i", *tgt.ids))


def _read_exact(fh, n: int, path, record: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise ParseError(f"{path}: record {record} truncated")
    return buf


def read_cont_dataset(path) -> list:
    pairs = []
    with open(path, "rb") as fh:
        if fh.read(len(VSEQ_MAGIC)) != VSEQ_MAGIC:
            raise ParseError(f"{path}: bad magic, not a continuous dataset")
        record = 0
        while True:
            head = fh.read(8)
            if not head:
                return pairs
            if len(head) != 8:
                raise ParseError(f"{path}: record {record} truncated")
            rows, width = struct.unpack("<ii", head)
            if rows < 1 or width < 1:
                raise ParseError(
                    f"{path}: record {record} has shape ({rows}, {width})"
                )
            mat = np.frombuffer(
                _read_exact(fh, 8 * rows * width, path, record), dtype="<f8"
            ).reshape(rows, width)
            (count,) = struct.unpack("<i", _read_exact(fh, 4, path, record))
            if count < 0:
                raise ParseError(
                    f"{path}: record {record} has target length {count}"
                )
            ids = struct.unpack(
                f"<{count}i", _read_exact(fh, 4 * count, path, record)
            )
            try:
                pairs.append((VecSeq(mat.copy()), TokenSeq(ids)))
            except UsageError as exc:
                raise ParseError(f"{path}: record {record}: {exc}") from None
            record += 1
