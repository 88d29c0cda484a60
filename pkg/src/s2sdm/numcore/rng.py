"""Deterministic splittable randomness.

Every draw is keyed by (seed, path, call index): the triple is hashed
with a SplitMix64-style finalizer into a Philox key, and the draw comes
from a fresh generator under that key. Consequences that the rest of the
package leans on:

* the same stream produces the same draw sequence on every run;
* split(i) derives an independent child stream and never advances or
  otherwise mutates the parent;
* sibling streams (different path suffixes) are statistically
  independent because their keys differ in the mixed input.
"""

from __future__ import annotations

import numpy as np

from ..errors import UsageError

_MASK64 = (1 << 64) - 1


def _splitmix64(z: int) -> int:
    z = (z + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def _mix_words(words) -> tuple[int, int]:
    """Fold a sequence of ints into two 64-bit key words."""
    h = 0x243F6A8885A308D3  # arbitrary non-zero start
    for w in words:
        h = _splitmix64(h ^ (int(w) & _MASK64))
    lo = _splitmix64(h)
    hi = _splitmix64(lo)
    return lo, hi


class RngStream:
    """Counter-based random stream addressed by (seed, path)."""

    __slots__ = ("seed", "path", "calls")

    def __init__(self, seed: int, path: tuple[int, ...] = (), calls: int = 0) -> None:
        self.seed = int(seed)
        self.path = tuple(int(p) for p in path)
        self.calls = int(calls)

    def split(self, index: int) -> "RngStream":
        """Child stream at path + (index,); self is not touched."""
        return RngStream(self.seed, self.path + (int(index),))

    def state(self) -> tuple[int, tuple[int, ...], int]:
        return (self.seed, self.path, self.calls)

    @classmethod
    def from_state(cls, state) -> "RngStream":
        seed, path, calls = state
        return cls(seed, path, calls)

    def _generator(self) -> np.random.Generator:
        lo, hi = _mix_words((self.seed, len(self.path), *self.path, self.calls))
        self.calls += 1
        key = np.array([lo, hi], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))

    # -- draws ------------------------------------------------------------

    def uniform(self, size=None):
        """Uniform on [0, 1); float for size=None, else ndarray."""
        g = self._generator()
        if size is None:
            return float(g.random())
        return g.random(size)

    def normal(self, size=None):
        """Standard normal; float for size=None, else ndarray."""
        g = self._generator()
        if size is None:
            return float(g.standard_normal())
        return g.standard_normal(size)

    def integers(self, low: int, high: int, size=None):
        """Uniform integers in [low, high)."""
        if high <= low:
            raise UsageError("integers needs high > low")
        g = self._generator()
        if size is None:
            return int(g.integers(low, high))
        return g.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        if n < 0:
            raise UsageError("permutation needs n >= 0")
        return self._generator().permutation(n)

    def categorical(self, probs) -> int:
        """Index i with probability probs[i]; probs must sum to 1 (1e-9)."""
        p = np.asarray(probs, dtype=np.float64)
        if p.ndim != 1 or p.size == 0:
            raise UsageError("categorical expects a non-empty 1-D array")
        if np.any(p < 0.0) or not np.all(np.isfinite(p)):
            raise UsageError("categorical probabilities must be finite and >= 0")
        total = p.sum()
        if abs(total - 1.0) > 1e-9:
            raise UsageError(f"categorical probabilities sum to {total!r}, not 1")
        cum = np.cumsum(p / total)
        u = self.uniform()
        idx = int(np.searchsorted(cum, u, side="right"))
        return min(idx, p.size - 1)

    def __repr__(self) -> str:  # pragma: no cover
        return f"RngStream(seed={self.seed}, path={self.path}, calls={self.calls})"
