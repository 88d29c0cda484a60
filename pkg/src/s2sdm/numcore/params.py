"""Named dense parameter collections and the plain SGD update."""

from __future__ import annotations

import numpy as np

from ..errors import NumericalError, UsageError


class ParamStore:
    """Insertion-ordered mapping of name -> float64 ndarray.

    Iteration order is insertion order, which fixes the coordinate order
    used by finite-difference checks, serialization, and SGD, so results
    are reproducible bit for bit.
    """

    __slots__ = ("_entries",)

    def __init__(self, entries=None) -> None:
        self._entries: dict[str, np.ndarray] = {}
        if entries is not None:
            items = entries.items() if hasattr(entries, "items") else entries
            for name, value in items:
                self.add(name, value)

    def add(self, name: str, value) -> np.ndarray:
        if not isinstance(name, str) or not name:
            raise UsageError("parameter name must be a non-empty string")
        if name in self._entries:
            raise UsageError(f"duplicate parameter name {name!r}")
        arr = np.array(value, dtype=np.float64, order="C")
        if not np.all(np.isfinite(arr)):
            raise NumericalError(f"parameter {name!r} has non-finite entries")
        self._entries[name] = arr
        return arr

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self._entries[name]
        except KeyError:
            raise UsageError(f"unknown parameter {name!r}") from None

    def __setitem__(self, name: str, value) -> None:
        if name not in self._entries:
            raise UsageError(f"unknown parameter {name!r}")
        arr = np.array(value, dtype=np.float64, order="C")
        if arr.shape != self._entries[name].shape:
            raise UsageError(
                f"shape mismatch for {name!r}: "
                f"{arr.shape} vs {self._entries[name].shape}"
            )
        if not np.all(np.isfinite(arr)):
            raise NumericalError(f"parameter {name!r} has non-finite entries")
        self._entries[name] = arr

    def __contains__(self, name) -> bool:
        return name in self._entries

    def __iter__(self):
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list[str]:
        return list(self._entries)

    def items(self):
        return self._entries.items()

    def values(self):
        return self._entries.values()

    def copy(self) -> "ParamStore":
        return ParamStore((n, v.copy()) for n, v in self._entries.items())

    def zeros_like(self) -> "ParamStore":
        return ParamStore((n, np.zeros_like(v)) for n, v in self._entries.items())

    def shape_compatible(self, other: "ParamStore") -> bool:
        if self.names() != other.names():
            return False
        return all(self[n].shape == other[n].shape for n in self._entries)

    def n_coords(self) -> int:
        return sum(v.size for v in self._entries.values())

    def flat(self) -> np.ndarray:
        """All coordinates concatenated in insertion order."""
        if not self._entries:
            return np.zeros(0)
        return np.concatenate([v.ravel() for v in self._entries.values()])

    def __repr__(self) -> str:  # pragma: no cover
        inner = ", ".join(f"{n}:{v.shape}" for n, v in self._entries.items())
        return f"ParamStore({inner})"


def add_stores(a: ParamStore, b: ParamStore) -> ParamStore:
    """Elementwise sum of two shape-compatible stores."""
    if not a.shape_compatible(b):
        raise UsageError("stores are not shape-compatible")
    return ParamStore((n, a[n] + b[n]) for n in a.names())


def scale_store(a: ParamStore, c: float) -> ParamStore:
    return ParamStore((n, c * v) for n, v in a.items())


def sgd_step(params: ParamStore, grads: ParamStore, eta: float) -> ParamStore:
    """Return params - eta * grads; inputs are left untouched."""
    if not np.isfinite(eta) or eta <= 0.0:
        raise UsageError(f"step size must be positive, got {eta!r}")
    if not params.shape_compatible(grads):
        raise UsageError("gradients are not shape-compatible with parameters")
    out = ParamStore()
    for name, value in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"gradient for {name!r} has non-finite entries")
        out.add(name, value - eta * g)
    return out
