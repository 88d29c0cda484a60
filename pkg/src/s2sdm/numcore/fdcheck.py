"""Central-difference checking of reverse-mode gradients.

The comparison runs the program untaped at perturbed parameters, so a
passing check certifies the taped and untaped paths agree as well.

The numeric side is evaluated in numpy long double (80-bit extended on
x86-64 Linux). Ordinary float64 evaluation carries rounding noise of
roughly 1e-10 into a step-1e-5 central difference, which swamps small
but live gradient coordinates; extended precision pushes that floor
down by about three orders of magnitude. The analytic side under test
stays float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import UsageError
from .autodiff import eval_with_grad, value_of
from .params import ParamStore

REL_ERR_FLOOR = 1e-8  # denominator floor so near-zero coords compare absolutely


@dataclass
class FdCheckReport:
    max_rel_err: float
    worst_name: str
    worst_index: int
    n_coords: int
    value: float
    per_entry: dict[str, float] = field(default_factory=dict)

    def worst_coord(self) -> str:
        return f"{self.worst_name}[{self.worst_index}]"


def fd_check(program, params: ParamStore, step: float, *inputs) -> FdCheckReport:
    """Compare reverse-mode gradients against central differences.

    Every coordinate of every parameter is perturbed by +-step; the
    relative error is |a - n| / max(|a|, |n|, 1e-8).
    """
    if not np.isfinite(step) or step <= 0.0:
        raise UsageError(f"fd step must be positive, got {step!r}")
    if len(params) == 0:
        raise UsageError("fd_check needs at least one parameter")

    value, grads = eval_with_grad(program, params, *inputs)

    base = {n: arr.astype(np.longdouble) for n, arr in params.items()}
    step_ld = np.longdouble(step)
    max_rel = -1.0
    worst_name, worst_index = "", 0
    per_entry: dict[str, float] = {}
    n_coords = 0

    def raw_value(patched):
        return value_of(program(patched, *inputs))

    for name, arr in base.items():
        entry_max = 0.0
        flat_grad = grads[name].ravel()
        for i in range(arr.size):
            patched = dict(base)

            bumped = arr.copy().ravel()
            bumped[i] += step_ld
            patched[name] = bumped.reshape(arr.shape)
            hi = raw_value(patched)

            bumped = arr.copy().ravel()
            bumped[i] -= step_ld
            patched[name] = bumped.reshape(arr.shape)
            lo = raw_value(patched)

            numeric = float((hi - lo) / (2.0 * step_ld))
            analytic = float(flat_grad[i])
            rel = abs(analytic - numeric) / max(
                abs(analytic), abs(numeric), REL_ERR_FLOOR
            )
            entry_max = max(entry_max, rel)
            if rel > max_rel:
                max_rel = rel
                worst_name, worst_index = name, i
            n_coords += 1
        per_entry[name] = entry_max

    return FdCheckReport(
        max_rel_err=max_rel,
        worst_name=worst_name,
        worst_index=worst_index,
        n_coords=n_coords,
        value=value,
        per_entry=per_entry,
    )
