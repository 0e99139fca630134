"""Central finite-difference checks and the registry of composites to check."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .tensor import Tensor, grad

# name -> zero-arg builder returning (f, params, names-to-check or None)
REGISTRY: dict[str, Callable] = {}


def register_composite(name: str):
    def deco(builder):
        REGISTRY[name] = builder
        return builder
    return deco


@dataclass
class GradCheckResult:
    max_error: float
    worst: str
    n_checked: int

    @property
    def ok(self) -> bool:
        return self.max_error < 1e-3


def finite_difference(f, params: dict, name: str, index: tuple, h: float = 1e-4) -> float:
    base = params[name]
    out = []
    for sign in (1.0, -1.0):
        arr = base.data.copy()
        arr[index] += sign * h
        trial = dict(params)
        trial[name] = Tensor(arr, requires_grad=True)
        out.append(f(trial).item())
    return (out[0] - out[1]) / (2.0 * h)


def check_grad(f, params: dict, names=None, h: float = 1e-4, max_entries: int | None = None,
               rng=None) -> GradCheckResult:
    """Compare analytic gradients against central differences.

    Error per entry is ``|analytic - fd| / max(1, |fd|)``. With ``max_entries`` set,
    a random subset of entries per tensor is checked.
    """
    names = [n for n in (params if names is None else names) if params[n].requires_grad]
    analytic = grad(f, params, names)
    worst, where, count = 0.0, "", 0
    for n in names:
        idx = list(np.ndindex(params[n].shape))
        if max_entries is not None and len(idx) > max_entries:
            rng = rng if rng is not None else np.random.default_rng(0)
            idx = [idx[i] for i in rng.choice(len(idx), max_entries, replace=False)]
        for ix in idx:
            fd = finite_difference(f, params, n, ix, h)
            err = abs(analytic[n][ix] - fd) / max(1.0, abs(fd))
            count += 1
            if err > worst:
                worst, where = err, f"{n}{list(ix)}"
    return GradCheckResult(worst, where, count)
