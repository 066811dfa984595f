"""Central-difference verification of reverse-mode gradients."""
from __future__ import annotations

from typing import Callable, NamedTuple, Sequence

import numpy as np

from .tensor import Parameter, Tape, Tensor


class GradCheckResult(NamedTuple):
    max_rel_error: float
    worst_param: str
    worst_index: int
    checked: int

    def __float__(self):
        return self.max_rel_error


def grad_check(fn: Callable[[], Tensor], params: Sequence[Parameter], h: float = 1e-5,
               max_coords: int | None = None, seed: int = 0) -> GradCheckResult:
    """Compare tape gradients of scalar ``fn()`` with central differences.

    Every coordinate is checked unless a tensor has more than ``max_coords``
    entries, in which case a random subset of that size is used. The error
    per coordinate is |a - n| / max(|a|, |n|, 1e-8). Parameters must be
    float64.
    """
    rng = np.random.default_rng(seed)
    for p in params:
        if p.dtype != np.float64:
            raise TypeError(f"grad_check needs float64 parameters ({p.name} is {p.dtype})")
        p.grad = None
    with Tape() as tape:
        loss = fn()
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("non-finite loss in grad_check")
    tape.backward(loss)

    worst = (0.0, "", -1)
    checked = 0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        p.data = np.ascontiguousarray(p.data)
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            f_plus = float(fn().data)
            flat[c] = orig - h
            f_minus = float(fn().data)
            flat[c] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise FloatingPointError(f"non-finite value perturbing {p.name}[{c}]")
            numeric = (f_plus - f_minus) / (2 * h)
            a = float(analytic.reshape(-1)[c])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            checked += 1
            if err > worst[0]:
                worst = (err, p.name, int(c))
    return GradCheckResult(worst[0], worst[1], worst[2], checked)
