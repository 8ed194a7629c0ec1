"""Central finite-difference gradient checking."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    n_checked: int
    worst: tuple[int, int] | None = None  # (input index, flat coordinate)

    def __str__(self) -> str:
        verdict = "pass" if self.passed else "FAIL"
        return f"{verdict}: max_rel_err={self.max_rel_err:.3e} over {self.n_checked} coords"


REL_FLOOR = 1e-8


def rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), REL_FLOOR)


def grad_check(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-5,
    tol: float = 1e-4,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare autodiff gradients of scalar ``f(*inputs)`` with central differences.

    Only inputs with ``requires_grad`` are probed. ``max_coords`` limits the
    number of coordinates probed per input (chosen with ``rng``).
    """
    for t in inputs:
        t.grad = None
    f(*inputs).backward()
    analytic = [None if t.grad is None else t.grad.copy() for t in inputs]

    worst, worst_at, n = 0.0, None, 0
    for i, t in enumerate(inputs):
        if not t.requires_grad:
            continue
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            rng = rng or np.random.default_rng(0)
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        ga = np.zeros(flat.size) if analytic[i] is None else analytic[i].reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            fp = f(*inputs).item()
            flat[c] = orig - eps
            fm = f(*inputs).item()
            flat[c] = orig
            numeric = (fp - fm) / (2.0 * eps)
            err = rel_err(ga[c], numeric)
            n += 1
            if err > worst:
                worst, worst_at = err, (i, int(c))
    for t in inputs:
        t.grad = None
    return GradCheckReport(worst, worst <= tol, n, worst_at)
