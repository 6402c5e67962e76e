"""Central finite-difference gradient checks."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad, record_kinks


@dataclass
class GradcheckResult:
    name: str
    max_rel_err: float
    checked: int
    skipped: int = 0

    def passed(self, tol: float) -> bool:
        return self.checked > 0 and self.max_rel_err < tol


def rel_err(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(1.0, abs(numeric))


def _same_pattern(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def gradcheck(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    *,
    name: str = "",
    eps: float = 1e-5,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradcheckResult:
    """Compare backprop gradients of scalar ``fn()`` against central differences.

    ``max_entries`` samples that many coordinates per input instead of all of
    them.  A coordinate whose two probes land on different pieces of any
    piecewise-linear op (see :func:`record_kinks`) is skipped and counted.
    """
    for t in inputs:
        t.grad = None
    loss = fn()
    loss.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    worst, checked, skipped = 0.0, 0, 0
    with no_grad():
        for t, ga in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                idx = (rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False)
            for k in idx:
                orig = flat[k]
                flat[k] = orig + eps
                with record_kinks() as plus:
                    fp = fn().item()
                flat[k] = orig - eps
                with record_kinks() as minus:
                    fm = fn().item()
                flat[k] = orig
                if not _same_pattern(plus, minus):
                    skipped += 1
                    continue
                worst = max(worst, rel_err(ga.reshape(-1)[k], (fp - fm) / (2 * eps)))
                checked += 1
    return GradcheckResult(name, worst, checked, skipped)


def projected(out_fn: Callable[[], Tensor], seed: int = 0) -> Callable[[], Tensor]:
    """Turn a tensor-valued function into a scalar one via a fixed random projection."""
    cache: dict[str, Tensor] = {}

    def fn() -> Tensor:
        out = out_fn()
        if "w" not in cache:
            cache["w"] = Tensor(np.random.default_rng(seed).standard_normal(out.shape))
        return (out * cache["w"]).sum()

    return fn
