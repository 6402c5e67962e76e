"""Randomised property checks for the soft-threshold sparsifier.

Four properties are checked over many random trials, each trial drawing a
fresh ``[N, C, H, W]`` field and per-channel thresholds:

support nesting
    raising every threshold can only shrink the support (exact subset).
non-expansiveness
    ``||S(u) - S(u')||_F <= ||u - u'||_F`` up to an absolute slack of 1e-12.
exact zeros
    every entry with ``|u| <= lam`` comes out bit-equal to ``0.0``.
shrinkage
    ``|S(u)| <= max(|u| - lam, 0)`` and no sign flips.

Trials deliberately plant entries exactly on, and one ulp either side of,
the thresholds so the boundary cases are exercised rather than left to luck.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ContractError
from .gate import soft_threshold
from .tensor import Tensor, no_grad

PROPERTIES = ("support_nesting", "non_expansive", "exact_zero", "shrinkage")
SABOTAGE_MODES = ("shrink-off",)
SLACK = 1e-12

Operator = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass
class PropertyResult:
    name: str
    trials: int = 0
    violations: int = 0
    example: str | None = None

    @property
    def passed(self) -> bool:
        return self.trials > 0 and self.violations == 0

    def record(self, ok: bool, detail: str) -> None:
        self.trials += 1
        if not ok:
            self.violations += 1
            if self.example is None:
                self.example = detail


@dataclass
class TheoremReport:
    results: dict[str, PropertyResult] = field(default_factory=dict)
    seconds: float = 0.0
    seed: int = 0
    sabotage: str | None = None

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results.values())

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "sabotage": self.sabotage,
            "seconds": round(self.seconds, 3),
            "passed": self.passed,
            "properties": {
                k: {"trials": r.trials, "violations": r.violations, "example": r.example}
                for k, r in self.results.items()
            },
        }


def _library_operator(u: np.ndarray, lam: np.ndarray) -> np.ndarray:
    with no_grad():
        return soft_threshold(Tensor(u), Tensor(lam)).data


def _hard_threshold(u: np.ndarray, lam: np.ndarray) -> np.ndarray:
    # keeps the selection step, drops the shrink
    lam_b = lam.reshape(1, -1, 1, 1)
    return np.where(np.abs(u) > lam_b, u, 0.0)


def operator_for(sabotage: str | None) -> Operator:
    if sabotage is None:
        return _library_operator
    if sabotage == "shrink-off":
        return _hard_threshold
    raise ContractError(f"unknown sabotage mode {sabotage!r}; expected one of {SABOTAGE_MODES}")


def _draw_field(rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    n, c = int(rng.integers(1, 3)), int(rng.integers(1, 5))
    h, w = int(rng.integers(1, 5)), int(rng.integers(1, 5))
    scale = 10.0 ** rng.uniform(-3, 1)
    u = rng.standard_normal((n, c, h, w)) * scale
    lam = np.abs(rng.standard_normal(c)) * scale
    lam[rng.random(c) < 0.1] = 0.0
    # plant boundary values: exactly +-lam and one ulp either side
    lam_b = np.broadcast_to(lam.reshape(1, c, 1, 1), u.shape)
    pick = rng.random(u.shape)
    sgn = np.where(rng.random(u.shape) < 0.5, -1.0, 1.0)
    u = np.where(pick < 0.10, sgn * lam_b, u)
    u = np.where((pick >= 0.10) & (pick < 0.15), sgn * np.nextafter(lam_b, np.inf), u)
    u = np.where((pick >= 0.15) & (pick < 0.20), sgn * np.nextafter(lam_b, 0.0), u)
    u = np.where((pick >= 0.20) & (pick < 0.23), 0.0, u)
    return u, lam


def check_support_nesting(op: Operator, u, lam, rng) -> tuple[bool, str]:
    lam_hi = lam + np.abs(rng.standard_normal(lam.shape)) * (rng.random() < 0.9) * lam.mean()
    lo, hi = op(u, lam), op(u, lam_hi)
    ok = not np.any((hi != 0) & (lo == 0))
    return ok, f"support at lam={lam_hi.tolist()} not inside support at lam={lam.tolist()}"


def check_non_expansive(op: Operator, u, lam, rng) -> tuple[bool, str]:
    delta = rng.standard_normal(u.shape) * (10.0 ** rng.uniform(-6, 0)) * max(float(lam.max()), 1e-3)
    u2 = u + delta
    lhs = float(np.linalg.norm(op(u, lam) - op(u2, lam)))
    rhs = float(np.linalg.norm(u - u2))
    return lhs <= rhs + SLACK, f"||S(u)-S(u')||={lhs!r} > ||u-u'||={rhs!r}"


def check_exact_zero(op: Operator, u, lam, rng) -> tuple[bool, str]:
    z = op(u, lam)
    below = np.abs(u) <= lam.reshape(1, -1, 1, 1)
    bad = below & ((z != 0.0) | np.signbit(z))
    return not bad.any(), f"{int(bad.sum())} sub-threshold entries are not +0.0"


def check_shrinkage(op: Operator, u, lam, rng) -> tuple[bool, str]:
    z = op(u, lam)
    bound = np.maximum(np.abs(u) - lam.reshape(1, -1, 1, 1), 0.0)
    flips = z * u < 0
    over = np.abs(z) > bound
    return not (flips.any() or over.any()), f"{int(over.sum())} entries over |u|-lam, {int(flips.sum())} sign flips"


CHECKS = {
    "support_nesting": check_support_nesting,
    "non_expansive": check_non_expansive,
    "exact_zero": check_exact_zero,
    "shrinkage": check_shrinkage,
}


def run_suite(trials: int = 10_000, seed: int = 0, sabotage: str | None = None) -> TheoremReport:
    """Run every property ``trials`` times on seeded random fields."""
    if trials < 1:
        raise ContractError("trials must be positive")
    op = operator_for(sabotage)
    rng = np.random.default_rng(seed)
    report = TheoremReport({name: PropertyResult(name) for name in PROPERTIES}, seed=seed, sabotage=sabotage)
    start = time.perf_counter()
    for _ in range(trials):
        u, lam = _draw_field(rng)
        for name, check in CHECKS.items():
            ok, detail = check(op, u, lam, rng)
            report.results[name].record(ok, detail)
    report.seconds = time.perf_counter() - start
    return report
