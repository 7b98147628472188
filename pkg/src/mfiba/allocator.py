"""Importance-weighted bit allocation across pyramid scales.

Per scale ``i`` (pooled scale counted as ``n + 1``) the Lagrangian term is

    J_i(R) = w_i * alpha * R**-beta + lambda' * R / k**i

which is convex for ``R > 0``; its stationary point gives the closed-form
budget ``(w_i * alpha * beta * k**i / lambda') ** (1 / (beta + 1))``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from mfiba.codec import PhiVector
from mfiba.rdmodel import RatePhiModel

__all__ = [
    "AllocationProblem",
    "RateBudget",
    "PhiAllocation",
    "InfeasibleTargetError",
    "scale_terms",
    "objective",
    "closed_form_budget",
    "brute_force_budget",
    "solve_for_target",
    "budget_to_phi",
]

DEFAULT_FLOOR = 0.01


class InfeasibleTargetError(ValueError):
    pass


@dataclass(frozen=True)
class AllocationProblem:
    """Inputs of one allocation. Set exactly one of ``lambda_prime`` / ``target_total_bits``.

    ``element_counts`` defaults to ``S0 / k**i``; it only matters for totals
    in bits.
    """

    weights: tuple[float, ...]
    alpha: float
    beta: float
    k: float = 4.0
    S0: int = 1
    lambda_prime: float | None = None
    target_total_bits: float | None = None
    element_counts: tuple[int, ...] | None = None
    rate_floor: float = DEFAULT_FLOOR

    def __post_init__(self):
        w = tuple(float(v) for v in self.weights)
        object.__setattr__(self, "weights", w)
        if not w or any(not (v >= 0 and math.isfinite(v)) for v in w):
            raise ValueError("weights must be finite and nonnegative")
        if not (self.alpha > 0 and self.beta > 0 and self.k > 0 and self.S0 > 0):
            raise ValueError("alpha, beta, k and S0 must be positive")
        if (self.lambda_prime is None) == (self.target_total_bits is None):
            raise ValueError("set exactly one of lambda_prime and target_total_bits")
        if self.lambda_prime is not None and not self.lambda_prime > 0:
            raise ValueError("lambda_prime must be positive")
        if self.target_total_bits is not None and not self.target_total_bits > 0:
            raise ValueError("target_total_bits must be positive")
        if self.element_counts is not None:
            counts = tuple(int(s) for s in self.element_counts)
            if len(counts) != len(w) or any(s <= 0 for s in counts):
                raise ValueError("element_counts must be positive, one per scale")
            object.__setattr__(self, "element_counts", counts)
        if not self.rate_floor > 0:
            raise ValueError("rate_floor must be positive")

    @property
    def num_scales(self) -> int:
        return len(self.weights)

    @property
    def size_factors(self) -> np.ndarray:
        """``k**i`` per scale."""
        return self.k ** np.arange(self.num_scales, dtype=np.float64)

    @property
    def counts(self) -> np.ndarray:
        if self.element_counts is not None:
            return np.asarray(self.element_counts, dtype=np.float64)
        return self.S0 / self.size_factors

    def with_lambda(self, lambda_prime: float) -> "AllocationProblem":
        return replace(self, lambda_prime=float(lambda_prime), target_total_bits=None)


@dataclass(frozen=True)
class RateBudget:
    R: tuple[float, ...]
    element_counts: tuple[float, ...]
    k: float

    @property
    def total_bits(self) -> float:
        return float(np.dot(self.R, self.element_counts))

    @property
    def bpp(self) -> float:
        return float(np.sum(np.asarray(self.R) / self.k ** np.arange(len(self.R))))


@dataclass(frozen=True)
class PhiAllocation:
    phis: PhiVector
    clamped: tuple[bool, ...]


def _budget(problem: AllocationProblem, R) -> RateBudget:
    return RateBudget(tuple(float(r) for r in R), tuple(float(s) for s in problem.counts), problem.k)


def scale_terms(problem: AllocationProblem, R, lambda_prime: float | None = None) -> np.ndarray:
    """Per-scale Lagrangian terms ``J_i(R_i)``."""
    lam = problem.lambda_prime if lambda_prime is None else lambda_prime
    R = np.asarray(R, dtype=np.float64)
    w = np.asarray(problem.weights)
    return w * problem.alpha * R ** (-problem.beta) + lam * R / problem.size_factors


def objective(problem: AllocationProblem, R) -> float:
    return float(np.sum(scale_terms(problem, R)))


def _closed_form_rates(problem: AllocationProblem, lambda_prime: float) -> np.ndarray:
    w = np.asarray(problem.weights)
    b = problem.beta
    with np.errstate(divide="ignore"):
        R = (w * problem.alpha * b * problem.size_factors / lambda_prime) ** (1.0 / (b + 1.0))
    return np.maximum(R, problem.rate_floor)


def closed_form_budget(problem: AllocationProblem) -> RateBudget:
    """Optimal per-scale budgets at fixed ``lambda_prime``.

    Budgets below the rate floor (including every zero-weight scale) are
    raised to it, which is the constrained minimizer of each convex term.
    """
    if problem.lambda_prime is None:
        raise ValueError("closed_form_budget needs lambda_prime; use solve_for_target for a bit target")
    return _budget(problem, _closed_form_rates(problem, problem.lambda_prime))


def brute_force_budget(problem: AllocationProblem, step: float = 1e-3, r_max: float | None = None) -> RateBudget:
    """Grid search of each scale's term over ``[floor, r_max]`` in ``step`` increments.

    Without ``r_max`` the upper end is found per scale by doubling until the
    term starts increasing. Serves as an oracle for :func:`closed_form_budget`.
    """
    if not step > 0:
        raise ValueError("grid step must be positive")
    if problem.lambda_prime is None:
        raise ValueError("brute_force_budget needs lambda_prime")
    lam = problem.lambda_prime
    floor = problem.rate_floor
    w = np.asarray(problem.weights)
    kf = problem.size_factors

    def term(i, r):
        return w[i] * problem.alpha * r ** (-problem.beta) + lam * r / kf[i]

    best = []
    for i in range(problem.num_scales):
        hi = r_max
        if hi is None:
            hi = max(floor, 1.0)
            while term(i, 2.0 * hi) <= term(i, hi):
                hi *= 2.0
            hi *= 2.0
        count = int(math.floor((hi - floor) / step)) + 1
        if count < 1:
            raise ValueError("empty grid")
        arg_r, arg_j = floor, math.inf
        for start in range(0, count, 1 << 20):
            r = floor + step * np.arange(start, min(count, start + (1 << 20)), dtype=np.float64)
            vals = term(i, r)
            j = int(np.argmin(vals))
            if vals[j] < arg_j:
                arg_j, arg_r = float(vals[j]), float(r[j])
        best.append(arg_r)
    return _budget(problem, best)


def _total_bits(problem: AllocationProblem, lambda_prime: float) -> float:
    return float(np.dot(_closed_form_rates(problem, lambda_prime), problem.counts))


def solve_for_target(
    problem: AllocationProblem, rel_tol: float = 1e-4, max_iter: int = 100
) -> tuple[float, RateBudget]:
    """Bisect ``lambda_prime`` so the closed-form budget meets ``target_total_bits``.

    Total bits fall strictly as ``lambda_prime`` grows (until every scale sits
    at the floor). The returned budget never exceeds the target.
    """
    target = problem.target_total_bits
    if target is None:
        raise ValueError("solve_for_target needs target_total_bits")
    floor_total = problem.rate_floor * float(np.sum(problem.counts))
    if target <= floor_total:
        raise InfeasibleTargetError(f"target {target:.6g} bits is at or below the floor total {floor_total:.6g}")
    if not any(w > 0 for w in problem.weights):
        raise InfeasibleTargetError("all weights are zero; every budget sits at the floor")

    lo, hi = 1e-9, 1e9
    while _total_bits(problem, lo) < target:
        lo /= 1e3
        if lo < 1e-300:
            raise InfeasibleTargetError("could not bracket the target from below")
    while _total_bits(problem, hi) > target:
        hi *= 1e3
        if hi > 1e300:
            raise InfeasibleTargetError("could not bracket the target from above")

    for _ in range(max_iter):
        total_hi = _total_bits(problem, hi)
        if abs(total_hi - target) / target < rel_tol:
            break
        mid = math.sqrt(lo * hi)
        if _total_bits(problem, mid) > target:
            lo = mid
        else:
            hi = mid
    return hi, _budget(problem, _closed_form_rates(problem, hi))


def budget_to_phi(
    budget: RateBudget | Sequence[float], rpm: RatePhiModel, bounds: tuple[float, float] = (0.0, 12.0)
) -> PhiAllocation:
    """Invert the rate-phi model, ``phi_i = (R_i - b_i) / a_i``, clamped to ``bounds``."""
    R = np.asarray(budget.R if isinstance(budget, RateBudget) else budget, dtype=np.float64)
    if len(rpm) != R.size:
        raise ValueError(f"rate-phi model covers {len(rpm)} scales, budget has {R.size}")
    a = np.asarray(rpm.a)
    if np.any(~(a > 0)):
        raise ValueError("rate-phi slopes must be positive")
    lo, hi = bounds
    raw = (R - np.asarray(rpm.b)) / a
    phis = np.clip(raw, lo, hi)
    clamped = tuple(bool(c) for c in (raw < lo) | (raw > hi))
    return PhiAllocation(PhiVector(tuple(phis), lo, hi), clamped)
