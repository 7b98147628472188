"""Multiscale feature importance prediction.

Each scale is replaced, one at a time, by its precoded version at ``m``
quality levels; the task loss of every substitution forms a loss matrix
whose per-level normalized columns are averaged into a profile ``d``. The
predicted importance is ``d`` itself, optionally refined by a line search.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from mfiba.allocator import AllocationProblem, budget_to_phi, closed_form_budget
from mfiba.codec import CodecBackend, CodecConfig, checked_rate
from mfiba.pyramid import FeaturePyramid
from mfiba.rdmodel import LossRateModel, RatePhiModel
from mfiba.task import TaskEvaluator

__all__ = [
    "PrecodeGrid",
    "LossMatrix",
    "TaskLossProfile",
    "ImportanceWeights",
    "AllocationContext",
    "EfficiencyMetric",
    "FinetuneResult",
    "default_phi_levels",
    "precode_grid",
    "loss_matrix",
    "normalize_and_average",
    "predict_weights",
    "finetune_weights",
    "line_search",
]

log = logging.getLogger(__name__)


def default_phi_levels(m: int = 8, config: CodecConfig | None = None) -> tuple[float, ...]:
    config = config or CodecConfig()
    return tuple(float(v) for v in np.linspace(config.phi_min + 1, config.phi_max - 1, m))


@dataclass
class PrecodeGrid:
    """Reconstructions of ``p`` at each quality level plus measured rates.

    ``rate_grid[i][q]`` is coded bits per element of scale ``i`` at level
    ``q`` (framing overhead excluded); ``overhead_bits`` holds the excluded
    per-scale constant.
    """

    reference: FeaturePyramid
    phi_levels: tuple[float, ...]
    reconstructions: list[FeaturePyramid]
    rate_grid: np.ndarray
    enc_times: list[float] = field(default_factory=list)
    dec_times: list[float] = field(default_factory=list)
    overhead_bits: tuple[int, ...] = ()

    @property
    def m(self) -> int:
        return len(self.phi_levels)

    @property
    def num_scales(self) -> int:
        return self.reference.num_scales

    def substituted(self, i: int, q: int) -> FeaturePyramid:
        """The reference pyramid with scale ``i`` taken from level ``q``."""
        return self.reference.replace_scale(i, self.reconstructions[q].scales[i].data)

    def __len__(self):
        return self.num_scales * self.m

    def rate_phi_samples(self) -> list[list[tuple[float, float]]]:
        return [[(phi, float(self.rate_grid[i, q])) for q, phi in enumerate(self.phi_levels)] for i in range(self.num_scales)]


def precode_grid(p: FeaturePyramid, backend: CodecBackend, phi_levels: Sequence[float]) -> PrecodeGrid:
    levels = tuple(float(v) for v in phi_levels)
    if len(levels) < 2:
        raise ValueError("need at least 2 quality levels")
    n_sc = p.num_scales
    recons, rates, enc_t, dec_t = [], np.zeros((n_sc, len(levels))), [], []
    overhead: tuple[int, ...] = ()
    for q, phi in enumerate(levels):
        phis = (phi,) * n_sc
        t0 = time.perf_counter()
        report = checked_rate(backend.measure_rate(p, phis))
        t1 = time.perf_counter()
        recon = backend.reconstruct(p, phis)
        t2 = time.perf_counter()
        if not recon.same_geometry(p):
            raise ValueError("backend reconstruction changed the pyramid geometry")
        rates[:, q] = report.coded_R
        overhead = report.overhead_bits
        recons.append(recon)
        enc_t.append(t1 - t0)
        dec_t.append(t2 - t1)
    return PrecodeGrid(p, levels, recons, rates, enc_t, dec_t, overhead)


@dataclass
class LossMatrix:
    """``L[i, q]``: task loss with scale ``i`` replaced by its level-``q`` reconstruction."""

    L: np.ndarray
    rate_grid: np.ndarray
    phi_levels: tuple[float, ...] = ()
    task_times: list[float] = field(default_factory=list)

    def __post_init__(self):
        self.L = np.asarray(self.L, dtype=np.float64)
        if self.L.ndim != 2 or not np.all(np.isfinite(self.L)):
            raise ValueError("loss matrix must be a finite 2-D array")
        if np.any(self.L < 0):
            raise ValueError("task losses must be nonnegative")


def loss_matrix(p: FeaturePyramid, grid: PrecodeGrid, evaluator: TaskEvaluator) -> LossMatrix:
    L = np.zeros((grid.num_scales, grid.m))
    times = []
    for i in range(grid.num_scales):
        for q in range(grid.m):
            sub = grid.substituted(i, q)
            t0 = time.perf_counter()
            L[i, q] = evaluator.task_loss(p, sub)
            times.append(time.perf_counter() - t0)
    return LossMatrix(L, grid.rate_grid.copy(), grid.phi_levels, times)


@dataclass(frozen=True)
class TaskLossProfile:
    d: tuple[float, ...]

    def __post_init__(self):
        d = np.asarray(self.d, dtype=np.float64)
        if np.any(d < 0) or not np.isclose(d.sum(), 1.0, rtol=0, atol=1e-9):
            raise ValueError("profile must be nonnegative and sum to 1")
        object.__setattr__(self, "d", tuple(float(v) for v in d))


@dataclass(frozen=True)
class ImportanceWeights:
    w: tuple[float, ...]
    provenance: str = "predicted"

    def __post_init__(self):
        w = np.asarray(self.w, dtype=np.float64)
        if w.ndim != 1 or np.any(w < 0) or not np.isclose(w.sum(), 1.0, rtol=0, atol=1e-9):
            raise ValueError("weights must be nonnegative and sum to 1")
        if self.provenance not in ("predicted", "finetuned", "ground-truth"):
            raise ValueError(f"unknown provenance {self.provenance!r}")
        object.__setattr__(self, "w", tuple(float(v) for v in w))

    def as_array(self) -> np.ndarray:
        return np.asarray(self.w)


def normalize_and_average(L: LossMatrix | np.ndarray) -> TaskLossProfile:
    """L1-normalize each quality level across scales, then average over levels.

    All-zero levels are skipped; if every level is zero the profile is uniform.
    """
    mat = L.L if isinstance(L, LossMatrix) else np.asarray(L, dtype=np.float64)
    sums = mat.sum(axis=0)
    live = sums > 0
    if not np.any(live):
        return TaskLossProfile(tuple(np.full(mat.shape[0], 1.0 / mat.shape[0])))
    d = (mat[:, live] / sums[live]).mean(axis=1)
    return TaskLossProfile(tuple(d / d.sum()))


def predict_weights(d: TaskLossProfile) -> ImportanceWeights:
    return ImportanceWeights(d.d, "predicted")


# -- finetuning ---------------------------------------------------------------


@dataclass(frozen=True)
class AllocationContext:
    """Everything needed to turn weights into codec settings at a given lambda'."""

    loss_rate: LossRateModel
    rate_phi: RatePhiModel
    k: float = 4.0
    phi_bounds: tuple[float, float] = (0.0, 12.0)
    rate_floor: float = 0.01

    def phis_for(self, p: FeaturePyramid, weights: Sequence[float], lambda_prime: float):
        problem = AllocationProblem(
            weights=tuple(weights),
            alpha=self.loss_rate.alpha,
            beta=self.loss_rate.beta,
            k=self.k,
            S0=p.S0,
            lambda_prime=lambda_prime,
            element_counts=tuple(int(s) for s in p.element_counts),
            rate_floor=self.rate_floor,
        )
        budget = closed_form_budget(problem)
        return budget, budget_to_phi(budget, self.rate_phi, self.phi_bounds)


class EfficiencyMetric:
    """Mean over ``lambda_set`` of ``task_loss + lambda' * bpp`` after allocation and coding.

    Lower is better. Scores are memoized per weight vector.
    """

    def __init__(
        self,
        p: FeaturePyramid,
        backend: CodecBackend,
        evaluator: TaskEvaluator,
        context: AllocationContext,
        lambda_set: Sequence[float],
    ):
        if len(lambda_set) == 0:
            raise ValueError("lambda_set is empty")
        self.p = p
        self.backend = backend
        self.evaluator = evaluator
        self.context = context
        self.lambda_set = tuple(float(v) for v in lambda_set)
        self.calls = 0
        self._memo: dict[tuple[float, ...], float] = {}

    def __call__(self, weights: Sequence[float]) -> float:
        key = tuple(round(float(v), 12) for v in weights)
        hit = self._memo.get(key)
        if hit is not None:
            return hit
        self.calls += 1
        scores = []
        for lam in self.lambda_set:
            _, alloc = self.context.phis_for(self.p, weights, lam)
            report = checked_rate(self.backend.measure_rate(self.p, alloc.phis))
            recon = self.backend.reconstruct(self.p, alloc.phis)
            scores.append(self.evaluator.task_loss(self.p, recon) + lam * report.bpp_equivalent)
        value = float(np.mean(scores))
        self._memo[key] = value
        return value


@dataclass
class FinetuneResult:
    weights: ImportanceWeights
    start_score: float
    score: float
    passes: int
    converged: bool
    history: list[float] = field(default_factory=list)


def line_search(
    start: Sequence[float], metric: Callable[[Sequence[float]], float], max_passes: int = 50
) -> tuple[np.ndarray, list[float], int, bool]:
    """Coordinate line search on weights held in hundredths.

    Each coordinate tries +-1 hundredth; an improving direction is extended
    by one hundredth at a time while it keeps improving. Candidates are
    scored after renormalization to unit sum. Stops after a pass without
    change or ``max_passes`` passes. Returns the hundredths vector, the
    accepted-score history, the pass count and whether it converged.
    """
    u = np.rint(np.asarray(start, dtype=np.float64) * 100).astype(np.int64)
    if u.sum() <= 0:
        raise ValueError("weights quantize to all zeros")

    def score(vec):
        return metric(vec / vec.sum())

    best = score(u)
    history = [best]
    passes = 0
    converged = False
    while passes < max_passes:
        passes += 1
        changed = False
        for i in range(u.size):
            direction, cand_score = 0, best
            for d in (+1, -1):
                trial = u.copy()
                trial[i] += d
                if trial[i] < 0 or trial.sum() <= 0:
                    continue
                s = score(trial)
                if s < cand_score:
                    direction, cand_score = d, s
            if direction == 0:
                continue
            stride = 1
            while True:
                trial = u.copy()
                trial[i] += direction * (stride + 1)
                if trial[i] < 0 or trial[i] > 100 or trial.sum() <= 0:
                    break
                s = score(trial)
                if not s < cand_score:
                    break
                stride += 1
                cand_score = s
            u[i] += direction * stride
            best = cand_score
            history.append(best)
            changed = True
        if not changed:
            converged = True
            break
    return u, history, passes, converged


def finetune_weights(
    w_hat: ImportanceWeights | Sequence[float],
    p: FeaturePyramid,
    backend: CodecBackend,
    evaluator: TaskEvaluator,
    lambda_set: Sequence[float],
    context: AllocationContext,
    max_passes: int = 50,
) -> FinetuneResult:
    """Refine predicted weights by line search on the end-to-end efficiency metric.

    The returned weights never score worse than ``w_hat`` itself.
    """
    w0 = np.asarray(w_hat.w if isinstance(w_hat, ImportanceWeights) else w_hat, dtype=np.float64)
    metric = EfficiencyMetric(p, backend, evaluator, context, lambda_set)
    start_score = metric(w0)
    u, history, passes, converged = line_search(w0, metric, max_passes)
    score = history[-1]
    if score <= start_score:
        weights = ImportanceWeights(tuple(u / u.sum()), "finetuned")
    else:
        log.info("finetuned weights scored %.6g, worse than the input's %.6g; keeping input", score, start_score)
        provenance = w_hat.provenance if isinstance(w_hat, ImportanceWeights) else "predicted"
        weights = ImportanceWeights(tuple(w0 / w0.sum()), provenance)
        score = start_score
    return FinetuneResult(weights, start_score, score, passes, converged, history)
