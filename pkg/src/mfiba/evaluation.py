"""End-to-end pipelines, RD curves, importance sweeps and CSV reports."""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from mfiba.allocator import AllocationProblem, RateBudget, closed_form_budget, solve_for_target, budget_to_phi
from mfiba.bdrate import RdCurve, RdPoint
from mfiba.calibration import MfipRun, run_mfip
from mfiba.codec import CodecBackend, CodecConfig, PhiVector, RateReport, checked_rate
from mfiba.mfip import AllocationContext, ImportanceWeights, default_phi_levels, finetune_weights
from mfiba.pyramid import FeaturePyramid, PyramidSpec, synth_pyramid
from mfiba.rdmodel import ModelFile, RatePhiModel, fit_rate_phi
from mfiba.task import SyntheticDetector, TaskEvaluator

__all__ = [
    "MODES",
    "CalibrationMissingError",
    "RateMatchError",
    "PipelineSettings",
    "TimingReport",
    "PipelineResult",
    "AllocationPlan",
    "plan_allocation",
    "run_pipeline",
    "match_uniform_phi",
    "compare_at_matched_bits",
    "rd_curve",
    "SweepRow",
    "importance_sweep",
    "weight_vs_size_report",
    "REPORT_COLUMNS",
    "report_rows",
    "write_report_csv",
    "write_curve_csv",
    "read_curve_csv",
    "write_sweep_csv",
]

log = logging.getLogger(__name__)

MODES = ("mfiba", "mfiba_finetuned", "uniform")


class CalibrationMissingError(ValueError):
    pass


class RateMatchError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineSettings:
    """Knobs shared by every pipeline run.

    ``rate_phi_source`` selects where the rate-phi lines come from:
    ``"precode"`` refits them on the pyramid's own precode rates, while
    ``"calibrated"`` uses the model file's corpus fit.
    """

    phi_levels: tuple[float, ...] = default_phi_levels(8)
    codec: CodecConfig = CodecConfig()
    k: float | None = None
    rate_floor: float = 0.01
    rate_phi_source: str = "precode"
    match_tol: float = 0.02
    finetune_lambdas: tuple[float, ...] | None = None
    max_passes: int = 50

    def __post_init__(self):
        if self.rate_phi_source not in ("precode", "calibrated"):
            raise ValueError(f"unknown rate_phi_source {self.rate_phi_source!r}")
        if len(self.phi_levels) < 2:
            raise ValueError("need at least 2 precode levels")


@dataclass(frozen=True)
class TimingReport:
    """Seconds per stage. ``t_enc``, ``t_dec`` and ``t_task`` are per-call means
    over every call of that kind in the run; ``t_pre`` is then
    ``m * (t_enc + t_dec) + m * num_scales * t_task``.
    """

    t_pre: float
    t_assign: float
    t_enc: float
    t_dec: float
    t_task: float
    m: int
    n: int
    num_scales: int
    t_pre_measured: float = 0.0

    @classmethod
    def from_samples(cls, enc, dec, task, t_assign, m, n, num_scales, t_pre_measured=0.0):
        t_enc = float(np.mean(enc)) if len(enc) else 0.0
        t_dec = float(np.mean(dec)) if len(dec) else 0.0
        t_task = float(np.mean(task)) if len(task) else 0.0
        t_pre = m * (t_enc + t_dec) + m * num_scales * t_task
        return cls(t_pre, float(t_assign), t_enc, t_dec, t_task, m, n, num_scales, float(t_pre_measured))


@dataclass
class PipelineResult:
    mode: str
    point: RdPoint
    timing: TimingReport
    rates: RateReport
    phis: PhiVector
    lambda_prime: float | None = None
    target_bits: float | None = None
    weights: ImportanceWeights | None = None
    budget: RateBudget | None = None
    clamped: tuple[bool, ...] = ()
    extra: dict = field(default_factory=dict)

    @property
    def total_bits(self) -> int:
        return self.rates.total_bits


def _final_coding(p, backend, evaluator, phis):
    t0 = time.perf_counter()
    rates = checked_rate(backend.measure_rate(p, phis))
    t1 = time.perf_counter()
    recon = backend.reconstruct(p, phis)
    t2 = time.perf_counter()
    acc = float(evaluator.evaluate(recon, p))
    t3 = time.perf_counter()
    return rates, acc, (t1 - t0, t2 - t1, t3 - t2)


def match_uniform_phi(
    p: FeaturePyramid,
    backend: CodecBackend,
    target_bits: float,
    codec: CodecConfig | None = None,
    tol: float = 0.02,
    max_iter: int = 40,
) -> tuple[float, RateReport]:
    """Single phi for all scales whose total bits come closest to ``target_bits``.

    Regula falsi (Illinois variant) on phi; total bits grow roughly linearly
    in phi. Raises :class:`RateMatchError` if no phi lands within ``tol``.
    """
    codec = codec or CodecConfig()
    n_sc = p.num_scales

    def bits(phi):
        rep = checked_rate(backend.measure_rate(p, (phi,) * n_sc))
        return rep.total_bits - target_bits, rep

    lo, hi = codec.phi_min, codec.phi_max
    f_lo, rep_lo = bits(lo)
    f_hi, rep_hi = bits(hi)
    best = min([(abs(f_lo), lo, rep_lo), (abs(f_hi), hi, rep_hi)], key=lambda t: t[0])
    if f_lo > 0 or f_hi < 0:
        if best[0] / target_bits <= tol:
            return best[1], best[2]
        raise RateMatchError(
            f"target {target_bits:.0f} bits outside the uniform range [{f_lo + target_bits:.0f}, {f_hi + target_bits:.0f}]"
        )
    side = 0
    for _ in range(max_iter):
        if best[0] / target_bits <= 1e-3 or hi - lo < 1e-9:
            break
        mid = (lo * f_hi - hi * f_lo) / (f_hi - f_lo) if f_hi != f_lo else 0.5 * (lo + hi)
        if not lo < mid < hi:
            mid = 0.5 * (lo + hi)
        f_mid, rep = bits(mid)
        if abs(f_mid) < best[0]:
            best = (abs(f_mid), mid, rep)
        if f_mid > 0:
            hi, f_hi = mid, f_mid
            if side == -1:
                f_lo *= 0.5
            side = -1
        else:
            lo, f_lo = mid, f_mid
            if side == 1:
                f_hi *= 0.5
            side = 1
    if best[0] / target_bits > tol:
        raise RateMatchError(f"closest uniform phi={best[1]:.4f} misses the target by {100 * best[0] / target_bits:.2f}%")
    return best[1], best[2]


@dataclass
class AllocationPlan:
    """Codec settings chosen for one pyramid, before the final coding pass."""

    mode: str
    phis: PhiVector
    lambda_prime: float | None = None
    target_bits: float | None = None
    weights: ImportanceWeights | None = None
    budget: RateBudget | None = None
    clamped: tuple[bool, ...] = ()
    t_assign: float = 0.0
    mfip: MfipRun | None = None
    extra: dict = field(default_factory=dict)


def plan_allocation(
    p: FeaturePyramid,
    evaluator: TaskEvaluator,
    backend: CodecBackend,
    mode: str = "mfiba",
    *,
    lambda_prime: float | None = None,
    target_bits: float | None = None,
    model: ModelFile | None = None,
    settings: PipelineSettings | None = None,
) -> AllocationPlan:
    """Choose per-scale phi for ``p`` in one of :data:`MODES`.

    The mfiba modes precode, predict importance weights, allocate per-scale
    budgets at ``lambda_prime`` (or bisect to ``target_bits``) and map the
    budgets to phi. ``uniform`` picks one phi for all scales matching
    ``target_bits``; given ``lambda_prime`` instead, the target is the total
    bits of the mfiba run at that ``lambda_prime``.
    """
    settings = settings or PipelineSettings()
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    if (lambda_prime is None) == (target_bits is None):
        raise ValueError("give exactly one of lambda_prime and target_bits")

    if mode == "uniform":
        if target_bits is None:
            ref = run_pipeline(p, evaluator, backend, "mfiba", lambda_prime=lambda_prime, model=model, settings=settings)
            target_bits = ref.total_bits
        t0 = time.perf_counter()
        phi, _ = match_uniform_phi(p, backend, target_bits, settings.codec, settings.match_tol)
        t_assign = time.perf_counter() - t0
        phis = PhiVector.uniform(phi, p.num_scales, settings.codec)
        return AllocationPlan(mode, phis, lambda_prime, target_bits, t_assign=t_assign)

    if model is None:
        raise CalibrationMissingError(f"mode {mode!r} needs a calibrated model file")
    k = settings.k if settings.k is not None else model.k

    t0 = time.perf_counter()
    mf = run_mfip(p, backend, evaluator, settings.phi_levels)
    t_pre_measured = time.perf_counter() - t0

    t0 = time.perf_counter()
    if settings.rate_phi_source == "precode":
        rpm = fit_rate_phi(mf.grid.rate_phi_samples())
    else:
        rpm = model.rate_phi_model
    if len(rpm) != p.num_scales:
        raise ValueError(f"rate-phi model covers {len(rpm)} scales, pyramid has {p.num_scales}")
    bounds = (settings.codec.phi_min, settings.codec.phi_max)
    ctx = AllocationContext(model.loss_rate, rpm, k, bounds, settings.rate_floor)

    # Framing bits do not depend on phi; the allocator only sees coded bits.
    overhead = sum(mf.grid.overhead_bits)
    coded_target = None if target_bits is None else target_bits - overhead
    if coded_target is not None and coded_target <= 0:
        raise ValueError(f"target of {target_bits} bits does not cover the {overhead} framing bits")

    def allocate(weights):
        problem = AllocationProblem(
            weights=tuple(weights.w),
            alpha=model.alpha,
            beta=model.beta,
            k=k,
            S0=p.S0,
            lambda_prime=lambda_prime,
            target_total_bits=coded_target,
            element_counts=tuple(int(s) for s in p.element_counts),
            rate_floor=settings.rate_floor,
        )
        if coded_target is not None:
            return solve_for_target(problem)
        return lambda_prime, closed_form_budget(problem)

    weights = mf.weights
    lam, budget = allocate(weights)
    extra = {"t_pre_measured": t_pre_measured}
    if mode == "mfiba_finetuned":
        lambdas = settings.finetune_lambdas or (lam,)
        ft = finetune_weights(weights, p, backend, evaluator, lambdas, ctx, settings.max_passes)
        weights = ft.weights
        lam, budget = allocate(weights)
        extra.update(finetune_passes=ft.passes, finetune_score=ft.score, finetune_start=ft.start_score)
    alloc = budget_to_phi(budget, rpm, bounds)
    t_assign = time.perf_counter() - t0
    return AllocationPlan(mode, alloc.phis, lam, target_bits, weights, budget, alloc.clamped, t_assign, mf, extra)


def run_pipeline(
    p: FeaturePyramid,
    evaluator: TaskEvaluator,
    backend: CodecBackend,
    mode: str = "mfiba",
    *,
    lambda_prime: float | None = None,
    target_bits: float | None = None,
    model: ModelFile | None = None,
    settings: PipelineSettings | None = None,
) -> PipelineResult:
    """Plan an allocation with :func:`plan_allocation`, code ``p`` with it and score the reconstruction."""
    settings = settings or PipelineSettings()
    plan = plan_allocation(
        p, evaluator, backend, mode, lambda_prime=lambda_prime, target_bits=target_bits, model=model, settings=settings
    )
    rates, acc, (te, td, tt) = _final_coding(p, backend, evaluator, plan.phis)
    mf = plan.mfip
    if mf is None:
        timing = TimingReport.from_samples([te], [td], [tt], plan.t_assign, 0, p.n, p.num_scales)
    else:
        timing = TimingReport.from_samples(
            mf.grid.enc_times + [te],
            mf.grid.dec_times + [td],
            mf.losses.task_times + [tt],
            plan.t_assign,
            mf.grid.m,
            p.n,
            p.num_scales,
            plan.extra.get("t_pre_measured", 0.0),
        )
    return PipelineResult(
        mode,
        RdPoint(rates.bpp_equivalent, acc),
        timing,
        rates,
        plan.phis,
        plan.lambda_prime,
        plan.target_bits,
        plan.weights,
        plan.budget,
        plan.clamped,
        dict(plan.extra),
    )


def compare_at_matched_bits(
    p: FeaturePyramid,
    evaluator: TaskEvaluator,
    backend: CodecBackend,
    model: ModelFile,
    *,
    lambda_prime: float | None = None,
    target_bits: float | None = None,
    mode: str = "mfiba",
    settings: PipelineSettings | None = None,
) -> tuple[PipelineResult, PipelineResult]:
    """Run an mfiba mode, then the uniform baseline at the mfiba run's actual total bits."""
    settings = settings or PipelineSettings()
    res = run_pipeline(p, evaluator, backend, mode, lambda_prime=lambda_prime, target_bits=target_bits, model=model, settings=settings)
    uni = run_pipeline(p, evaluator, backend, "uniform", target_bits=res.total_bits, settings=settings)
    return res, uni


def rd_curve(
    p: FeaturePyramid,
    evaluator: TaskEvaluator,
    backend: CodecBackend,
    mode: str,
    *,
    lambda_primes: Sequence[float] | None = None,
    targets: Sequence[float] | None = None,
    model: ModelFile | None = None,
    settings: PipelineSettings | None = None,
) -> tuple[RdCurve, list[PipelineResult]]:
    if (lambda_primes is None) == (targets is None):
        raise ValueError("give exactly one of lambda_primes and targets")
    ops = [("lambda_prime", v) for v in lambda_primes] if lambda_primes is not None else [("target_bits", v) for v in targets]
    if len(ops) < 4:
        raise ValueError("an RD curve needs at least 4 operating points")
    results = [
        run_pipeline(p, evaluator, backend, mode, model=model, settings=settings, **{key: value}) for key, value in ops
    ]
    return RdCurve.from_points([r.point for r in results], label=mode), results


@dataclass(frozen=True)
class SweepRow:
    scale: int
    phi: float
    bpp: float
    accuracy: float


def importance_sweep(
    p: FeaturePyramid,
    evaluator: TaskEvaluator,
    backend: CodecBackend,
    scale: int,
    phi_levels: Sequence[float],
) -> list[SweepRow]:
    """Code only ``scale`` at each phi, keep the rest lossless, and score the result.

    ``bpp`` is the coded scale's bits divided by the scale-0 element count.
    """
    if not 0 <= scale < p.num_scales:
        raise ValueError(f"scale {scale} outside 0..{p.num_scales - 1}")
    rows = []
    for phi in phi_levels:
        phis = (float(phi),) * p.num_scales
        rates = checked_rate(backend.measure_rate(p, phis))
        recon = backend.reconstruct(p, phis)
        sub = p.replace_scale(scale, recon.scales[scale].data)
        rows.append(SweepRow(scale, float(phi), rates.bits[scale] / p.S0, float(evaluator.evaluate(sub, p))))
    return rows


def weight_vs_size_report(
    seeds: Iterable[int],
    size_params: Sequence[float],
    spec: PyramidSpec,
    backend: CodecBackend,
    phi_levels: Sequence[float],
    detector: SyntheticDetector | None = None,
) -> list[tuple[float, tuple[float, ...]]]:
    """Mean predicted weights per object-size bucket on size-coupled synthetic pyramids."""
    detector = detector or SyntheticDetector(size_coupling=True)
    if not detector.size_coupling:
        raise ValueError("weight_vs_size_report needs a size-coupled detector")
    seeds = list(seeds)
    rows = []
    for t in size_params:
        ws = []
        for seed in seeds:
            pyr = synth_pyramid(seed, _with_size(spec, t))
            ws.append(run_mfip(pyr, backend, detector, phi_levels).weights.w)
        mean = np.mean(np.asarray(ws), axis=0)
        rows.append((float(t), tuple(float(v) for v in mean / mean.sum())))
    return rows


def _with_size(spec: PyramidSpec, t: float) -> PyramidSpec:
    from dataclasses import replace

    return replace(spec, object_size_param=float(t))


# -- CSV ----------------------------------------------------------------------

REPORT_COLUMNS = ("run_id", "mode", "lambda_prime", "bpp", "accuracy", "t_pre", "t_assign", "t_enc", "t_dec", "t_task")
TIMING_COLUMNS = ("t_pre", "t_assign", "t_enc", "t_dec", "t_task")


def report_rows(results: Iterable[tuple[str, PipelineResult]]) -> list[dict]:
    rows = []
    for run_id, r in results:
        t = r.timing
        rows.append(
            {
                "run_id": run_id,
                "mode": r.mode,
                "lambda_prime": "" if r.lambda_prime is None else repr(float(r.lambda_prime)),
                "bpp": repr(float(r.point.bpp)),
                "accuracy": repr(float(r.point.accuracy)),
                "t_pre": f"{t.t_pre:.6f}",
                "t_assign": f"{t.t_assign:.6f}",
                "t_enc": f"{t.t_enc:.6f}",
                "t_dec": f"{t.t_dec:.6f}",
                "t_task": f"{t.t_task:.6f}",
            }
        )
    return rows


def _csv_text(columns, rows) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    return buf.getvalue()


def write_report_csv(results: Iterable[tuple[str, PipelineResult]]) -> str:
    return _csv_text(REPORT_COLUMNS, report_rows(results))


def write_curve_csv(curves: Iterable[RdCurve]) -> str:
    rows = [
        {"mode": c.label, "bpp": repr(float(pt.bpp)), "accuracy": repr(float(pt.accuracy))} for c in curves for pt in c.points
    ]
    return _csv_text(("mode", "bpp", "accuracy"), rows)


def read_curve_csv(text: str, mode: str | None = None) -> dict[str, RdCurve]:
    """Parse a curve CSV into curves keyed by mode (only ``mode`` if given)."""
    groups: dict[str, list[RdPoint]] = {}
    for row in csv.DictReader(io.StringIO(text)):
        if mode is not None and row["mode"] != mode:
            continue
        groups.setdefault(row["mode"], []).append(RdPoint(float(row["bpp"]), float(row["accuracy"])))
    if mode is not None and mode not in groups:
        raise ValueError(f"no rows for mode {mode!r}")
    return {m: RdCurve.from_points(pts, label=m) for m, pts in groups.items()}


def write_sweep_csv(rows: Iterable[SweepRow]) -> str:
    return _csv_text(
        ("scale", "phi", "bpp", "accuracy"),
        ({"scale": r.scale, "phi": repr(r.phi), "bpp": repr(r.bpp), "accuracy": repr(r.accuracy)} for r in rows),
    )
